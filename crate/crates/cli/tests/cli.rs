use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panonormal")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen", "--n", "3", "--seed", "4", "--height", "8", "--out", s(&data)]);
    assert!(data.join("manifest.json").exists());
    assert!(data.join("sample_0002").join("depth.bin").exists());

    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "data = \"data\"\nout = \"run\"\nmax_epochs = 2\nlr0 = 1e-3\n\
         model.height = 8\nmodel.levels = 1\nmodel.base_channels = 8\n",
    )
    .unwrap();
    let stdout = ok(&["train", "--config", s(&cfg)]);
    assert!(stdout.contains("MaxEpochs"), "{stdout}");
    let run = dir.path().join("run");
    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    assert!(log.lines().next().unwrap().starts_with("step=0 epoch=0 lr="));

    let csv = dir.path().join("report.csv");
    ok(&["eval", "--ckpt", s(&run.join("best.ckpt")), "--data", s(&data), "--out", s(&csv), "--split", "val"]);
    assert!(std::fs::read_to_string(&csv).unwrap().lines().count() >= 2);

    let pred = dir.path().join("pred");
    ok(&[
        "predict",
        "--ckpt",
        s(&run.join("best.ckpt")),
        "--image",
        s(&data.join("sample_0000/rgb.png")),
        "--out",
        s(&pred),
    ]);
    assert!(pred.join("normal.png").exists() && pred.join("normal_vis.png").exists());

    // a longer run resumed from the last checkpoint
    std::fs::write(
        &cfg,
        "data = \"data\"\nout = \"run2\"\nmax_epochs = 3\nlr0 = 1e-3\n\
         model.height = 8\nmodel.levels = 1\nmodel.base_channels = 8\n",
    )
    .unwrap();
    let stdout = ok(&["train", "--config", s(&cfg), "--resume", s(&run.join("last.ckpt"))]);
    assert!(stdout.contains("3 epochs"), "{stdout}");
}

#[test]
fn d2n_writes_normals() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen", "--n", "1", "--height", "16", "--out", s(&data)]);
    let out = dir.path().join("d2n");
    let stdout = ok(&["d2n", "--depth", s(&data.join("sample_0000/depth.bin")), "--out", s(&out), "--triangles", "4"]);
    assert!(stdout.contains("pixels have a normal"));
    let n = panonormal::synthdata::load_normals(&out.join("normal.png")).unwrap();
    assert_eq!((n.height(), n.width()), (16, 32));
}

#[test]
fn bad_input_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = cli(&["train", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
    assert!(!cli(&["ablate", "--config", s(&cfg), "--variants", "nope"]).status.success());
    assert!(!cli(&["eval", "--ckpt", "missing.ckpt", "--data", ".", "--out", "x.csv"]).status.success());
}

#[test]
fn gradcheck_on_a_small_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("g.toml");
    std::fs::write(&cfg, "model.height = 4\nmodel.levels = 1\nmodel.base_channels = 4\nmodel.embed = \"single\"\n")
        .unwrap();
    let stdout = ok(&["gradcheck", "--config", s(&cfg)]);
    assert!(stdout.contains("groups within 1e-3"), "{stdout}");
    std::fs::write(&cfg, "model.height = 16\nmodel.levels = 1\n").unwrap();
    assert!(!cli(&["gradcheck", "--config", s(&cfg)]).status.success());
}
