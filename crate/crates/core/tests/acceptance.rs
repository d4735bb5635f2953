//! Acceptance suite: one test and one PASS/FAIL line per criterion.

use std::f64::consts::{FRAC_PI_2, PI};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use panonormal::autograd::Graph;
use panonormal::d2n::{central_difference_normals, depth_to_normal, D2NConfig};
use panonormal::losses::{
    mse_loss, perceptual_loss, pixel_angle, quaternion_loss, quaternion_single, smooth_loss, LossWeights,
    PerceptualExtractor,
};
use panonormal::maps::{NormalMap, ValidMask};
use panonormal::metrics::{aggregate, angle_deg, angular_error_map, compare_reports, MetricReport};
use panonormal::net::{EmbedKind, Mode, Model, ModelConfig};
use panonormal::runner::*;
use panonormal::sphere_geom::*;
use panonormal::synthdata::{render_scene, Aabb, Sample, SceneSpec};
use panonormal::tensor::{FeatureMap, Tensor};

fn report(id: u32, name: &str, pass: bool, detail: String) {
    println!("{} criterion {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn sample_of(spec: &SceneSpec, grid: &ErpGridSpec, name: &str) -> Sample {
    let r = render_scene(spec, grid).unwrap();
    Sample { name: name.into(), rgb: r.rgb, normal: r.normal, depth: r.depth, mask: r.mask }
}

fn chord(a: &SphericalDir, b: &SphericalDir) -> f64 {
    let (a, b) = (a.as_array(), b.as_array());
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[test]
fn c01_geometry_round_trips() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grid = ErpGridSpec::new(512).unwrap();
    let (w, h) = (grid.width() as f64, grid.height() as f64);
    let mut worst_erp: f64 = 0.0;
    for _ in 0..10_000 {
        // keep clear of the poles, where longitude is undefined
        let (u, v) = (rng.random_range(0.0..w), rng.random_range(0.01 * h..0.99 * h));
        let (u2, v2) = dir_to_erp_pixel(&erp_pixel_to_dir(u, v, &grid), &grid);
        let du = (u2 - u + w / 2.0).rem_euclid(w) - w / 2.0;
        worst_erp = worst_erp.max(du.abs()).max((v2 - v).abs());
    }
    let mut worst_gno: f64 = 0.0;
    for _ in 0..10_000 {
        let centre = SphericalDir::from_lat_lon(rng.random_range(-1.5..1.5), rng.random_range(-PI..PI));
        let tp = TangentPoint::new(centre);
        // direction within 60° of the tangent point
        let r = rng.random_range(0.0..60f64.to_radians().tan());
        let a = rng.random_range(0.0..2.0 * PI);
        let d = gnomonic_inverse(&tp, r * a.cos(), r * a.sin());
        let (x, y) = gnomonic_forward(&tp, &d).unwrap();
        let back = gnomonic_inverse(&tp, x, y);
        worst_gno = worst_gno.max(chord(&d, &back)).max((x - r * a.cos()).abs()).max((y - r * a.sin()).abs());
    }
    let dt = t0.elapsed();
    report(
        1,
        "geometry round trips",
        worst_erp < 1e-9 && worst_gno < 1e-9 && dt < Duration::from_secs(10),
        format!("ERP {worst_erp:.2e}, gnomonic {worst_gno:.2e} (< 1e-9), {dt:.2?} (< 10 s)"),
    );
}

#[test]
fn c02_sampling_grid_equivariance() {
    let grid = ErpGridSpec::new(32).unwrap();
    let g = build_tangent_sampling_grid(&grid, 9, 1.0).unwrap();
    let w = grid.width() as f64;
    let mut worst: f64 = 0.0;
    for v in 0..grid.height() {
        let reference = g.query(0, v);
        for u in 0..grid.width() {
            for (p, r) in g.query(u, v).iter().zip(reference) {
                let du = (p.0 - u as f64 - r.0).rem_euclid(w);
                worst = worst.max(du.min(w - du)).max((p.1 - r.1).abs());
            }
        }
    }
    report(2, "sampling-grid longitude equivariance", worst < 1e-9, format!("max deviation {worst:.2e} (< 1e-9)"));
}

#[test]
fn c03_gradient_verification() {
    let mut cfg = TrainConfig::default();
    cfg.model = ModelConfig {
        height: 8,
        width: 16,
        levels: 1,
        base_channels: 8,
        num_heads: 2,
        k_samples: 9,
        lattice_spacing: 1.0,
        ffn_expansion: 2,
        embed: EmbedKind::ConvStack,
    };
    let t0 = Instant::now();
    let rep = gradcheck(&cfg).unwrap();
    let dt = t0.elapsed();
    println!("{rep}");
    let frac = rep.pass_fraction();
    report(
        3,
        "gradient verification",
        frac >= 0.99 && dt < Duration::from_secs(300),
        format!("{:.1}% of {} groups within 1e-3 (>= 99%), {dt:.2?} (< 5 min)", 100.0 * frac, rep.groups.len()),
    );
}

fn random_batch(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(&[n, 3, h, w], (0..n * 3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn roll_batch(t: &Tensor, k: usize) -> Tensor {
    let (n, ..) = t.dims4();
    let maps: Vec<FeatureMap> = (0..n).map(|i| t.sample(i).roll_columns(k)).collect();
    Tensor::stack(&maps.iter().collect::<Vec<_>>()).unwrap()
}

#[test]
fn c04_attention_invariants() {
    let cfg = ModelConfig { height: 32, width: 64, levels: 2, base_channels: 16, ..ModelConfig::default() };
    let model = Model::new(cfg.clone(), 4).unwrap();
    let x = random_batch(2, 32, 64, 5);
    let forward = |x: &Tensor| {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = model.forward_graph(&mut g, &p, xv, Mode::Train, true).unwrap();
        let maps: Vec<Tensor> = out.maps.iter().map(|&m| g.value(m).clone()).collect();
        (maps, out.trace)
    };
    let (maps, trace) = forward(&x);

    let mut worst_sum: f64 = 0.0;
    let mut exact = true;
    for t in &trace {
        let (n, _, h, w) = t.weights.dims4();
        let k = t.grid.k_samples();
        for s in 0..n {
            for q in 0..h * w {
                for m in 0..t.heads {
                    let sum: f64 = (0..k).map(|j| t.weights.data()[((s * t.heads * k) + m * k + j) * h * w + q]).sum();
                    worst_sum = worst_sum.max((sum - 1.0).abs());
                    let (u, v) = (q % w, q / w);
                    for (j, want) in t.grid.query(u, v).iter().enumerate() {
                        let got = t.position(s, q, m, j);
                        exact &= got.0.to_bits() == want.0.to_bits() && got.1.to_bits() == want.1.to_bits();
                    }
                }
            }
        }
    }

    // shifts that are multiples of the coarsest stride keep every level aligned
    let stride = 1 << cfg.levels;
    let mut worst_shift: f64 = 0.0;
    for shift in [stride, 3 * stride, 16] {
        let (shifted, _) = forward(&roll_batch(&x, shift));
        for (a, b) in maps.iter().zip(&shifted) {
            let scale = cfg.width / a.dims4().3;
            worst_shift = worst_shift.max(roll_batch(a, shift / scale).max_abs_diff(b));
        }
    }
    report(
        4,
        "attention invariants",
        worst_sum < 1e-6 && exact && worst_shift < 1e-4,
        format!(
            "softmax sum error {worst_sum:.2e} (< 1e-6), zero-flow positions bit-exact: {exact}, \
             longitude-shift deviation {worst_shift:.2e} (< 1e-4)"
        ),
    );
}

fn one_pixel(n: [f64; 3]) -> Tensor {
    Tensor::from_vec(&[1, 3, 1, 1], n.to_vec()).unwrap()
}

fn unit_batch(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut t = random_batch(n, h, w, seed);
    let plane = h * w;
    for s in 0..n {
        for p in 0..plane {
            let b = s * 3 * plane + p;
            let v = [t.data()[b] - 0.5, t.data()[b + plane] - 0.5, t.data()[b + 2 * plane] - 0.5];
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            for c in 0..3 {
                t.data_mut()[b + c * plane] = v[c] / l;
            }
        }
    }
    t
}

#[test]
fn c05_loss_contracts() {
    let gt = unit_batch(2, 8, 16, 7);
    let masks = vec![ValidMask::all_valid(8, 16); 2];
    let phi = PerceptualExtractor::new(0x5eed);
    let preds = vec![gt.clone()];
    let zeros = [
        mse_loss(&preds, &gt, &masks).unwrap(),
        quaternion_loss(&preds, &gt, &masks).unwrap(),
        perceptual_loss(&gt, &gt, &masks, &phi).unwrap(),
        smooth_loss(&preds, &gt, &masks).unwrap(),
    ];
    let one = vec![ValidMask::all_valid(1, 1)];
    let q = |a: [f64; 3], b: [f64; 3]| quaternion_single(&one_pixel(a), &one_pixel(b), &one).unwrap().0.value;
    let cases = [
        (q([0.0, 0.0, 1.0], [0.0, 0.0, 1.0]), 0.0),
        (q([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]), FRAC_PI_2),
        (q([0.0, 1.0, 0.0], [0.0, -1.0, 0.0]), PI),
        (pixel_angle([0.0, 0.0, 1.0], [0.0, 0.0, 1.0]), 0.0),
        (pixel_angle([1.0, 0.0, 0.0], [0.0, 0.0, 1.0]), FRAC_PI_2),
        (pixel_angle([1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]), PI),
    ];
    let w = LossWeights::default();
    let defaults = (w.lambda_m, w.lambda_q, w.lambda_p, w.lambda_s) == (1.0, 10.0, 0.05, 0.5);
    report(
        5,
        "loss contracts",
        zeros.iter().all(|&z| z == 0.0) && cases.iter().all(|(got, want)| got == want) && defaults,
        format!(
            "identical-input losses {zeros:?}, quaternion cases {:?}, default weights {defaults}",
            cases.map(|c| c.0)
        ),
    );
}

/// Brute-force per-pixel loop over every map.
fn oracle_report(preds: &[NormalMap], gts: &[NormalMap], masks: &[ValidMask]) -> MetricReport {
    let mut errs = Vec::new();
    for ((p, g), m) in preds.iter().zip(gts).zip(masks) {
        for v in 0..g.height() {
            for u in 0..g.width() {
                if m.is_valid(v, u) {
                    errs.push(angle_deg(p.get(v, u), g.get(v, u)));
                }
            }
        }
    }
    let n = errs.len();
    let mean = errs.iter().sum::<f64>() / n as f64;
    let mse = errs.iter().map(|e| e * e).sum::<f64>() / n as f64;
    let mut delta = [0.0; 5];
    for (d, t) in delta.iter_mut().zip([5.0, 7.5, 11.5, 22.5, 30.0]) {
        *d = errs.iter().filter(|&&e| e < t).count() as f64 / n as f64;
    }
    let mut sorted = errs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
    MetricReport { mean_deg: mean, median_deg: median, mse_deg2: mse, delta, valid_pixel_count: n }
}

fn random_normals(h: usize, w: usize, rng: &mut ChaCha8Rng, spread: f64) -> (NormalMap, NormalMap) {
    let mut gt = NormalMap::zeros(h, w);
    let mut pred = NormalMap::zeros(h, w);
    for v in 0..h {
        for u in 0..w {
            let g = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)];
            gt.set(v, u, g);
            pred.set(v, u, g.map(|c| c + rng.random_range(-spread..spread)));
        }
    }
    (pred, gt)
}

#[test]
fn c06_metrics_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut median_exact = true;
    let mut invariants = true;
    for _ in 0..20 {
        let maps = rng.random_range(1..4);
        let spread = rng.random_range(0.05..1.0);
        let (mut preds, mut gts, mut masks) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..maps {
            let (p, g) = random_normals(8, 16, &mut rng, spread);
            let mask = ValidMask::from_vec(8, 16, (0..128).map(|i| i == 0 || rng.random_bool(0.7)).collect()).unwrap();
            preds.push(p);
            gts.push(g);
            masks.push(mask);
        }
        let err_maps: Vec<_> =
            preds.iter().zip(&gts).zip(&masks).map(|((p, g), m)| angular_error_map(p, g, m).unwrap()).collect();
        let got = aggregate(&err_maps).unwrap();
        let want = oracle_report(&preds, &gts, &masks);
        worst = worst
            .max((got.mean_deg - want.mean_deg).abs())
            .max((got.mse_deg2 - want.mse_deg2).abs())
            .max(got.delta.iter().zip(want.delta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        median_exact &= got.median_deg == want.median_deg && got.valid_pixel_count == want.valid_pixel_count;
        invariants &= got.delta.windows(2).all(|d| d[0] <= d[1]) && got.mse_deg2 >= got.mean_deg * got.mean_deg;
    }
    // angle_deg against an independent acos formula
    let mut angle_dev: f64 = 0.0;
    for _ in 0..1000 {
        let a: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let b: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let la = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        let lb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
        let cos = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (la * lb);
        angle_dev = angle_dev.max((angle_deg(a, b) - cos.clamp(-1.0, 1.0).acos().to_degrees()).abs());
    }
    report(
        6,
        "metrics oracle",
        worst < 1e-9 && median_exact && invariants && angle_dev < 1e-6,
        format!(
            "max deviation {worst:.2e} (< 1e-9), median exact {median_exact}, δ monotone and mse >= mean² \
             {invariants}, per-pixel angle vs acos {angle_dev:.1e}°"
        ),
    );
}

fn report_with(mean: f64, delta: f64) -> MetricReport {
    MetricReport { mean_deg: mean, median_deg: mean, mse_deg2: mean * mean, delta: [delta; 5], valid_pixel_count: 1 }
}

#[test]
fn c07_improvement_arithmetic() {
    let ours = report_with(4.9312, 0.9489);
    let reference = report_with(5.4263, 0.9407);
    let imp = compare_reports(&ours, &reference).unwrap();
    let pct = format!("{:.2}", imp.mean_pct);
    let pts = format!("{:.2}", imp.delta_points[0]);
    report(
        7,
        "improvement arithmetic",
        pct == "9.12" && pts == "0.82",
        format!("mean error improvement {pct}% (9.12), accuracy gain {pts} points (0.82)"),
    );
}

#[test]
fn c08_depth_to_normal_floor() {
    let t0 = Instant::now();
    let grid = ErpGridSpec::new(64).unwrap();
    let room = Aabb::new([-2.0, 0.0, -2.5], [2.5, 2.8, 3.0]).unwrap();
    let r = render_scene(&SceneSpec::empty_room(room, [0.2, 1.4, -0.3]), &grid).unwrap();
    let cfg = D2NConfig { num_triangles: 8, neighborhood_radius: 2, seed: 3 };
    let (normals, valid) = depth_to_normal(&r.depth, &grid, &cfg, &r.mask).unwrap();
    let (again, _) = depth_to_normal(&r.depth, &grid, &cfg, &r.mask).unwrap();
    let interior = r.face_interior(cfg.neighborhood_radius);
    let (mut total, mut good) = (0, 0);
    for v in 0..grid.height() {
        for u in 0..grid.width() {
            if interior.is_valid(v, u) && r.normal.get(v, u) == [0.0, 1.0, 0.0] {
                total += 1;
                if valid.is_valid(v, u) && angle_deg(normals.get(v, u), [0.0, 1.0, 0.0]) < 2.0 {
                    good += 1;
                }
            }
        }
    }
    let frac = good as f64 / total.max(1) as f64;
    let dt = t0.elapsed();
    report(
        8,
        "depth-to-normal plane recovery",
        total > 0 && frac > 0.99 && normals == again && dt < Duration::from_secs(30),
        format!(
            "{:.2}% of {total} floor pixels within 2° (> 99%), deterministic {}, {dt:.2?} (< 30 s)",
            100.0 * frac,
            normals == again
        ),
    );
}

#[test]
fn c09_synthetic_self_consistency() {
    let grid = ErpGridSpec::new(128).unwrap();
    let (mut total, mut good, mut worst_fd) = (0usize, 0usize, 0f64);
    for seed in 0..3 {
        let r = render_scene(&SceneSpec::random(seed), &grid).unwrap();
        let (fd, fd_valid) = central_difference_normals(&r.depth, &grid, &r.mask).unwrap();
        let interior = r.face_interior(2);
        for v in 0..grid.height() {
            for u in 0..grid.width() {
                if interior.is_valid(v, u) && fd_valid.is_valid(v, u) {
                    let e = angle_deg(fd.get(v, u), r.normal.get(v, u));
                    total += 1;
                    good += usize::from(e < 3.0);
                    worst_fd = worst_fd.max(e);
                }
            }
        }
    }

    // a quarter turn about the vertical axis is a W/4 column shift
    let small = ErpGridSpec::new(64).unwrap();
    let w = small.width();
    let (mut rot_dev, mut masks_equal) = (0f64, true);
    for seed in 10..13 {
        let spec = SceneSpec::random(seed);
        let a = render_scene(&spec, &small).unwrap();
        let b = render_scene(&spec.rotated_quarter(), &small).unwrap();
        for v in 0..small.height() {
            for u in 0..w {
                let s = (u + w / 4) % w;
                masks_equal &= a.mask.is_valid(v, u) == b.mask.is_valid(v, s);
                let n = a.normal.get(v, u);
                let rn = [n[2], n[1], -n[0]];
                let bn = b.normal.get(v, s);
                rot_dev = rot_dev
                    .max((a.depth.get(v, u) - b.depth.get(v, s)).abs())
                    .max((0..3).map(|c| (rn[c] - bn[c]).abs()).fold(0.0, f64::max))
                    .max((0..3).map(|c| (a.rgb.get(c, v, u) - b.rgb.get(c, v, s)).abs()).fold(0.0, f64::max));
            }
        }
    }
    report(
        9,
        "synthetic data self-consistency",
        total > 0 && good == total && rot_dev < 1e-9 && masks_equal,
        format!(
            "{good}/{total} face-interior pixels within 3° (worst {worst_fd:.3}°), \
             quarter-turn vs W/4 shift deviation {rot_dev:.2e}, masks equal {masks_equal}"
        ),
    );
}

fn scenes(seeds: std::ops::Range<u64>, grid: &ErpGridSpec) -> Vec<Sample> {
    seeds.map(|s| sample_of(&SceneSpec::random(s), grid, &format!("scene{s}"))).collect()
}

fn small_model(height: usize, levels: usize) -> ModelConfig {
    ModelConfig {
        height,
        width: 2 * height,
        levels,
        base_channels: 8,
        num_heads: 2,
        k_samples: 9,
        lattice_spacing: 1.0,
        ffn_expansion: 2,
        embed: EmbedKind::ConvStack,
    }
}

#[test]
fn c10_overfit_sanity() {
    let t0 = Instant::now();
    let grid = ErpGridSpec::new(64).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.model = small_model(64, 2);
    cfg.lr0 = 3e-3;
    cfg.lr_step_epochs = 10_000;
    cfg.max_epochs = 10_000;
    cfg.patience = 10_000;
    let train = scenes(0..4, &grid);
    // the trainer needs a validation split; it plays no part here
    let mut t = Trainer::from_samples(cfg, train.clone(), scenes(4..5, &grid)).unwrap();
    let mut mean = f64::INFINITY;
    let mut steps = 0;
    while steps < 2000 {
        t.step().unwrap();
        steps += 1;
        if steps % 50 == 0 {
            mean = evaluate_model(t.model(), &train).unwrap().0.mean_deg;
            if mean < 10.0 {
                break;
            }
        }
    }
    let dt = t0.elapsed();
    report(
        10,
        "overfit sanity",
        mean < 10.0 && dt < Duration::from_secs(1800),
        format!("training mean error {mean:.3}° after {steps} steps (< 10°, <= 2000), {dt:.1?} (< 30 min)"),
    );
}

#[test]
fn c12_determinism_and_persistence() {
    let grid = ErpGridSpec::new(16).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.model = small_model(16, 2);
    cfg.lr0 = 1e-3;
    cfg.seed = 12;
    let (train, val) = (scenes(20..24, &grid), scenes(24..25, &grid));
    let trace = || {
        let mut t = Trainer::from_samples(cfg.clone(), train.clone(), val.clone()).unwrap();
        for _ in 0..10 {
            t.step().unwrap();
        }
        let bits: Vec<[u64; 5]> = t
            .steps()
            .iter()
            .map(|s| [s.loss.mse, s.loss.quaternion, s.loss.perceptual, s.loss.smooth, s.loss.total].map(f64::to_bits))
            .collect();
        (bits, t)
    };
    let (a, trainer) = trace();
    let (b, _) = trace();
    let same_trace = a.len() == 10 && a == b;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    trainer.save(&path).unwrap();
    let loaded = load_model(&path).unwrap();
    let x = Tensor::stack(&[&val[0].rgb]).unwrap();
    let before = trainer.model().predict(&x).unwrap();
    let after = loaded.predict(&x).unwrap();
    let same_output = before.len() == after.len()
        && before
            .iter()
            .zip(&after)
            .all(|(p, q)| p.data().iter().zip(q.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    report(
        12,
        "determinism and persistence",
        same_trace && same_output,
        format!(
            "10-step loss trace bit-identical {same_trace}, checkpoint round-trip outputs bit-identical {same_output}"
        ),
    );
}

#[test]
fn c11_ablation_direction() {
    let grid = ErpGridSpec::new(32).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.model = small_model(32, 2);
    cfg.lr0 = 1e-3;
    cfg.max_epochs = 10;
    let samples = scenes(0..240, &grid);
    let (train, val) = samples.split_at(200);
    let variants = ["full".parse().unwrap(), "finest-only".parse().unwrap()];
    let rows = ablate_samples(&cfg, &variants, train, val).unwrap();
    print!("{}", format_table(&rows));
    let (full, finest) = (rows[0].report.mean_deg, rows[1].report.mean_deg);
    report(
        11,
        "ablation direction",
        rows[0].steps == rows[1].steps && full < finest,
        format!("validation mean error: full {full:.3}°, finest-head-only {finest:.3}° ({} steps each)", rows[0].steps),
    );
}
