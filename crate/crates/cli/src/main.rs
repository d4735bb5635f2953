use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use panonormal::d2n::{depth_to_normal, D2NConfig};
use panonormal::maps::ValidMask;
use panonormal::runner::{self, format_table, TrainConfig, Trainer, Variant};
use panonormal::sphere_geom::ErpGridSpec;
use panonormal::synthdata::{load_depth, load_mask, make_dataset, save_mask, save_normals, DatasetOptions, Split};

#[derive(Parser)]
#[command(name = "panonormal", version, about = "Surface normals from 360-degree panoramas")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic room dataset.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Panorama height; the width is twice this.
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of pixels per sample marked invalid.
        #[arg(long, default_value_t = 0.0)]
        invalid_fraction: f64,
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        #[arg(long, default_value_t = 0.0)]
        test_fraction: f64,
    },
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint and write a CSV report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// train, val or test; every sample when omitted.
        #[arg(long)]
        split: Option<String>,
    },
    /// Predict normals for one RGB panorama.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normals from a depth file (`depth.bin`).
    D2n {
        #[arg(long)]
        depth: PathBuf,
        /// Output directory for normal.png, normal_vis.png and valid.png.
        #[arg(long)]
        out: PathBuf,
        /// Validity mask PNG; defaults to `mask.png` beside the depth file when present.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        triangles: usize,
        #[arg(long, default_value_t = 2)]
        radius: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train each variant under the same budget and print a table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated, e.g. `baseline,+decoder,+decoder+embed,finest-only,full/mq`.
        #[arg(long, value_delimiter = ',', default_value = "baseline,+decoder,+decoder+embed")]
        variants: Vec<String>,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => bail!("unknown split {other:?}"),
    })
}

fn d2n(depth: &Path, out: &Path, mask: Option<PathBuf>, cfg: D2NConfig) -> Result<()> {
    let depth_map = load_depth(depth)?;
    let (h, w) = (depth_map.height(), depth_map.width());
    let grid = ErpGridSpec::with_dims(h, w)?;
    let beside = depth.with_file_name("mask.png");
    let mask = match mask {
        Some(p) => load_mask(&p)?,
        None if beside.exists() => load_mask(&beside)?,
        None => ValidMask::all_valid(h, w),
    };
    let (normals, valid) = depth_to_normal(&depth_map, &grid, &cfg, &mask)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    save_normals(&normals, &out.join("normal.png"))?;
    runner::save_visual(&normals, &out.join("normal_vis.png"))?;
    save_mask(&valid, &out.join("valid.png"))?;
    println!("{} of {} pixels have a normal", valid.count(), h * w);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Gen { n, seed, height, out, invalid_fraction, val_fraction, test_fraction } => {
            let grid = ErpGridSpec::new(height)?;
            let opts = DatasetOptions { invalid_fraction, val_fraction, test_fraction };
            let m = make_dataset(n, seed, &grid, &out, &opts)?;
            println!("wrote {} samples ({}x{}) to {}", m.samples.len(), grid.height(), grid.width(), out.display());
        }
        Cmd::Train { config, resume } => {
            let cfg = TrainConfig::load(&config)?;
            let mut t = match resume {
                Some(ck) => {
                    let ds = panonormal::synthdata::Dataset::open(&cfg.data)?;
                    Trainer::resume(cfg.clone(), ds.load_split(Split::Train)?, ds.load_split(Split::Val)?, &ck)?
                }
                None => Trainer::new(cfg.clone())?,
            };
            let reason = t.run()?;
            let st = t.state();
            println!("stopped ({reason:?}) after {} steps, {} epochs", st.step, st.epoch);
            if let Some(best) = st.best_val {
                println!("best validation mean error {best:.4} deg");
            }
        }
        Cmd::Eval { ckpt, data, out, split } => {
            let split = split.as_deref().map(parse_split).transpose()?;
            let report = runner::evaluate(&ckpt, &data, split, &out)?;
            println!("{report}");
        }
        Cmd::Predict { ckpt, image, out } => {
            let p = runner::predict(&ckpt, &image, &out)?;
            if p.resampled {
                eprintln!("input resampled to the checkpoint resolution");
            }
            println!("{}\n{}", p.normal_path.display(), p.visual_path.display());
        }
        Cmd::D2n { depth, out, mask, triangles, radius, seed } => {
            d2n(&depth, &out, mask, D2NConfig { num_triangles: triangles, neighborhood_radius: radius, seed })?;
        }
        Cmd::Gradcheck { config } => {
            let report = runner::gradcheck(&TrainConfig::load(&config)?)?;
            println!("{report}");
            if !report.all_passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::Ablate { config, variants } => {
            let cfg = TrainConfig::load(&config)?;
            let variants = variants.iter().map(|v| v.parse::<Variant>()).collect::<panonormal::Result<Vec<_>>>()?;
            print!("{}", format_table(&runner::ablate(&cfg, &variants)?));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
