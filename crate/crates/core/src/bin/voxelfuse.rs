use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use voxelfuse::pipeline::commands::{check_grads_cmd, fuse_cmd, gen_scene_cmd, lift_cmd, train_demo_cmd};
use voxelfuse::pipeline::{configure_threads, RunConfig};
use voxelfuse::Result;

/// Camera-LiDAR voxel fusion toolkit.
#[derive(Parser)]
#[command(name = "voxelfuse", version)]
struct Cli {
    /// Run configuration (TOML with dotted keys); defaults to the toy profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (for `fuse`, the output tensor file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lift image features into the image voxel grid.
    Lift {
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        points: PathBuf,
        /// Config file supplying image_grid, depth and camera.stride.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Fuse a LiDAR voxel grid with an image voxel grid.
    Fuse {
        #[arg(long)]
        lidar: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Directory of named parameter tensors.
        #[arg(long)]
        params: PathBuf,
    },
    /// Train the demo detector and write losses.csv.
    TrainDemo,
    /// Finite-difference audit of every differentiable operation.
    CheckGrads {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Generate a synthetic scene.
    GenScene,
}

fn load(path: Option<&PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::toy(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let cfg = load(cli.config.as_ref(), cli.seed)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match cli.cmd {
        Command::Lift { calib, features, points, grid } => {
            let grid_cfg = match grid {
                Some(g) => RunConfig::load(&g)?,
                None => cfg,
            };
            let path = lift_cmd(&grid_cfg, &calib, &features, &points, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Fuse { lidar, image, params } => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("fused.vxf"));
            let t = fuse_cmd(cfg.qfm.lambda, &lidar, &image, &params, &out)?;
            println!("wrote {} {:?}", out.display(), t.shape());
        }
        Command::TrainDemo => {
            let report = train_demo_cmd(&cfg, &out, |r| {
                if r.step % 10 == 0 {
                    eprintln!(
                        "step {:4}  total {:.5}  rpn {:.5}  rcnn {:.5}  vfim {:.5}",
                        r.step, r.total, r.rpn, r.rcnn, r.vfim
                    );
                }
            })?;
            if let (Some(first), Some(last)) = (report.rows.first(), report.rows.last()) {
                println!(
                    "L_total {:.6} -> {:.6}; encoded RoI cosine {:.4}; wrote {}",
                    first.total,
                    last.total,
                    report.final_cosine,
                    out.join("losses.csv").display()
                );
            }
        }
        Command::CheckGrads { seeds } => {
            let seeds: Vec<u64> = (0..seeds).collect();
            let recs = check_grads_cmd(&seeds)?;
            let worst = recs.iter().fold(0.0f64, |m, r| m.max(r.error));
            println!("{} checks passed, worst relative error {worst:e}", recs.len());
        }
        Command::GenScene => {
            let s = gen_scene_cmd(&cfg, cfg.seed, &out)?;
            println!("scene {} with {} boxes and {} points in {}", s.seed, s.boxes.len(), s.num_points, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
