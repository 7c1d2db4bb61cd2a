//! Command-line entry point for the pose-from-points pipeline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric
//! failure. All commands are deterministic for a fixed seed; computation
//! is single-threaded (the RESPEL_THREADS environment variable is
//! accepted for forward compatibility but only 1 is meaningful).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use respel::config::RunConfig;
use respel::io;
use respel::model::{infer, gradcheck_pipeline, Model};
use respel::params::ParamStore;
use respel::preprocess::depth_to_points;
use respel::segment::{export_colored, segment_points, PartMap};
use respel::synth::generate_dataset;
use respel::train::{evaluate, load_checkpoint, save_checkpoint, train, Sample};
use respel::voting::Variant;
use respel::RespelError;

#[derive(Parser)]
#[command(
    name = "respel",
    about = "Permutation-equivariant hand pose estimation from point clouds",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Optional key = value config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base RNG seed [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic articulated-hand dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Sample count [default: 100]
        #[arg(long)]
        count: Option<usize>,
        /// Points per sample [default: 2048]
        #[arg(long)]
        points: Option<usize>,
        /// Keep only the camera-facing half of each hand.
        #[arg(long)]
        culling: bool,
    },
    /// Train a model on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (sample_*.pts / sample_*.pose).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// detection | regression [default: regression]
        #[arg(long)]
        variant: Option<Variant>,
        /// Comma-separated block widths [default: 128,256,512]
        #[arg(long)]
        widths: Option<String>,
        /// Epoch count [default: 30]
        #[arg(long)]
        epochs: Option<usize>,
        /// Batch size [default: 32]
        #[arg(long)]
        batch_size: Option<usize>,
        /// Initial learning rate [default: 1e-3]
        #[arg(long)]
        lr: Option<f64>,
        /// Enable rotation/scale/translation augmentation.
        #[arg(long)]
        augment: bool,
        /// Validation fraction held out from the dataset [default: 0.1]
        #[arg(long)]
        val_frac: Option<f64>,
        /// Append the per-epoch log to a file instead of stdout.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Predict a pose (camera-frame mm) for one point cloud.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Point-cloud text file (header N, then x y z lines) or a binary
        /// depth file (config provides intrinsics).
        #[arg(long)]
        input: PathBuf,
        /// Point count fed to the network [default: 512]
        #[arg(long)]
        points: Option<usize>,
    },
    /// Segment a cloud into hand parts via the importance matrix.
    Segment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Colored-point output file (x y z r g b lines).
        #[arg(long)]
        out: PathBuf,
        /// Point count fed to the network [default: 512]
        #[arg(long)]
        points: Option<usize>,
        /// Background importance threshold [default: 0.1]
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Point count fed to the network [default: 512]
        #[arg(long)]
        points: Option<usize>,
        /// Comma-separated correct-frame thresholds in mm [default: 10,20,40,80]
        #[arg(long)]
        thresholds: Option<String>,
    },
    /// Finite-difference gradient verification on a tiny pipeline.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn load_run_config(common: &Common) -> Result<RunConfig, RespelError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Reads `sample_*.pts` / `.pose` pairs in name order.
fn load_dataset(dir: &Path) -> Result<Vec<Sample>, RespelError> {
    let mut stems: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| RespelError::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| {
            let name = entry.ok()?.file_name().into_string().ok()?;
            name.strip_suffix(".pts").map(str::to_string)
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(RespelError::Io(format!(
            "{}: no sample_*.pts files",
            dir.display()
        )));
    }
    stems
        .iter()
        .map(|stem| {
            Ok(Sample {
                cloud: io::read_points(&dir.join(format!("{stem}.pts")))?,
                pose: io::read_pose(&dir.join(format!("{stem}.pose")))?,
            })
        })
        .collect()
}

fn load_cloud(path: &Path, cfg: &RunConfig) -> Result<respel::preprocess::PointCloud, RespelError> {
    if path.extension().is_some_and(|e| e == "depth") {
        let img = io::read_depth(path)?;
        let depth: Vec<f64> = img.depth_mm.iter().map(|&d| d as f64).collect();
        let mask: Vec<bool> = img.depth_mm.iter().map(|&d| d > 0).collect();
        depth_to_points(&depth, img.height, img.width, &cfg.intrinsics()?, Some(&mask))
    } else {
        io::read_points(path)
    }
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, RespelError>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|e| RespelError::Config(format!("bad {what} '{v}': {e}")))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    val_frac: f64,
    log: Option<&Path>,
) -> Result<(), RespelError> {
    let dataset = load_dataset(data)?;
    if !(0.0..1.0).contains(&val_frac) {
        return Err(RespelError::Config(format!(
            "val_frac {val_frac} must lie in [0, 1)"
        )));
    }
    let val_len = (dataset.len() as f64 * val_frac).round() as usize;
    let (train_set, val_set) = dataset.split_at(dataset.len() - val_len);
    for s in &dataset {
        if s.pose.len() != cfg.pose_dims {
            return Err(RespelError::Config(format!(
                "dataset pose length {} does not match pose_dims {}",
                s.pose.len(),
                cfg.pose_dims
            )));
        }
    }

    let model_config = cfg.model_config()?;
    let train_config = cfg.train_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<f32>::new();
    let mut model = Model::init(&mut store, model_config, &mut rng);

    let mut sink: Box<dyn std::io::Write> = match log {
        Some(path) => Box::new(
            std::fs::File::create(path)
                .map_err(|e| RespelError::Io(format!("{}: {e}", path.display())))?,
        ),
        None => Box::new(std::io::stdout()),
    };
    train(&mut model, &mut store, train_set, val_set, &train_config, &mut sink)?;
    save_checkpoint(out, &model, &store, train_config.epochs as u64, cfg.seed)?;
    eprintln!("checkpoint written to {}", out.display());
    Ok(())
}

fn run() -> Result<(), RespelError> {
    if let Ok(threads) = std::env::var("RESPEL_THREADS") {
        let n: usize = threads
            .parse()
            .map_err(|e| RespelError::Config(format!("RESPEL_THREADS: {e}")))?;
        if n != 1 {
            eprintln!("note: computation is single-threaded; RESPEL_THREADS={n} ignored");
        }
    }
    let cli = Cli::parse();
    match cli.command {
        Command::Synth {
            common,
            out,
            count,
            points,
            culling,
        } => {
            let mut cfg = load_run_config(&common)?;
            if culling {
                cfg.half_space_culling = true;
            }
            let count = count.unwrap_or(cfg.synth_count);
            let points = points.unwrap_or(cfg.synth_points);
            generate_dataset(&out, &cfg.skeleton_spec(), count, points, cfg.seed)?;
            println!("wrote {count} samples ({points} points each) to {}", out.display());
            Ok(())
        }
        Command::Train {
            common,
            data,
            out,
            variant,
            widths,
            epochs,
            batch_size,
            lr,
            augment,
            val_frac,
            log,
        } => {
            let mut cfg = load_run_config(&common)?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(w) = widths {
                cfg.widths = parse_list(&w, "width")?;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.batch_size = b;
            }
            if let Some(l) = lr {
                cfg.lr = l;
            }
            if augment {
                cfg.augment = true;
            }
            let val_frac = val_frac.unwrap_or(cfg.val_frac);
            cmd_train(&cfg, &data, &out, val_frac, log.as_deref())
        }
        Command::Infer {
            common,
            checkpoint,
            input,
            points,
        } => {
            let cfg = load_run_config(&common)?;
            let loaded = load_checkpoint::<f32>(&checkpoint)?;
            let mut model = loaded.model;
            let cloud = load_cloud(&input, &cfg)?;
            let out = infer(&mut model, &loaded.store, &cloud, points.unwrap_or(512), cfg.seed)?;
            let line = out
                .pose
                .iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>()
                .join(" ");
            println!("{line}");
            Ok(())
        }
        Command::Segment {
            common,
            checkpoint,
            input,
            out,
            points,
            threshold,
        } => {
            let cfg = load_run_config(&common)?;
            let loaded = load_checkpoint::<f32>(&checkpoint)?;
            let mut model = loaded.model;
            if model.config.pose_dims != respel::synth::POSE_DIMS {
                return Err(RespelError::Config(format!(
                    "segmentation part map expects {} pose dims, checkpoint has {}",
                    respel::synth::POSE_DIMS,
                    model.config.pose_dims
                )));
            }
            let cloud = load_cloud(&input, &cfg)?;
            let result = infer(&mut model, &loaded.store, &cloud, points.unwrap_or(512), cfg.seed)?;
            let labels = segment_points(
                &result.importance,
                &PartMap::for_synthetic(),
                threshold.unwrap_or(cfg.seg_threshold),
            )?;
            export_colored(&out, &result.cloud, &labels)?;
            println!("wrote {} labeled points to {}", labels.len(), out.display());
            Ok(())
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            points,
            thresholds,
        } => {
            let cfg = load_run_config(&common)?;
            let loaded = load_checkpoint::<f32>(&checkpoint)?;
            let mut model = loaded.model;
            let dataset = load_dataset(&data)?;
            let thresholds = match thresholds {
                Some(t) => parse_list(&t, "threshold")?,
                None => vec![10.0, 20.0, 40.0, 80.0],
            };
            let metrics = evaluate(
                &mut model,
                &loaded.store,
                &dataset,
                points.unwrap_or(512),
                &thresholds,
                cfg.seed,
            )?;
            println!("mean_joint_error_mm\t{:.4}", metrics.mje_mm);
            for (t, frac) in metrics.proportions {
                println!("correct_frames@{t}mm\t{frac:.4}");
            }
            Ok(())
        }
        Command::Gradcheck { common } => {
            let cfg = load_run_config(&common)?;
            let mut ok = true;
            for variant in [Variant::Regression, Variant::Detection] {
                let report = gradcheck_pipeline(variant, cfg.seed);
                println!(
                    "{variant:?}: {} entries, max rel err {:.3e} at {} -> {}",
                    report.entries_checked,
                    report.max_rel_err,
                    report.worst_param,
                    if report.passed() { "pass" } else { "FAIL" }
                );
                ok &= report.passed();
            }
            if !ok {
                return Err(RespelError::Numeric(
                    "gradient check failed (see report above)".into(),
                ));
            }
            Ok(())
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
