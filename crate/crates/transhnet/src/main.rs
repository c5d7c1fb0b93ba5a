use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use transhnet::config::RunConfig;
use transhnet::pipeline::{self, Scored, FINAL_CHECKPOINT};
use transhnet::{Error, Result};
use transhnet_core::gradcheck::TOLERANCE;

#[derive(Parser)]
#[command(name = "transhnet", version, about = "Hybrid Transformer/CNN polyp segmentation with cooperative view weighting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write checkpoints plus a training log.
    Train(Common),
    /// Score a checkpoint and write per-image metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to score [default: <out-dir>/final.ckpt]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Prediction to score: fused, or a view number 1-3.
        #[arg(long, default_value = "fused")]
        view: String,
    },
    /// Write one 8-bit mask per input image.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to use [default: <out-dir>/final.ckpt]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite (toy model unless --config).
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of seeds for the per-op checks.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Parameters probed in the end-to-end model check.
        #[arg(long, default_value_t = 60)]
        params: usize,
    },
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Replace GLFF with plain concatenation + 1×1 conv.
    #[arg(long)]
    no_glff: bool,
    /// Replace DFM with a 1×1 head on the quarter-scale fused map.
    #[arg(long)]
    no_dfm: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Directory with images/ and masks/ (synthetic data when omitted).
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl Common {
    fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => base,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            cfg.epochs = epochs;
        }
        if let Some(lambda) = self.lambda {
            cfg.lambda = lambda;
        }
        if let Some(size) = self.image_size {
            cfg.model.image_size = size;
        }
        if self.no_glff {
            cfg.model.glff = false;
        }
        if self.no_dfm {
            cfg.model.dfm = false;
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.clone();
        }
        if let Some(dir) = &self.data_dir {
            cfg.data_dir = Some(dir.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_view(v: &str) -> Result<Scored> {
    match v {
        "fused" => Ok(Scored::Fused),
        "1" | "2" | "3" => Ok(Scored::View(v.parse::<usize>().expect("digit") - 1)),
        _ => Err(Error::Config(format!("--view must be fused, 1, 2 or 3, got {v:?}"))),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve(RunConfig::default())?;
            let summary = pipeline::train(&cfg, |row| println!("{row}"))?;
            println!("trained {} epochs; final checkpoint {}", summary.epochs, summary.final_checkpoint.display());
            Ok(true)
        }
        Command::Eval { common, checkpoint, view } => {
            let cfg = common.resolve(RunConfig::default())?;
            let scored = parse_view(&view)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir.join(FINAL_CHECKPOINT));
            let (ids, report) = pipeline::evaluate(&cfg, &ckpt, scored)?;
            println!(
                "{} images: mDice {:.4} mIoU {:.4} MAE {:.4}",
                ids.len(),
                report.mean_dice(),
                report.mean_iou(),
                report.mean_mae()
            );
            Ok(true)
        }
        Command::Predict { common, checkpoint } => {
            let cfg = common.resolve(RunConfig::default())?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir.join(FINAL_CHECKPOINT));
            let written = pipeline::predict(&cfg, &ckpt)?;
            println!("wrote {} masks to {}", written.len(), cfg.out_dir.join(pipeline::PREDICTION_DIR).display());
            Ok(true)
        }
        Command::Gradcheck { common, seeds, params } => {
            let cfg = common.resolve(RunConfig::toy())?;
            if seeds == 0 || params == 0 {
                return Err(Error::Config("--seeds and --params must be at least 1".into()));
            }
            let seed_list: Vec<u64> = (0..seeds).map(|i| cfg.seed + i).collect();
            let summary = pipeline::run_gradcheck(&cfg.model, &seed_list, params)?;
            for (seed, e) in &summary.ops {
                let verdict = if e.report.passed(TOLERANCE) { "ok" } else { "FAIL" };
                println!("{verdict:4} seed {seed} {:<20} max rel err {:.2e}", e.name, e.report.max_rel_err);
            }
            let m = &summary.model;
            let verdict = if m.passed(TOLERANCE) { "ok" } else { "FAIL" };
            println!(
                "{verdict:4} model ({} params, {} non-smooth skipped) max rel err {:.2e}",
                m.checked, m.skipped, m.max_rel_err
            );
            Ok(summary.passed())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
