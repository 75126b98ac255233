//! `genrobust` command-line entry point.
//!
//! Exit codes: 0 on success, 1 for usage or configuration problems, 2 when a
//! command fails at run time.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use genrobust::config::{ExperimentConfig, Precision};
use genrobust::{Error, PerturbationSet};

#[derive(Parser, Debug)]
#[command(
    name = "genrobust",
    version,
    about = "Adversarial training with generated data at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw train, test and holdout splits from the synthetic distribution.
    MakeData(Common),
    /// Train the cross-entropy labeler on the training split.
    TrainNonrobust(Common),
    /// Fit the PCA plus per-class Gaussian generator to the training split.
    FitGaussian(Common),
    /// Sample a balanced pool from the fitted generator.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Pool size (overrides `generation.pool_size`).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Label a sample set with the labeler.
    PseudoLabel {
        #[command(flatten)]
        common: Common,
        /// Sample container to label (default: `<out>/generated.grtc`).
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Adversarially train on original data mixed with pseudo-labelled data.
    Train {
        #[command(flatten)]
        common: Common,
        /// Pseudo-labelled set (default: `<out>/pseudo.grtc`).
        #[arg(long)]
        pseudo: Option<PathBuf>,
    },
    /// Run the attack cascade against a checkpoint on the test split.
    AttackEval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (default: `<out>/model.grtc`).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Complementarity, coverage, FID, IS and a loss landscape.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Checkpoint scanned by the landscape (default: `<out>/model.grtc`, else the labeler).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run the configured sweep; completed cells are reused.
    Sweep(Common),
}

/// Config file plus flag overrides, shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// L∞ budget for training and evaluation.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    /// Any config field as `dotted.path=json`, e.g. `--set train.ema_tau=0.99`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Common {
    fn resolve(&self) -> genrobust::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if !self.sets.is_empty() {
            cfg = apply_sets(&cfg, &self.sets)?;
        }
        if let Some(dir) = &self.out {
            cfg.output_dir = dir.clone();
        }
        if let Some(a) = self.alpha {
            cfg.train.alpha = a;
        }
        if let Some(b) = self.beta {
            cfg.train.beta = b;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr0 = lr;
        }
        if let Some(eps) = self.epsilon {
            cfg.set_perturbation(PerturbationSet::linf(eps));
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(p) = &self.precision {
            cfg.precision = if p == "f64" { Precision::F64 } else { Precision::F32 };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Rewrites fields through the JSON form so strict parsing still applies.
fn apply_sets(cfg: &ExperimentConfig, sets: &[String]) -> genrobust::Result<ExperimentConfig> {
    let mut doc = serde_json::to_value(cfg)?;
    for item in sets {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{item}`")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut node = &mut doc;
        for part in key.split('.') {
            node = node
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *node = value;
    }
    serde_json::from_value(doc).map_err(|e| Error::Config(format!("--set: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let common = match &cli.command {
        Command::MakeData(c) | Command::TrainNonrobust(c) | Command::FitGaussian(c) | Command::Sweep(c) => c,
        Command::Generate { common, .. }
        | Command::PseudoLabel { common, .. }
        | Command::Train { common, .. }
        | Command::AttackEval { common, .. }
        | Command::Diagnose { common, .. } => common,
    };
    let cfg = match common.resolve() {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let outcome = match cfg.precision {
        Precision::F32 => commands::run::<f32>(&cli.command, &cfg),
        Precision::F64 => commands::run::<f64>(&cli.command, &cfg),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
