//! `dkseg` command-line entry point.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dkseg::commands::{cmd_ablate, cmd_eval, cmd_predict, cmd_train, RunConfig};

#[derive(Parser)]
#[command(name = "dkseg", version, about = "Lesion-aware dynamic-kernel segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes best/final checkpoints and the epoch log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint; writes report.csv and report.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Probability map and contour overlay for one image.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Train and score the four ablation settings.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Flat TOML file with run settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset: a directory with images/ and masks/, or synth:N.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    no_dk: bool,
    #[arg(long)]
    no_esa: bool,
    #[arg(long)]
    no_lca: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data {
            run.data = d.clone();
        }
        if let Some(o) = &self.out {
            run.out = o.clone();
        }
        if let Some(s) = self.seed {
            run.seed = s;
        }
        if let Some(t) = self.threshold {
            run.threshold = t;
        }
        if let Some(e) = self.epochs {
            run.epochs = e;
        }
        run.use_dk &= !self.no_dk;
        run.use_esa &= !self.no_esa;
        run.use_lca &= !self.no_lca;
        run.validate().context("invalid configuration")?;
        Ok(run)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { common, resume } => {
            let run = common.resolve()?;
            let s = cmd_train(&run, resume.as_deref())?;
            for r in &s.log {
                let dice = r.val_dice.map(|d| format!("{d:.4}")).unwrap_or_else(|| "-".into());
                println!("epoch {:>4}  lr {:.4e}  loss {:.6}  {} dice {dice}", r.epoch, r.lr, r.loss, s.selection_split);
            }
            println!("best epoch {} ({} dice {:.4})", s.best_epoch, s.selection_split, s.best_dice);
            println!("checkpoints: {} {}", s.best_checkpoint.display(), s.final_checkpoint.display());
        }
        Command::Eval { common, checkpoint } => {
            let run = common.resolve()?;
            let e = cmd_eval(&run, &checkpoint)?;
            println!("{}", e.report.summary());
            println!("reports: {} {}", e.csv.display(), e.json.display());
        }
        Command::Predict { common, checkpoint, image } => {
            let run = common.resolve()?;
            let p = cmd_predict(&run, &checkpoint, &image)?;
            println!("probability map: {}", p.probability_png.display());
            println!("overlay ({} contour pixels): {}", p.contour_pixels, p.overlay_png.display());
        }
        Command::Ablate { common } => {
            let run = common.resolve()?;
            let report = cmd_ablate(&run)?;
            print!("{}", report.summary());
            println!("tables: {} {}", run.out.join("ablation.csv").display(), run.out.join("ablation.json").display());
        }
    }
    Ok(())
}
