use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jers_cli::commands::{cmd_ablate, cmd_eval, cmd_phantom, cmd_sweep, cmd_train};
use jers_cli::{thread_cap, Result, RunConfig};
use jers_core::dataset::Split;
use jers_core::pipeline::Variant;

#[derive(Parser)]
#[command(
    name = "jers",
    version,
    about = "Joint extraction, registration and segmentation on synthetic head phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test phantoms and the atlas
    Phantom(Common),
    /// Train a model and keep the best validation checkpoint
    Train(Common),
    /// Evaluate a checkpoint on a split
    Eval(Common),
    /// Train and evaluate over a stage-count or lambda grid
    Sweep(Common),
    /// Train and evaluate each ablation variant
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; unspecified fields take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the dataset master seed and the training seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Allow writing into a non-empty output directory
    #[arg(long)]
    force: bool,
    /// full, no_ext, no_reg, no_seg, single_stage or no_smooth
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// train, val or test
    #[arg(long)]
    split: Option<String>,
    /// Dataset directory written by `jers phantom`
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.master_seed = s;
            cfg.training.seed = s;
        }
        if let Some(v) = &self.variant {
            let v: Variant = v.parse()?;
            cfg.variant = v;
            cfg.ablate = vec![v];
        }
        if let Some(c) = &self.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        if let Some(s) = &self.split {
            cfg.split = s.parse::<Split>()?;
        }
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    thread_cap(std::env::var("JERS_THREADS").ok().as_deref())?;
    match cli.command {
        Command::Phantom(a) => {
            let man = cmd_phantom(&a.resolve()?, &a.out, a.force)?;
            println!(
                "wrote {} subjects and the atlas to {}",
                man.subjects.len(),
                a.out.display()
            );
        }
        Command::Train(a) => {
            let t = cmd_train(&a.resolve()?, &a.out, a.force)?;
            match &t.manifest.best {
                Some(b) => println!(
                    "trained {} steps; best val at step {}: dice_ext {:.4} mi {:.4} dice_seg {:.4}",
                    t.manifest.steps, b.step, b.dice_ext, b.mi_reg, b.selection
                ),
                None => println!("trained {} steps", t.manifest.steps),
            }
        }
        Command::Eval(a) => {
            let e = cmd_eval(&a.resolve()?, &a.out, a.force)?;
            let s = e.summary();
            println!(
                "{} cases: dice_ext {:.4} mi {:.4} dice_seg {:.4}",
                s.cases, s.dice_ext, s.mi_reg, s.dice_seg
            );
        }
        Command::Sweep(a) => {
            for r in cmd_sweep(&a.resolve()?, &a.out, a.force)? {
                println!(
                    "{}={}: dice_ext {:.4} mi {:.4} dice_seg {:.4}",
                    r.axis, r.value, r.summary.dice_ext, r.summary.mi_reg, r.summary.dice_seg
                );
            }
        }
        Command::Ablate(a) => {
            for r in cmd_ablate(&a.resolve()?, &a.out, a.force)? {
                println!(
                    "{}: dice_ext {:.4} mi {:.4} dice_seg {:.4}",
                    r.value, r.summary.dice_ext, r.summary.mi_reg, r.summary.dice_seg
                );
            }
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
