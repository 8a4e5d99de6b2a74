use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use medmap_core::commands::{
    cmd_eval, cmd_gap, cmd_gen_data, cmd_report, cmd_theory, cmd_train, exit_code, num_workers,
};
use medmap_core::config::RunConfig;
use medmap_core::{Error, Result};

/// Per-modality latent alignment experiments on synthetic multi-modal
/// segmentation data.
#[derive(Parser, Debug)]
#[command(name = "medmap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset on disk.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Dataset seed (`data_seed`).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        gap_strength: Option<f64>,
    },
    /// Train one run directory per seed.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: Training,
        /// Training seed; repeat for a sweep.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
    },
    /// Evaluate a checkpoint over every missing-modality scenario.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Modality gap and 2-D latent projection of a checkpoint.
    Gap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Discrete information and bound probes.
    Theory {
        #[command(flatten)]
        common: Common,
        /// Probe seed; repeat for several reports.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Comma-separated sigma grid.
        #[arg(long, value_delimiter = ',')]
        sigmas: Vec<f64>,
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Tables, MedMAP deltas, and plots over run directories.
    Report {
        /// Run directories written by `train`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Key-value or JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (`out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Existing dataset directory (`data_dir`).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Override any config key, e.g. `--set epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct Training {
    /// base, kd, sls, or da.
    #[arg(long)]
    regime: Option<String>,
    /// on or off.
    #[arg(long)]
    medmap: Option<String>,
    /// adaptive, fixed, or normal.
    #[arg(long)]
    anchor: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Scenario seen by the KD student / DA missing branch, e.g. `oxxo`.
    #[arg(long)]
    student_mask: Option<String>,
}

fn push<T: ToString>(overrides: &mut Vec<(String, String)>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        overrides.push((key.to_string(), v.to_string()));
    }
}

fn quoted(p: &std::path::Path) -> String {
    // JSON string so paths such as `on` or `123` stay paths
    format!("{:?}", p.display().to_string())
}

impl Common {
    fn load(&self, mut overrides: Vec<(String, String)>) -> Result<RunConfig> {
        let mut all = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            all.push((k.trim().to_string(), v.trim().to_string()));
        }
        push(&mut all, "out_dir", self.out.as_deref().map(quoted));
        push(&mut all, "data_dir", self.data_dir.as_deref().map(quoted));
        all.append(&mut overrides);
        RunConfig::load(self.config.as_deref(), &all)
    }

    fn out_dir(&self, cfg: &RunConfig) -> Result<PathBuf> {
        Ok(cfg.require_out_dir()?.to_path_buf())
    }
}

fn seeds_override(seeds: &[u64]) -> Option<String> {
    (!seeds.is_empty()).then(|| format!("{seeds:?}"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            common,
            seed,
            n_samples,
            gap_strength,
        } => {
            let mut o = Vec::new();
            push(&mut o, "data_seed", seed);
            push(&mut o, "n_samples", n_samples);
            push(&mut o, "gap_strength", gap_strength);
            let cfg = common.load(o)?;
            let out = common.out_dir(&cfg)?;
            let manifest = cmd_gen_data(&cfg, &out)?;
            println!("wrote {} samples to {}", manifest.sample_ids.len(), out.display());
        }
        Command::Train {
            common,
            training,
            seeds,
        } => {
            let mut o = Vec::new();
            push(&mut o, "regime", training.regime);
            push(&mut o, "medmap", training.medmap);
            push(&mut o, "anchor", training.anchor);
            push(&mut o, "alpha", training.alpha);
            push(&mut o, "epochs", training.epochs);
            push(&mut o, "student_mask", training.student_mask);
            push(&mut o, "seeds", seeds_override(&seeds));
            let cfg = common.load(o)?;
            for run in cmd_train(&cfg, num_workers()?)? {
                println!(
                    "{}: grand-average Dice {:.2}, final gap {:.4}{}",
                    run.dir.display(),
                    run.metrics.dice.grand_average,
                    run.metrics.final_gap_kl.unwrap_or(f64::NAN),
                    run.metrics.diverged.as_deref().map(|d| format!(" (stopped: {d})")).unwrap_or_default()
                );
            }
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load(Vec::new())?;
            let out = cfg
                .out_dir
                .clone()
                .unwrap_or_else(|| checkpoint.parent().map(PathBuf::from).unwrap_or_default());
            let table = cmd_eval(&cfg, &checkpoint, &out)?;
            println!("grand-average Dice {:.2}; tables in {}", table.grand_average, out.display());
        }
        Command::Gap { common, checkpoint } => {
            let cfg = common.load(Vec::new())?;
            let out = cfg
                .out_dir
                .clone()
                .unwrap_or_else(|| checkpoint.parent().map(PathBuf::from).unwrap_or_default());
            let gap = cmd_gap(&cfg, &checkpoint, &out)?;
            println!(
                "mean off-diagonal KL {:.4}, mean distance {:.4}; written to {}",
                gap.gap.mean_off_diagonal_kl(),
                gap.gap.mean_off_diagonal_dist(),
                out.join("gap.json").display()
            );
        }
        Command::Theory {
            common,
            seeds,
            sigmas,
            instances,
        } => {
            let mut o = Vec::new();
            push(&mut o, "seeds", seeds_override(&seeds));
            push(&mut o, "sigmas", (!sigmas.is_empty()).then(|| format!("{sigmas:?}")));
            push(&mut o, "instances", instances);
            let cfg = common.load(o)?;
            let out = common.out_dir(&cfg)?;
            for (seed, report) in cfg.seeds.iter().zip(cmd_theory(&cfg, &out)?) {
                println!(
                    "seed {seed}: {} counterexamples ({} bound violations of {} instances)",
                    report.counterexample_count,
                    report.elbo_violations,
                    report.elbo_instances.len()
                );
            }
        }
        Command::Report { runs, out } => {
            let bundle = cmd_report(&runs, &out)?;
            println!("wrote {} files to {}", bundle.files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
