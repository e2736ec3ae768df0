use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use davlab::config::{presets, ExperimentConfig};
use davlab::oracle::OracleOptions;
use davlab::par::exec_for_threads;
use davlab::runner::{self, RunOptions};

/// Reward alignment of small diffusion models by variational EM.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: tiny, tabular or mixture.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (defaults to the config's, then runs/<name>).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, env = "DAV_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the discrete denoiser.
    Pretrain(Common),
    /// Run the alignment loop.
    Align {
        #[command(flatten)]
        common: Common,
        /// Continue from a run checkpoint.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Amortized and posterior-search metrics of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; the pretrained policy when omitted.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        /// Samples per mode (defaults to the config's eval.samples).
        #[arg(long)]
        samples: Option<usize>,
        /// Evaluation replicate; 0 reuses the training loop's streams.
        #[arg(long, default_value_t = 0)]
        rep: u64,
    },
    /// Brute-force checks on an enumerable instance.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_000)]
        repeats: usize,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Run DAV, search-and-distill and reweight side by side.
    Ablate(Common),
    /// Print a built-in config as JSON.
    Preset { name: String },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match (&common.config, &common.preset) {
        (Some(path), _) => {
            ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))?
        }
        (None, Some(name)) => presets::by_name(name)?,
        (None, None) => bail!("pass --config PATH or --preset NAME"),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    cfg.out = Some(out.clone());
    cfg.validate().context("invalid config")?;
    Ok((cfg, out))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain(c) => {
            let (cfg, out) = load(&c)?;
            let exec = exec_for_threads(c.threads);
            let r = runner::run_pretrain(&cfg, Some(&out), exec)?;
            println!(
                "pretrained: loss {:.6} -> {:.6} over {} epochs ({}); wrote {}",
                r.initial_loss,
                r.final_loss,
                r.epochs,
                if r.exact { "exact expectation" } else { "sampled" },
                out.join("pretrained.ckpt").display()
            );
        }
        Command::Align { common, resume } => {
            let (cfg, out) = load(&common)?;
            let opts = RunOptions {
                out: Some(out.clone()),
                resume,
                stop_after: None,
                exec: exec_for_threads(common.threads),
            };
            let res = runner::align(&cfg, &opts)?;
            let last = &res.last().record;
            println!(
                "{} epochs: elbo {:.6} ({}), mean reward {:.4}; wrote {}",
                last.epoch,
                last.elbo,
                last.estimator,
                last.mean_reward,
                out.display()
            );
        }
        Command::Eval { common, resume, samples, rep } => {
            let (cfg, out) = load(&common)?;
            let n = samples.unwrap_or(cfg.eval.samples);
            let (a, p) = runner::eval(&cfg, resume.as_deref(), n, rep, Some(&out), exec_for_threads(common.threads))?;
            for s in [&a, &p] {
                println!(
                    "{:<9} n={} reward {:.4} ± {:.4} diversity {} coverage {}",
                    s.mode,
                    s.samples,
                    s.mean_reward,
                    s.reward_std,
                    s.diversity.map_or("-".into(), |d| format!("{d:.4}")),
                    s.mode_coverage.map_or("-".into(), |d| format!("{d:.2}")),
                );
            }
        }
        Command::Oracle { common, repeats, seeds } => {
            let (cfg, out) = load(&common)?;
            let opts = OracleOptions {
                repeats,
                seeds,
                seed: cfg.seed,
                ..OracleOptions::default()
            };
            let report = runner::run_oracle(&cfg, &opts, Some(&out), exec_for_threads(common.threads))?;
            println!("{report}");
            if !report.passed() {
                bail!("oracle checks failed");
            }
        }
        Command::Ablate(c) => {
            let (cfg, out) = load(&c)?;
            let results = runner::ablate(&cfg, Some(&out), exec_for_threads(c.threads))?;
            for (v, r) in &results {
                let rec = &r.last().record;
                println!("{:<20} elbo {:.6} reward {:.4}", v.name(), rec.elbo, rec.mean_reward);
            }
        }
        Command::Preset { name } => println!("{}", presets::by_name(&name)?.to_json()),
    }
    Ok(())
}
