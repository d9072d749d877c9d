mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use crate::commands::Ctx;
use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "epiflow", version, about = "Safe offline RL with epigraph values and flow-matching policies")]
struct Cli {
    /// TOML run configuration. Without it every setting takes its default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts (overrides `out` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "EPIFLOW_THREADS")]
    threads: Option<usize>,
    /// Run single-threaded and record it in the manifests.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the offline dataset.
    GenData,
    /// Train the epigraph value bundle.
    TrainValues,
    /// Train the flow-matching policy from a trained bundle.
    TrainPolicy,
    /// Roll out the trained policy.
    Eval,
    /// Ablation sweeps.
    Ablate {
        #[command(subcommand)]
        which: Ablation,
    },
    /// Compare brute force and epigraph recovery on a tabular MDP.
    Oracle {
        /// MDP description in TOML; the bundled 12-state chain if omitted.
        mdp: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum Ablation {
    /// Retrain and evaluate for each expectile level in `ablate.tau_grid`.
    Tau,
    /// Retrain and evaluate for each regularizer weight in `ablate.lambda_grid`.
    Lambda,
    /// Inference time and returns against the number of action candidates.
    N,
    /// Evaluate under Gaussian action noise at each `eval.perturbation_levels` entry.
    Perturb,
    /// How much V̂ changes across budgets on a state mesh.
    Zsens {
        /// A second value checkpoint to report next to the trained one.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("cannot configure the thread pool")?;
    }
    if let Command::Oracle { mdp } = &cli.command {
        return commands::oracle(mdp.as_deref());
    }

    let (mut cfg, sections) = match &cli.config {
        Some(p) => {
            let (c, s) = RunConfig::load(p)?;
            (c, Some(s))
        }
        None => (RunConfig::default(), None),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out = out.display().to_string();
    }
    cfg.validate()?;
    let out = PathBuf::from(&cfg.out);
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create output directory {}", out.display()))?;
    let ctx = Ctx {
        cfg,
        out,
        deterministic: cli.deterministic,
        sections,
    };
    match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::TrainValues => commands::train_values(&ctx),
        Command::TrainPolicy => commands::train_policy_cmd(&ctx),
        Command::Eval => commands::eval_cmd(&ctx),
        Command::Ablate { which } => match which {
            Ablation::Tau => commands::ablate_tau(&ctx),
            Ablation::Lambda => commands::ablate_lambda(&ctx),
            Ablation::N => commands::ablate_n(&ctx),
            Ablation::Perturb => commands::ablate_perturb(&ctx),
            Ablation::Zsens { compare } => commands::ablate_zsens(&ctx, compare.as_deref()),
        },
        Command::Oracle { .. } => unreachable!("handled above"),
    }
}
