use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use conceptlm::conceptset::SupervisionProportion;
use conceptlm::corpus::Profile;
use conceptlm_cli::config::{Mode, PipelineConfig};
use conceptlm_cli::manifest::GridPoint;
use conceptlm_cli::pipeline::{resolve_run_root, SweepSummary, RUN_ROOT_ENV};
use conceptlm_cli::{report, Workspace};

#[derive(Parser)]
#[command(
    name = "conceptlm",
    version,
    about = "Concept-level LM training and evaluation"
)]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true, default_value = "conceptlm.toml")]
    config: PathBuf,
    /// Overrides the master seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run root; falls back to $CONCEPTLM_RUN_ROOT, then the config, then ./runs.
    #[arg(long, global = true)]
    run_root: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the vocabulary, similarity benchmark and corpus splits.
    GenCorpus,
    /// Pretrain base models and annotate concept sets.
    BuildConcepts {
        /// Limit to one profile (default: every configured profile).
        #[arg(long)]
        profile: Option<Profile>,
        /// Limit to one model size.
        #[arg(long)]
        size: Option<String>,
    },
    /// Train one grid point.
    Train(TrainArgs),
    /// Everything needed for the configured grid, skipping finished runs.
    Sweep,
    /// Evaluate base models and finished runs.
    Eval {
        /// Run id, or "all".
        #[arg(default_value = "all")]
        target: String,
    },
    /// Write the long-format report CSV.
    Report,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    lambda: f64,
    #[arg(long, default_value = "concepts")]
    mode: Mode,
    #[arg(long, default_value = "all")]
    proportion: SupervisionProportion,
    #[arg(long, default_value = "A")]
    profile: Profile,
    #[arg(long, default_value = "desk")]
    size: String,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    mass_threshold: Option<f64>,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        let t = &mut cfg.train;
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.max_epochs {
            t.max_epochs = v;
        }
        if let Some(v) = self.patience {
            t.early_stop_patience = v;
        }
        if let Some(v) = self.mass_threshold {
            t.objective.mass_threshold = v;
        }
    }
}

fn report_runs(what: &str, s: &SweepSummary) -> anyhow::Result<()> {
    eprintln!(
        "{what}: {} runs, {} trained, {} already done, {} failed",
        s.total,
        s.trained,
        s.skipped_done,
        s.failed.len()
    );
    for (id, msg) in &s.failed {
        eprintln!("  failed {id}: {msg}");
    }
    if s.total > 0 && s.failed.len() == s.total {
        bail!("every run failed");
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .context("configuring worker threads")?;
    }
    let mut cfg = PipelineConfig::load(&cli.config)
        .with_context(|| format!("loading {}", cli.config.display()))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Command::Train(args) = &cli.command {
        args.apply(&mut cfg);
    }
    let root = resolve_run_root(cli.run_root.as_deref(), &cfg);
    log::info!(
        "run root {} (override with --run-root or {RUN_ROOT_ENV})",
        root.display()
    );
    let ws = Workspace::open(&root, cfg)?;

    match cli.command {
        Command::GenCorpus => {
            for p in ws.gen_corpus()? {
                println!("{}", p.display());
            }
        }
        Command::BuildConcepts { profile, size } => {
            ws.gen_corpus()?;
            let profiles = profile
                .map(|p| vec![p])
                .unwrap_or_else(|| ws.cfg.sweep.profiles.clone());
            let sizes = size
                .map(|s| vec![s])
                .unwrap_or_else(|| ws.cfg.sweep.model_sizes.clone());
            for p in &profiles {
                for s in &sizes {
                    ws.build_concepts(*p, s)?;
                    println!("{}", ws.concepts_path(*p, s).display());
                }
            }
        }
        Command::Train(args) => {
            if !(0.0..=1.0).contains(&args.lambda) {
                bail!("--lambda must be in [0, 1]");
            }
            ws.gen_corpus()?;
            ws.build_concepts(args.profile, &args.size)?;
            let point = GridPoint {
                lambda: args.lambda,
                mode: args.mode,
                proportion: args.proportion,
                profile: args.profile,
                model_size: args.size.clone(),
            };
            let ids = ws.register(&[point])?;
            report_runs("train", &ws.run_all(&ids)?)?;
            println!("{}", ws.run_dir(&ids[0]).display());
        }
        Command::Sweep => report_runs("sweep", &ws.sweep()?)?,
        Command::Eval { target } => {
            let target = (target != "all").then_some(target);
            let s = ws.eval(target.as_deref())?;
            eprintln!(
                "eval: {} evaluated, {} already evaluated, {} skipped, {} failed",
                s.evaluated,
                s.already_done,
                s.skipped.len(),
                s.failed.len()
            );
            for (id, status) in &s.skipped {
                eprintln!("  skipped {id}: status {status}");
            }
            for (id, msg) in &s.failed {
                eprintln!("  failed {id}: {msg}");
            }
            if !s.failed.is_empty() && s.evaluated + s.already_done == 0 {
                bail!("every evaluation failed");
            }
        }
        Command::Report => {
            let s = report::write_report(&ws)?;
            if !s.unevaluated.is_empty() {
                eprintln!("not yet evaluated: {}", s.unevaluated.join(", "));
            }
            eprintln!("{} rows", s.rows);
            println!("{}", s.path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
