use std::path::PathBuf;
use std::process::ExitCode;

use advda_core::evaluation::{ScoreSet, TrialList};
use advda_core::pipeline::{evaluate_scores, format_table, report_json, ExperimentConfig, Pipeline, System};
use advda_core::trainer::{Mode, Scope};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

/// Adversarial domain adaptation experiments on synthetic speaker data.
#[derive(Debug, Parser)]
#[command(name = "advda", version)]
struct Cli {
    /// Experiment config (JSON). Defaults to the reference experiment.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Adaptation mode: sup, adv, adv+sup or adv+lan+sup. Selects the
    /// adapted system for per-system verbs; omitted means the baseline.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Adapted layers: all or post-pool.
    #[arg(long, global = true)]
    scope: Option<Scope>,
    /// Between-class share of the excess adaptation variance.
    #[arg(long, global = true)]
    xi: Option<f64>,
    /// Within-class share of the excess adaptation variance.
    #[arg(long, global = true)]
    eta: Option<f64>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate corpus archives, manifests and evaluation trials.
    Synth,
    /// Train the baseline extractor on the source partition.
    TrainBase,
    /// Adapt the baseline extractor (requires --mode).
    Adapt,
    /// Extract embeddings for every partition.
    Extract,
    /// Train LDA + PLDA on source embeddings.
    Backend,
    /// Adapt the PLDA model to target embeddings.
    BackendAdapt,
    /// Score the evaluation trials.
    Score,
    /// Compute EER and minDCF. With --scores, evaluates that file directly.
    Eval {
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        trials: Option<PathBuf>,
    },
    /// Collect per-system reports into a comparison table.
    Report,
    /// Run every stage for the baseline and each configured system.
    Run,
    /// Print the resolved config as JSON.
    Config,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::read(path).with_context(|| format!("reading {}", path.display()))?,
        None => ExperimentConfig::reference(cli.seed.unwrap_or(1)),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    if let Some(xi) = cli.xi {
        cfg.backend.xi = xi;
    }
    if let Some(eta) = cli.eta {
        cfg.backend.eta = eta;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn system(cli: &Cli) -> Result<System> {
    match (cli.mode, cli.scope) {
        (Some(mode), scope) => Ok(System::adapted(mode, scope.unwrap_or(Scope::All))),
        (None, None) => Ok(System::Baseline),
        (None, Some(_)) => bail!("--scope requires --mode"),
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    if let Command::Eval {
        scores: Some(scores),
        trials,
    } = &cli.command
    {
        let trials = trials
            .clone()
            .or_else(|| cfg.paths.trials.clone())
            .context("--trials is required with --scores")?;
        let report = evaluate_scores(&ScoreSet::read(scores)?, &TrialList::read(&trials)?, cfg.priors)?;
        print!("{}", report_json(&report));
        return Ok(());
    }
    let p = Pipeline::new(cfg)?;
    match &cli.command {
        Command::Synth => p.synth()?,
        Command::TrainBase => p.train_base()?,
        Command::Adapt => match system(cli)? {
            System::Adapted { mode, scope } => p.adapt(mode, scope)?,
            System::Baseline => bail!("adapt requires --mode"),
        },
        Command::Extract => p.extract(system(cli)?)?,
        Command::Backend => p.backend(system(cli)?)?,
        Command::BackendAdapt => p.backend_adapt(system(cli)?, p.config.backend.adapt_params())?,
        Command::Score => p.score(system(cli)?)?,
        Command::Eval { trials, .. } => {
            if trials.is_some() {
                bail!("--trials without --scores; set paths.trials in the config instead");
            }
            let s = system(cli)?;
            p.eval(s)?;
            print!("{}", std::fs::read_to_string(p.report_path(s, false))?);
        }
        Command::Report => print!("{}", format_table(&p.report()?)),
        Command::Run => print!("{}", format_table(&p.run()?)),
        Command::Config => println!("{}", p.config.to_json()),
    }
    Ok(())
}

fn main() -> ExitCode {
    #[cfg(target_env = "gnu")]
    // SAFETY: called before any other thread exists.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
