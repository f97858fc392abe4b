//! `cfx`: train a forest, explain cases with counterfactuals and language-model
//! causes, run closed-loop experiments and report aggregate metrics.
//!
//! Exit status: 0 success, 2 usage or configuration error, 3 precondition
//! failure (such as a case already in the desired class), 4 language-model
//! or backend failure.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use cfx_core::evalloop::{EvalMode, GroupKey};
use cfx_core::llm::Mode;
use cfx_core::pipeline::Strategy;
use clap::{Args, Parser, Subcommand};

use crate::commands::{ExplainArgs, Session};
use crate::config::{NoveltySplit, RunConfig};
use crate::failure::CliResult;

#[derive(Parser)]
#[command(name = "cfx", version, about = "Counterfactual explanations with language-model causes and closed-loop evaluation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML key-value run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// live, record or replay.
    #[arg(long, global = true)]
    llm_mode: Option<Mode>,
    #[arg(long, global = true)]
    transcript: Option<PathBuf>,
    /// Parent directory of per-run output directories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    schema: Option<PathBuf>,
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Name of the run directory instead of `<timestamp>-seed<seed>`; must not exist.
    #[arg(long, global = true)]
    run_name: Option<String>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args, Default)]
struct PipelineFlags {
    /// Number of counterfactuals, 1..=20.
    #[arg(long)]
    k: Option<usize>,
    /// zero_shot, one_shot or tot.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// native or llm_table.
    #[arg(long)]
    eval_mode: Option<EvalMode>,
    #[arg(long, value_enum)]
    novelty_split: Option<NoveltySplit>,
    /// Drop rules with identical predicates when merging tot branches.
    #[arg(long)]
    dedupe_rules: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the forest on a seeded 80/20 split and report held-out accuracy.
    Train {
        /// Replace an existing model file.
        #[arg(long)]
        force: bool,
    },
    /// Explain one case: counterfactuals, causes, supports and explanation.
    Explain {
        /// Dataset row index of the case.
        #[arg(long)]
        case: Option<usize>,
        /// CSV with the original row first and its counterfactuals after it.
        #[arg(long)]
        counterfactuals: Option<PathBuf>,
        #[arg(long)]
        case_id: Option<String>,
        /// Also run the closed-loop evaluation.
        #[arg(long)]
        evaluate: bool,
        #[command(flatten)]
        flags: PipelineFlags,
    },
    /// Explain and evaluate the first n undesired-class cases of a seeded shuffle.
    Experiment {
        #[arg(long)]
        n_cases: usize,
        /// Worker threads; defaults to the CPU count.
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        flags: PipelineFlags,
    },
    /// Closed-loop evaluation of an explained case directory.
    Evaluate {
        case_dir: PathBuf,
        #[arg(long)]
        eval_mode: Option<EvalMode>,
        #[arg(long, value_enum)]
        novelty_split: Option<NoveltySplit>,
        /// Replace an existing evaluation.
        #[arg(long)]
        force: bool,
    },
    /// Aggregate a records file into the metrics table.
    Report {
        records: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "strategy,k")]
        group_by: Vec<GroupKey>,
    },
}

fn apply(cfg: &mut RunConfig, g: &Global, f: &PipelineFlags) {
    macro_rules! set {
        ($($field:ident <- $value:expr),* $(,)?) => {
            $(if let Some(v) = $value.clone() { cfg.$field = v.into(); })*
        };
    }
    set!(seed <- g.seed, llm_mode <- g.llm_mode, out <- g.out);
    set!(k <- f.k, strategy <- f.strategy, eval_mode <- f.eval_mode, novelty_split <- f.novelty_split);
    for (field, value) in [
        (&mut cfg.transcript, &g.transcript),
        (&mut cfg.dataset, &g.dataset),
        (&mut cfg.schema, &g.schema),
        (&mut cfg.model, &g.model),
    ] {
        if value.is_some() {
            field.clone_from(value);
        }
    }
    cfg.dedupe_rules |= f.dedupe_rules;
}

fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let empty = PipelineFlags::default();
    let flags = match &cli.command {
        Command::Explain { flags, .. } | Command::Experiment { flags, .. } => flags,
        _ => &empty,
    };
    apply(&mut cfg, g, flags);
    if let Command::Evaluate { eval_mode, novelty_split, .. } = &cli.command {
        cfg.eval_mode = eval_mode.unwrap_or(cfg.eval_mode);
        cfg.novelty_split = novelty_split.unwrap_or(cfg.novelty_split);
    }
    let needs_llm = matches!(cli.command, Command::Explain { .. } | Command::Experiment { .. } | Command::Evaluate { .. });
    if needs_llm {
        cfg.validate()?;
    }
    let session = Session { cfg, run_name: g.run_name.clone() };
    match cli.command {
        Command::Train { force } => commands::train(&session, force),
        Command::Explain { case, counterfactuals, case_id, evaluate, .. } => {
            commands::explain(&session, ExplainArgs { case, counterfactuals, case_id, evaluate })
        }
        Command::Experiment { n_cases, jobs, .. } => commands::experiment(&session, n_cases, jobs),
        Command::Evaluate { case_dir, force, .. } => commands::evaluate(&session, &case_dir, force),
        Command::Report { records, group_by } => commands::report(&session, &records, &group_by),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}
