use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pgt::pipeline::config::PipelineConfig;
use pgt::pipeline::Pipeline;
use pgt::PgtError;

#[derive(Parser)]
#[command(name = "pgt", version, about = "Synthetic-data training pipeline for small retrieval-augmented QA models")]
struct Cli {
    /// TOML config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `sft.lr=0.002`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Work directory (overrides global.work_dir).
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Global seed (overrides global.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the three-tier index from the corpus directory.
    Ingest,
    /// Pretrain the retriever with the inverse cloze task.
    Ict,
    /// Teacher-written seed tuples.
    Seed(IterArg),
    /// Bootstrapped candidate tuples.
    Bootstrap(IterArg),
    /// Consistency-filter the candidates.
    Filter(IterArg),
    /// Non-matching partners, data splits and the mixed training set.
    Nonmatch(IterArg),
    /// Joint retriever and generator fine-tuning.
    Sft(IterArg),
    /// Train the reward model on synthetic orderings.
    Reward(IterArg),
    /// PPO alignment against the reward model.
    Align(IterArg),
    /// Fine-tune the generator's correct/wrong judgement.
    Calibrate(IterArg),
    /// Metrics on the held-out split.
    Eval(IterArg),
    /// Answer one question with the latest trained model.
    Answer {
        #[arg(long)]
        question: String,
        #[arg(long)]
        iter: Option<usize>,
    },
    /// Every phase in order, looping phases two to four.
    RunAll,
}

#[derive(clap::Args)]
struct IterArg {
    /// Outer iteration (1-based).
    #[arg(long, default_value_t = 1)]
    iter: usize,
}

fn exit_code(e: &PgtError) -> u8 {
    match e {
        PgtError::Config(_) => 2,
        PgtError::Prerequisite { .. } | PgtError::Auth(_) => 3,
        _ => 4,
    }
}

fn load(cli: &Cli) -> pgt::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p, &cli.set)?,
        None => PipelineConfig::from_toml("", &cli.set)?,
    };
    if let Some(w) = &cli.workdir {
        cfg.global.work_dir = w.clone();
    }
    if let Some(s) = cli.seed {
        cfg.global.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> pgt::Result<()> {
    let cfg = load(&cli)?;
    let mut p = Pipeline::open(cfg)?;
    let (phase, k) = match &cli.command {
        Command::Ingest => ("ingest", 0),
        Command::Ict => ("ict", 0),
        Command::Seed(a) => ("seed", a.iter),
        Command::Bootstrap(a) => ("bootstrap", a.iter),
        Command::Filter(a) => ("filter", a.iter),
        Command::Nonmatch(a) => ("nonmatch", a.iter),
        Command::Sft(a) => ("sft", a.iter),
        Command::Reward(a) => ("reward", a.iter),
        Command::Align(a) => ("align", a.iter),
        Command::Calibrate(a) => ("calibrate", a.iter),
        Command::Eval(a) => ("eval", a.iter),
        Command::Answer { question, iter } => {
            let out = p.answer(question, *iter)?;
            println!("{}", serde_json::to_string_pretty(&out)?);
            return Ok(());
        }
        Command::RunAll => {
            p.run_all()?;
            for r in &p.manifest().phases {
                println!("{}", serde_json::to_string(&serde_json::json!({ "phase": r.phase, "iteration": r.iteration, "metrics": r.metrics }))?);
            }
            return Ok(());
        }
    };
    p.run_phase(phase, k)?;
    if let Some(r) = p.manifest().phases.iter().find(|r| r.phase == phase && r.iteration == k) {
        println!("{}", serde_json::to_string(&serde_json::json!({ "phase": r.phase, "iteration": r.iteration, "metrics": r.metrics }))?);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
