//! `f2r`: command-line driver of the two-stage video denoising pipeline.

mod commands;
mod runlog;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use f2r_core::config::{keys_under, RunConfig};
use f2r_core::training::Stage;

use commands::Ctx;
use runlog::RunLogger;

#[derive(Parser)]
#[command(name = "f2r", version, about = "Two-stage self-supervised video denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override a configuration key, e.g. `--set training.iters=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Debug-level logging.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData(Common),
    /// Train (or tune) the frozen image denoiser prior.
    TrainPrior(Common),
    /// Train the blind temporal estimator.
    TrainStage1(Common),
    /// Train the non-blind spatial refiner through recorruption.
    TrainStage2(Common),
    /// Denoise clips with the trained refiner.
    Infer(Common),
    /// Score the prior, stage 1 and the full pipeline on validation clips.
    Eval(Common),
    /// Run an ablation suite.
    Ablate(Common),
    /// Blindness and frozen-component audits.
    Audit(Common),
}

const BASE: &[&str] = &["run_id", "output_root"];

/// Configuration keys read by each subcommand.
fn sections(name: &str) -> Vec<&'static str> {
    let extra: &[&str] = match name {
        "gen-data" => &["seed", "data", "noise"],
        "train-prior" => &["seed", "data", "noise", "priors"],
        "train-stage1" => &["data.dir", "priors", "model", "training"],
        "train-stage2" => &["data.dir", "priors", "model", "training"],
        "infer" => &["data.dir", "priors", "inference"],
        "eval" => &["data.dir", "priors", "training.seed", "training.stage1_ckpt", "inference"],
        "ablate" => &["data.dir", "priors", "model", "training", "inference", "ablate"],
        "audit" => &["data.dir", "priors", "model", "training", "inference.checkpoint", "evaluation"],
        _ => &[],
    };
    BASE.iter().chain(extra).copied().collect()
}

fn help_keys(name: &str) -> String {
    let keys = keys_under(&sections(name));
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Configuration keys read:\n");
    for (k, d) in keys {
        s.push_str(&format!("  {k:<width$}  {d}\n"));
    }
    s
}

fn command() -> clap::Command {
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for n in names {
        let help = help_keys(&n);
        cmd = cmd.mut_subcommand(n, |s| s.after_long_help(help.clone()).after_help(help));
    }
    cmd
}

fn run(name: &'static str, common: &Common, f: impl FnOnce(&Ctx) -> Result<()>) -> Result<()> {
    let log = RunLogger::install(name, common.verbose);
    let cfg = RunConfig::load(&common.config, &common.set)?;
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(run_dir.join("config")).with_context(|| format!("creating {}", run_dir.display()))?;
    log.attach(&run_dir.join("run.log.jsonl")).context("opening run.log.jsonl")?;
    let frozen = run_dir.join("config").join(format!("{name}.toml"));
    std::fs::write(&frozen, cfg.to_toml()).with_context(|| format!("writing {}", frozen.display()))?;
    log.event("start", serde_json::json!({ "config": common.config, "overrides": common.set }));
    let ctx = Ctx { cfg, run_dir, log };
    let out = f(&ctx);
    log.event("finish", serde_json::json!({ "ok": out.is_ok(), "error": out.as_ref().err().map(|e| format!("{e:#}")) }));
    out
}

/// 1 for configuration and missing-dependency errors, 2 for failures while
/// doing the work.
fn exit_code(e: &anyhow::Error) -> u8 {
    let validation = e.chain().any(|c| c.downcast_ref::<f2r_core::Error>().is_some_and(f2r_core::Error::is_validation));
    if validation {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            use clap::error::ErrorKind::*;
            return ExitCode::from(if matches!(e.kind(), DisplayHelp | DisplayVersion) { 0 } else { 1 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match &cli.command {
        Command::GenData(c) => run("gen-data", c, commands::gen_data),
        Command::TrainPrior(c) => run("train-prior", c, commands::train_prior),
        Command::TrainStage1(c) => run("train-stage1", c, |x| commands::train_stage(x, Stage::One)),
        Command::TrainStage2(c) => run("train-stage2", c, |x| commands::train_stage(x, Stage::Two)),
        Command::Infer(c) => run("infer", c, commands::infer),
        Command::Eval(c) => run("eval", c, commands::eval),
        Command::Ablate(c) => run("ablate", c, commands::ablate),
        Command::Audit(c) => run("audit", c, commands::audit),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
