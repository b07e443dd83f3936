//! `dream`: train, decode, benchmark and verify the speculative decoder.
//!
//! Every subcommand takes `--config <path>` and any number of
//! `--set key=value` overrides. Exit status is 0 on success, 1 on a
//! validation or usage error and 2 when an acceptance threshold is missed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dream_core::harness::{
    cmd_ablate, cmd_bench, cmd_calibrate, cmd_decode, cmd_profile_flops, cmd_train_draft, cmd_train_target,
    cmd_verify_lossless, HarnessError, RunConfig,
};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "dream", version, about = "Speculative decoding for a toy vision-language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set decode.mode=chain`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the target model on the synthetic task.
    TrainTarget(ConfigArgs),
    /// Record target responses and pick each sample's distillation layer.
    Calibrate(ConfigArgs),
    /// Train the draft model against the target.
    TrainDraft(ConfigArgs),
    /// Decode the test prompts and write a round-by-round transcript.
    Decode(ConfigArgs),
    /// Compare speculative decoding to the autoregressive baseline.
    Bench(ConfigArgs),
    /// Check that speculative sampling reproduces the target distribution.
    VerifyLossless(ConfigArgs),
    /// Count forward FLOPs with and without visual tokens.
    ProfileFlops(ConfigArgs),
    /// Retrain and score every ablation variant.
    Ablate(ConfigArgs),
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summaries serialize"));
}

fn run(command: Command) -> Result<(), HarnessError> {
    let load = |a: &ConfigArgs| RunConfig::load(a.config.as_deref(), &a.overrides);
    match command {
        Command::TrainTarget(a) => print_json(&cmd_train_target(&load(&a)?)?),
        Command::Calibrate(a) => print_json(&cmd_calibrate(&load(&a)?)?),
        Command::TrainDraft(a) => print_json(&cmd_train_draft(&load(&a)?)?),
        Command::Decode(a) => print_json(&cmd_decode(&load(&a)?)?),
        Command::Bench(a) => {
            for row in cmd_bench(&load(&a)?)? {
                println!("{}", serde_json::to_string(&row).expect("rows serialize"));
            }
        }
        Command::VerifyLossless(a) => {
            let report = cmd_verify_lossless(&load(&a)?)?;
            println!("enumeration tv (chain): {:.3e}", report.enumeration_tv);
            for (i, tv) in report.monte_carlo_tv.iter().enumerate() {
                println!("monte carlo tv (tree) position {i}: {tv:.4}");
            }
            println!(
                "greedy matches: chain {}/{}, tree {}/{}",
                report.greedy_chain_matches, report.greedy_prompts, report.greedy_tree_matches, report.greedy_prompts
            );
        }
        Command::ProfileFlops(a) => {
            for row in cmd_profile_flops(&load(&a)?)? {
                println!("{}", serde_json::to_string(&row).expect("rows serialize"));
            }
        }
        Command::Ablate(a) => {
            for row in cmd_ablate(&load(&a)?)? {
                println!("{}", serde_json::to_string(&row).expect("rows serialize"));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // help and version requests are not errors; usage errors count as validation failures
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
