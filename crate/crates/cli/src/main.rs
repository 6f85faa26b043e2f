//! `longwave` — one binary covering the context-extension workflow:
//! scaling report → pack → train → extend → post-train → evaluate.
//!
//! Every subcommand writes a run manifest (resolved config, input/output
//! digests, seed, timestamps) next to its outputs, including on failure.
//! Exit codes: 2 invalid configuration or input, 3 file/format trouble,
//! 4 numerical abort during training.

mod commands;
mod manifest;

use std::path::Path;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use longwave::error::{Error, Result};

use commands::{
    cmd_eval_niah, cmd_eval_ppl, cmd_extend, cmd_pack, cmd_rope_report, cmd_train, EvalNiahArgs,
    EvalPplArgs, ExtendArgs, PackArgs, RopeReportArgs, TrainArgs,
};
use manifest::Run;

#[derive(Parser)]
#[command(
    name = "longwave",
    version,
    about = "Context-window extension toolkit for masked-diffusion language models",
    propagate_version = true
)]
struct Cli {
    /// Cap on worker threads (default: one per CPU). Results are identical
    /// for every thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    RopeReport(RopeReportArgs),
    Pack(PackArgs),
    Train(TrainArgs),
    Extend(ExtendArgs),
    EvalPpl(EvalPplArgs),
    EvalNiah(EvalNiahArgs),
}

/// Run `body` inside a manifest-tracked run; the manifest is written whether
/// the body succeeds or fails.
fn execute(
    command: &str,
    out_dir: &Path,
    body: impl FnOnce(&mut Run) -> Result<()>,
) -> Result<()> {
    let mut run = Run::new(command, out_dir)?;
    let result = body(&mut run);
    let finished = run.finish(result.as_ref().err().map(|e| e.to_string()));
    result.and(finished.map(drop))
}

fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::RopeReport(a) => execute("rope-report", &a.out_dir, |run| cmd_rope_report(a, run)),
        Command::Pack(a) => execute("pack", &a.out_dir, |run| cmd_pack(a, run)),
        Command::Train(a) => execute("train", &a.out_dir, |run| cmd_train(a, run)),
        Command::Extend(a) => execute("extend", &a.out_dir, |run| cmd_extend(a, run)),
        Command::EvalPpl(a) => execute("eval-ppl", &a.out_dir, |run| cmd_eval_ppl(a, run)),
        Command::EvalNiah(a) => execute("eval-niah", &a.out_dir, |run| cmd_eval_niah(a, run)),
    }
}

fn exit_class(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Input(_) => 2,
        Error::Io(_) | Error::Format(_) | Error::Json(_) => 3,
        Error::NonFinite { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // Ignore the error if a pool already exists (tests build their own).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_class(&e))
        }
    }
}
