//! `conngen`: synthetic corpora, training runs, evaluation and gradient checks.

mod eval;
mod manifest;
mod synth;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use conngen::gradcheck::{run_joint_gradcheck, JointGradCheckConfig};
use conngen::numerics::Precision;

/// Directory under which run directories are created when `--out` is absent.
pub const RUNS_DIR_ENV: &str = "CONNGEN_RUNS_DIR";

#[derive(Parser)]
#[command(
    name = "conngen",
    version,
    about = "Connective generation for implicit discourse relation classification",
    args_override_self = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a known Bayes-optimal accuracy.
    GenSynth(synth::GenSynthArgs),
    /// Train one regime and save its best-dev checkpoint.
    Train(train::TrainArgs),
    /// Score a trained run on a test set.
    Eval(eval::EvalArgs),
    /// Compare evaluation modes and connective-correctness groups.
    Analyze(eval::AnalyzeArgs),
    /// Check analytic gradients of the joint loss on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "f64", value_parser = parse_precision)]
    precision: Precision,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "f64" => Ok(Precision::F64),
        "f32" => Ok(Precision::F32),
        _ => Err(format!("expected f64 or f32, got {s:?}")),
    }
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let cfg = JointGradCheckConfig {
        precision: args.precision,
        layers: args.layers,
        hidden: args.hidden,
        seed: args.seed,
        ..JointGradCheckConfig::default()
    };
    let rep = run_joint_gradcheck(&cfg)?;
    for b in &rep.branches {
        println!(
            "{:?} branch: max relative error {:.3e} ({} in {}[{}]), {} coordinates",
            b.branch,
            b.report.max_rel_error,
            if b.report.non_differentiable {
                "non-differentiable"
            } else {
                "worst"
            },
            b.report.worst_param,
            b.report.worst_index,
            b.report.coordinates_checked
        );
    }
    let verdict = if rep.passed { "PASS" } else { "FAIL" };
    println!(
        "{verdict}: max relative error {:.3e} (threshold {:.0e}) over {} parameters in {:.1}s",
        rep.max_rel_error, rep.threshold, rep.parameters, rep.seconds
    );
    if !rep.passed {
        return Err(conngen::Error::Numeric(format!(
            "gradient check failed: {:.3e} >= {:.0e}",
            rep.max_rel_error, rep.threshold
        ))
        .into());
    }
    Ok(())
}

/// 0 success, 1 usage, 2 data, 3 numeric abort.
fn exit_code(err: &anyhow::Error) -> u8 {
    use conngen::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Usage(_) | E::Config(_) => 1,
                E::Numeric(_) | E::Dimension { .. } => 3,
                E::Data(_) | E::Schema(_) | E::Io(_) | E::Json(_) | E::Internal(_) => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenSynth(a) => synth::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run_eval(a),
        Command::Analyze(a) => eval::run_analyze(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Fails with a usage error when an input path does not exist.
pub fn require_path(path: &std::path::Path, what: &str) -> Result<PathBuf> {
    if !path.exists() {
        return Err(conngen::Error::Usage(format!("{what} {} does not exist", path.display())).into());
    }
    Ok(path.to_path_buf())
}
