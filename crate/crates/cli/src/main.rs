use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use hinge_core::config::RunConfig;
use hinge_core::net::{evaluate, Network};
use hinge_core::pipeline;
use hinge_core::regularizers::shrink_factors;
use hinge_core::tensor::Checkpoint;
use hinge_core::verify::{equiv_suite, grad_suite, prox_suite, threshold_suite, SuiteReport};
use hinge_core::HingeError;

const EXIT_VERIFY: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;

#[derive(Parser)]
#[command(name = "hinge", version, about = "Compress small CNNs with group-sparsity hinges")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline network.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sparsify, search the threshold for the target ratio and compact.
    Compress {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        /// Overrides compress.target_ratio from the config.
        #[arg(long)]
        target_ratio: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Finetune a compacted network, optionally distilling from a teacher.
    Finetune {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, requires = "teacher")]
        distill: bool,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Print test accuracy and loss of a checkpoint.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Run the self-check suites; all of them when no flag is given.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    prox: bool,
    #[arg(long)]
    grad: bool,
    #[arg(long)]
    equiv: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
enum Failure {
    Error(HingeError),
    Infeasible(String),
    Verify,
}

impl From<HingeError> for Failure {
    fn from(e: HingeError) -> Self {
        Failure::Error(e)
    }
}

type CmdResult = Result<(), Failure>;

fn exit_code(e: &HingeError) -> u8 {
    match e {
        HingeError::Numeric(_) => EXIT_NUMERIC,
        HingeError::Structural(_) => EXIT_VERIFY,
        _ => EXIT_USAGE,
    }
}

fn log(stage: &str, record: impl serde::Serialize) {
    let mut v = serde_json::to_value(record).unwrap_or(Value::Null);
    if let Value::Object(map) = &mut v {
        map.insert("stage".into(), Value::String(stage.into()));
    }
    eprintln!("{v}");
}

fn metrics_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".metrics.json");
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), HingeError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| HingeError::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn load_net(cfg: &RunConfig, path: &Path) -> Result<Network, HingeError> {
    Network::from_checkpoint(&cfg.arch(), &Checkpoint::read(path)?)
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> CmdResult {
    let (net, metrics) = pipeline::train_baseline(cfg, |m| log("train", m))?;
    net.to_checkpoint()?.write(out)?;
    write_json(&metrics_path(out), &metrics)?;
    Ok(())
}

fn cmd_compress(cfg: &RunConfig, ckpt: &Path, target: f64, out: &Path, report: &Path) -> CmdResult {
    let net = load_net(cfg, ckpt)?;
    let outcome = pipeline::compress(cfg, &net, target, |r| log("compress", r))?;
    write_json(report, &outcome.report)?;
    if !outcome.report.feasible {
        return Err(Failure::Infeasible(format!(
            "target ratio {target} is below the reachable floor {:.6}",
            outcome.report.floor_ratio.unwrap_or(f64::NAN)
        )));
    }
    outcome.compact.to_checkpoint()?.write(out)?;
    Ok(())
}

fn cmd_finetune(cfg: &RunConfig, ckpt: &Path, out: &Path, teacher: Option<&Path>) -> CmdResult {
    let mut student = load_net(cfg, ckpt)?;
    let teacher = teacher.map(|t| load_net(cfg, t)).transpose()?;
    let metrics = pipeline::finetune(cfg, &mut student, teacher.as_ref(), |m| log("finetune", m))?;
    student.to_checkpoint()?.write(out)?;
    write_json(&metrics_path(out), &metrics)?;
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, ckpt: &Path) -> CmdResult {
    let net = load_net(cfg, ckpt)?;
    let (_, test) = pipeline::datasets(cfg)?;
    let (accuracy, loss) = evaluate(&net, &test)?;
    println!("{}", json!({ "test_accuracy": accuracy, "test_loss": loss, "params": net.param_count() }));
    Ok(())
}

fn print_suite(r: &SuiteReport) {
    let status = if r.passed { "PASS" } else { "FAIL" };
    println!("{status} {} cases={} max_deviation={:.3e} tolerance={:.0e}", r.suite, r.cases, r.max_deviation, r.tolerance);
    if let Some(f) = &r.failure {
        println!("  failing case: {f}");
    }
}

fn cmd_verify(args: &VerifyArgs) -> CmdResult {
    let all = !(args.prox || args.grad || args.equiv);
    let mut reports = Vec::new();
    if all || args.prox {
        reports.extend(prox_suite(1000, args.seed, &shrink_factors));
        reports.push(threshold_suite(&shrink_factors));
    }
    if all || args.grad {
        reports.extend(grad_suite(50, args.seed)?);
    }
    if all || args.equiv {
        reports.extend(equiv_suite(100, args.seed)?);
    }
    reports.iter().for_each(print_suite);
    if reports.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(Failure::Verify)
    }
}

fn run(cli: Cli) -> CmdResult {
    let load = |c: &ConfigArg| RunConfig::load(&c.config);
    match cli.command {
        Command::Train { config, out } => cmd_train(&load(&config)?, &out),
        Command::Compress { config, ckpt, target_ratio, out, report } => {
            let cfg = load(&config)?;
            let target = target_ratio.unwrap_or(cfg.compress.target_ratio);
            cmd_compress(&cfg, &ckpt, target, &out, &report)
        }
        Command::Finetune { config, ckpt, out, distill, teacher } => {
            let teacher = if distill { teacher.as_deref() } else { None };
            cmd_finetune(&load(&config)?, &ckpt, &out, teacher)
        }
        Command::Evaluate { config, ckpt } => cmd_evaluate(&load(&config)?, &ckpt),
        Command::Verify(args) => cmd_verify(&args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("{}", json!({ "error": e.to_string() }));
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Infeasible(msg)) => {
            eprintln!("{}", json!({ "error": msg }));
            ExitCode::from(EXIT_INFEASIBLE)
        }
        Err(Failure::Verify) => ExitCode::from(EXIT_VERIFY),
    }
}
