//! `boundsplit verify` decides robustness of a network around an input;
//! `boundsplit bounds` dumps the root bound table.

use std::error::Error;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use boundsplit::model::{load_input_spec, load_network, InputBox, Network, Property};
use boundsplit::report::{BoundsReport, VerificationReport};
use boundsplit::search::{verify, Outcome, SearchConfig};
use boundsplit::subproblem::Subproblem;
use boundsplit::symbolic::{compute_layer_bounds, RelaxationMode};

const EXIT_SAFE: u8 = 0;
const EXIT_UNSAFE: u8 = 1;
const EXIT_UNDETERMINED: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(name = "boundsplit", version, about = "Robustness verification for ReLU networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Verify local robustness; exits 0 (safe), 1 (unsafe) or 2 (undetermined).
    Verify(CommonArgs),
    /// Print the bounds of every node for the whole input box.
    Bounds(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Network description (JSON).
    #[arg(long, value_name = "PATH")]
    network: PathBuf,
    /// Reference input, radius and label (JSON).
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    #[arg(long, default_value = "zero-bounding", value_parser = parse_mode)]
    mode: RelaxationMode,
    /// Overrides the radius from the input file.
    #[arg(long, value_name = "NUM", value_parser = non_negative)]
    epsilon: Option<f64>,
    /// Global time limit in seconds.
    #[arg(long, value_name = "SECONDS", default_value_t = 3600.0, value_parser = non_negative)]
    timeout: f64,
    /// Time limit per LP in seconds.
    #[arg(long = "lp-timeout", value_name = "SECONDS", default_value_t = 30.0, value_parser = non_negative)]
    lp_timeout: f64,
    /// Worker threads (default: available parallelism).
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,
    /// Report destination (default: standard output).
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,
    /// Accepted for reproducible batch scripts; the pipeline has no random component.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

fn parse_mode(s: &str) -> Result<RelaxationMode, String> {
    s.parse()
}

fn non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("expected a non-negative number, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

fn seconds(v: f64) -> Duration {
    Duration::try_from_secs_f64(v).unwrap_or(Duration::MAX)
}

struct Problem {
    net: Network,
    input: InputBox,
    prop: Property,
}

fn read(path: &Path) -> Result<String, Box<dyn Error>> {
    fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()).into())
}

fn load(args: &CommonArgs) -> Result<Problem, Box<dyn Error>> {
    let net = load_network(&read(&args.network)?)?;
    let (mut input, prop) = load_input_spec(&read(&args.input)?)?;
    if let Some(eps) = args.epsilon {
        input = input.with_epsilon(eps)?;
    }
    if input.dim() != net.input_size() {
        return Err(format!("input has {} values, network expects {}", input.dim(), net.input_size()).into());
    }
    Ok(Problem { net, input, prop })
}

fn emit(args: &CommonArgs, json: &str) -> Result<(), Box<dyn Error>> {
    match &args.output {
        Some(path) => fs::write(path, format!("{json}\n")).map_err(|e| format!("cannot write {}: {e}", path.display()))?,
        None => writeln!(std::io::stdout(), "{json}")?,
    }
    Ok(())
}

fn cmd_verify(args: &CommonArgs) -> Result<u8, Box<dyn Error>> {
    let p = load(args)?;
    let workers = match args.threads {
        Some(n) => usize::try_from(n)?,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let cfg = SearchConfig {
        mode: args.mode,
        global_timeout: Some(seconds(args.timeout)),
        lp_budget: seconds(args.lp_timeout),
        workers,
        ..SearchConfig::default()
    };
    let verdict = verify(&p.net, &p.input, &p.prop, &cfg)?;
    let report = VerificationReport::new(&verdict, args.mode, p.input.epsilon, p.prop.true_label());
    emit(args, &serde_json::to_string_pretty(&report)?)?;
    Ok(match verdict.outcome {
        Outcome::Safe => EXIT_SAFE,
        Outcome::Unsafe { .. } => EXIT_UNSAFE,
        Outcome::Undetermined { .. } => EXIT_UNDETERMINED,
    })
}

fn cmd_bounds(args: &CommonArgs) -> Result<u8, Box<dyn Error>> {
    let p = load(args)?;
    let nb = compute_layer_bounds(&p.net, &p.input, args.mode, &Subproblem::root())?;
    emit(args, &serde_json::to_string_pretty(&BoundsReport::new(&nb, p.input.epsilon))?)?;
    Ok(EXIT_SAFE)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Verify(args) => cmd_verify(args),
        Command::Bounds(args) => cmd_bounds(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
