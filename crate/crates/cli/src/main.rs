//! `bcounter`: model checking, simulation and benchmark sweeps from the
//! command line.
//!
//! Exit codes: 0 on success or a verified model, 1 when a counterexample or
//! an invalid trace is found, 2 on usage or input errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use bcounter::checker::{self, ExploreSpec, Mutation, Trace, Verdict};
use bcounter::sim::{self, scenarios, SimConfig, Strategy};
use bcounter::{BoundedCounter, Polarity, ReplicaId};

#[derive(Parser)]
#[command(name = "bcounter", version, about = "Bounded Counter toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exhaustively explore small executions of the counter.
    Check(CheckArgs),
    /// Re-execute a trace written by `check --trace-out`.
    Replay {
        trace: PathBuf,
    },
    /// Run one simulation from a TOML config and emit the metrics CSV.
    Simulate(SimulateArgs),
    /// Run a bundled scenario sweep, one CSV per sweep point.
    Bench(BenchArgs),
    /// Walk through a small counter example and a short simulation.
    Demo,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    replicas: usize,
    #[arg(long, allow_hyphen_values = true)]
    bound: i64,
    #[arg(long, allow_hyphen_values = true)]
    initial: i64,
    /// `lower` or `upper`.
    #[arg(long, default_value = "lower", value_parser = parse_polarity)]
    polarity: Polarity,
    /// Increments allowed per replica.
    #[arg(long)]
    incs: Option<u32>,
    /// Rights-consuming updates allowed per replica.
    #[arg(long)]
    decs: Option<u32>,
    /// Transfers allowed per replica.
    #[arg(long)]
    transfers: Option<u32>,
    /// Total updates across all replicas.
    #[arg(long)]
    max_updates: Option<u32>,
    #[arg(long)]
    max_merges: Option<u32>,
    #[arg(long)]
    max_states: Option<usize>,
    /// Write the counterexample (or the witness path) as JSON.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[arg(long, hide = true, value_parser = parse_mutation)]
    mutant: Option<Mutation>,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Load duration in simulated milliseconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    strategy: Option<Strategy>,
}

#[derive(Args)]
struct SimulateArgs {
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    clients: Option<u32>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the run summary as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    scenario: String,
    #[command(flatten)]
    overrides: Overrides,
    /// Client counts to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    clients: Vec<u32>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn parse_polarity(s: &str) -> Result<Polarity, String> {
    match s {
        "lower" => Ok(Polarity::Lower),
        "upper" => Ok(Polarity::Upper),
        _ => Err(format!("unknown polarity {s:?} (expected lower or upper)")),
    }
}

fn parse_mutation(s: &str) -> Result<Mutation, String> {
    match s {
        "none" => Ok(Mutation::None),
        "skip-dec-check" => Ok(Mutation::SkipDecCheck),
        _ => Err(format!("unknown mutant {s:?}")),
    }
}

/// Failures that map to exit code 2.
struct UsageError(anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for UsageError {
    fn from(e: E) -> Self {
        UsageError(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Check(args) => check(args),
        Command::Replay { trace } => replay(&trace),
        Command::Simulate(args) => simulate(args),
        Command::Bench(args) => bench(args),
        Command::Demo => demo(),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(UsageError(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn check(args: CheckArgs) -> Result<u8, UsageError> {
    let mut spec = ExploreSpec::new(args.replicas, args.bound, args.initial);
    spec.polarity = args.polarity;
    if args.polarity == Polarity::Upper {
        // Increments consume rights on an upper-bound counter.
        std::mem::swap(&mut spec.incs, &mut spec.decs);
    }
    spec.incs = args.incs.unwrap_or(spec.incs);
    spec.decs = args.decs.unwrap_or(spec.decs);
    spec.transfers = args.transfers.unwrap_or(spec.transfers);
    spec.max_updates = args.max_updates.unwrap_or(spec.max_updates);
    spec.max_merges = args.max_merges.unwrap_or(spec.max_merges);
    spec.max_states = args.max_states.unwrap_or(spec.max_states);
    spec.mutation = args.mutant.unwrap_or_default();
    eprintln!("{}", serde_json::to_string(&spec)?);

    match checker::explore(&spec)? {
        Verdict::Verified(report) => {
            println!(
                "verified: {} states, {} transitions, depth {}",
                report.states, report.transitions, report.max_depth
            );
            if let Some(path) = &args.trace_out {
                write(path, &report.witness.to_json())?;
            }
            Ok(0)
        }
        Verdict::Counterexample(trace) => {
            print_trace(&trace);
            if let Some(path) = &args.trace_out {
                write(path, &trace.to_json())?;
            }
            Ok(1)
        }
    }
}

fn print_trace(trace: &Trace) {
    if let Some(v) = &trace.violation {
        println!("counterexample: {v}");
    }
    for (i, step) in trace.steps.iter().enumerate() {
        println!("  {:>3}. {step}", i + 1);
    }
    println!("fingerprint {}", trace.fingerprint);
}

fn replay(path: &Path) -> Result<u8, UsageError> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let trace = Trace::from_json(&text)?;
    eprintln!("{}", serde_json::to_string(&trace.spec)?);
    print_trace(&trace);
    let replicas = match checker::replay(&trace) {
        Ok(r) => r,
        Err(e @ checker::CheckError::InvalidStep { .. }) => {
            println!("replay failed: {e}");
            return Ok(1);
        }
        Err(e) => return Err(e.into()),
    };
    for (i, r) in replicas.iter().enumerate() {
        let rights = r.local_rights(ReplicaId(i as u32))?;
        println!("r{i}: value {} local rights {rights}", r.value());
    }
    if checker::confirm(&trace)? {
        println!("replay matches");
        Ok(0)
    } else {
        println!("replay diverges from the recorded outcome");
        Ok(1)
    }
}

fn apply_overrides(config: &mut SimConfig, o: &Overrides) {
    if let Some(seed) = o.seed {
        config.seed = seed;
    }
    if let Some(d) = o.duration {
        config.duration_ms = d;
    }
    if let Some(s) = o.strategy {
        config.strategy = s;
    }
}

fn simulate(args: SimulateArgs) -> Result<u8, UsageError> {
    let path = &args.config;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut config =
        SimConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
    apply_overrides(&mut config, &args.overrides);
    if let Some(c) = args.clients {
        config.clients = c;
    }
    eprintln!("{}", config.to_toml());
    let out = sim::run(&config)?;
    match &args.out {
        Some(p) => write(p, &out.csv())?,
        None => print!("{}", out.csv()),
    }
    if let Some(p) = &args.report {
        write(p, &out.report.to_json())?;
    }
    Ok(0)
}

fn bench(args: BenchArgs) -> Result<u8, UsageError> {
    let strategies = args.overrides.strategy.map(|s| vec![s]);
    let clients = (!args.clients.is_empty()).then_some(args.clients.as_slice());
    let points = scenarios::sweep(&args.scenario, strategies.as_deref(), clients)?;
    if points.is_empty() {
        return Err(anyhow!("the requested sweep is empty").into());
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    println!("point,attempted,succeeded,throughput,p50_ms,p99_ms,violations,conflict_fraction,op_writes_per_success");
    for mut point in points {
        let seed = args.overrides.seed;
        apply_overrides(
            &mut point.config,
            &Overrides {
                seed,
                duration: args.overrides.duration,
                strategy: None,
            },
        );
        eprintln!("# {}\n{}", point.name, point.config.to_toml());
        let out = sim::run(&point.config)?;
        write(&args.out.join(format!("{}.csv", point.name)), &out.csv())?;
        write(&args.out.join(format!("{}.json", point.name)), &out.report.to_json())?;
        let r = &out.report;
        let ms = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.3}"));
        println!(
            "{},{},{},{:.1},{},{},{},{:.4},{:.4}",
            point.name,
            r.attempted,
            r.succeeded,
            r.throughput,
            ms(r.p50_ms),
            ms(r.p99_ms),
            r.violations,
            r.conflict_fraction,
            r.op_writes_per_success
        );
    }
    Ok(0)
}

fn demo() -> Result<u8, UsageError> {
    let r = ReplicaId;
    let mut c = BoundedCounter::new(Polarity::Lower, 10, 3, r(0), 40)?;
    println!("create(bound 10, value 40) at r0");
    c.transfer(r(0), r(1), 10)?;
    c.transfer(r(0), r(2), 10)?;
    println!("r0 transfers 10 rights to r1 and to r2");
    c.increment(r(1), 1)?;
    c.decrement(r(0), 5)?;
    c.decrement(r(1), 4)?;
    c.decrement(r(2), 2)?;
    println!("inc(1) at r1; dec(5) at r0, dec(4) at r1, dec(2) at r2");
    println!("value {}", c.value());
    for id in c.replica_ids() {
        println!("  localRights({id}) = {}", c.local_rights(id)?);
    }
    match c.decrement(r(0), 6) {
        Ok(()) => return Err(anyhow!("decrement beyond local rights succeeded").into()),
        Err(e) => println!("dec(6) at r0 refused: {e}"),
    }

    let config = SimConfig {
        strategy: Strategy::Bcsrv,
        clients: 30,
        duration_ms: 3_000.0,
        drain_ms: 1_000.0,
        ..SimConfig::default()
    };
    eprintln!("{}", config.to_toml());
    println!("\nsimulating 3 s of load per strategy (30 clients, 3 data centers)");
    println!("{:<14} {:>9} {:>8} {:>10} {:>11}", "strategy", "ops/s", "p50 ms", "conflicts", "violations");
    for s in Strategy::ALL {
        let rep = sim::run(&SimConfig { strategy: s, ..config.clone() })?.report;
        println!(
            "{:<14} {:>9.1} {:>8.2} {:>10.3} {:>11}",
            s.name(),
            rep.throughput,
            rep.p50_ms.unwrap_or(f64::NAN),
            rep.conflict_fraction,
            rep.violations
        );
    }
    Ok(0)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
