use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use stitchvm::harness::{self, DumpOutcome, Subject};
use stitchvm::{Mode, Thresholds, VmConfig};

#[derive(Parser)]
#[command(name = "stitchvm", version, about = "Toy VM with a tracing tier and a stitched baseline tier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a program and print its result.
    Run(Opts),
    /// Benchmark a program, or every program of a suite directory, as CSV.
    Bench(Opts),
    /// Write trace dumps for a program.
    Dump(Opts),
}

#[derive(Args)]
struct Opts {
    file: PathBuf,
    /// interp, tracing or baseline. Bench defaults to all three.
    #[arg(long)]
    mode: Option<Mode>,
    /// Argument for main; repeat for several.
    #[arg(long = "arg", allow_negative_numbers = true)]
    args: Vec<i64>,
    #[arg(long, default_value_t = 16)]
    loop_threshold: u32,
    #[arg(long, default_value_t = 8)]
    function_threshold: u32,
    #[arg(long, default_value_t = 8)]
    guard_threshold: u32,
    /// CSV destination (run appends a row, bench writes the table).
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    dump_traces: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
}

impl Opts {
    fn config(&self, mode: Mode) -> VmConfig {
        VmConfig {
            thresholds: Thresholds::new(self.loop_threshold, self.function_threshold, self.guard_threshold),
            ..VmConfig::with_mode(mode)
        }
    }
}

fn name_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "program".into())
}

fn run(o: &Opts) -> Result<()> {
    let program = harness::load_program(&o.file)?;
    let mode = o.mode.unwrap_or(Mode::Interp);
    let config = VmConfig { keep_artifacts: o.dump_traces.is_some(), ..o.config(mode) };
    let report = harness::run(&program, &o.args, config)?;
    println!("{}", report.value);
    let m = &report.metrics;
    eprintln!(
        "mode={mode} dispatches={} handler_calls={} trace_ops={} guard_fails={} bridges={} compile_ns={}",
        m.dispatches,
        m.handler_calls,
        m.trace_ops,
        m.guard_fails,
        m.bridges,
        m.compile_ns()
    );
    if let Some(path) = &o.metrics {
        harness::append_metrics(path, &name_of(&o.file), mode, &report)?;
    }
    if let Some(dir) = &o.dump_traces {
        let files = harness::write_artifacts(dir, &report.artifacts)?;
        if files.is_empty() {
            eprintln!("nothing was compiled; no traces written");
        }
        for f in files {
            eprintln!("wrote {}", f.display());
        }
    }
    Ok(())
}

fn bench(o: &Opts) -> Result<()> {
    if o.iterations == 0 {
        bail!("--iterations must be at least 1");
    }
    let subjects = if o.file.is_dir() {
        harness::load_suite(&o.file)?
    } else {
        vec![Subject { name: name_of(&o.file), program: harness::load_program(&o.file)?, args: o.args.clone() }]
    };
    let modes: Vec<Mode> = match o.mode {
        Some(m) => vec![m],
        None => Mode::ALL.to_vec(),
    };
    let report = harness::bench_suite(&subjects, &modes, o.iterations, o.warmup, &o.config(Mode::Interp))?;
    match &o.metrics {
        Some(path) => std::fs::write(path, &report.csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{}", report.csv),
    }
    for ((name, base, tracing), (_, ratio)) in report.trace_ops.iter().zip(report.ratios()) {
        if modes.contains(&Mode::Baseline) && modes.contains(&Mode::Tracing) {
            eprintln!("trace_ops {name}: baseline={base} tracing={tracing} ratio={ratio:.3}");
        }
    }
    Ok(())
}

fn dump(o: &Opts) -> Result<()> {
    let program = harness::load_program(&o.file)?;
    let mode = o.mode.unwrap_or(Mode::Baseline);
    let dir = o.dump_traces.clone().unwrap_or_else(|| PathBuf::from("traces"));
    match harness::dump(&program, &o.args, mode, &o.config(mode), &dir)? {
        DumpOutcome::Written(files) => {
            for f in files {
                println!("{}", f.display());
            }
        }
        DumpOutcome::NoLoopFound => println!("no loop found"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(o) => run(o),
        Command::Bench(o) => bench(o),
        Command::Dump(o) => dump(o),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
