//! Running, benchmarking and dumping programs: the plumbing behind the CLI.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Deserialize;
use thiserror::Error;

use crate::bytecode::{assemble, validate, AsmError, Diagnostic, Program};
use crate::metrics::RunMetrics;
use crate::vm::{compile_baseline, Artifact, Mode, Vm, VmConfig, VmError};
use crate::Value;

pub const CSV_HEADER: &str =
    "program,mode,iter,value,wall_ns,trace_ops,trace_time_ns,stitch_time_ns,dispatches,handler_calls,guard_fails";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Asm { path: PathBuf, source: AsmError },
    #[error("{path}: invalid program:\n{}", list(.diagnostics))]
    Invalid { path: PathBuf, diagnostics: Vec<Diagnostic> },
    #[error("{path}: bad manifest: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error("no manifest.json in {0}")]
    MissingManifest(PathBuf),
    #[error(transparent)]
    Vm(#[from] VmError),
}

fn list(d: &[Diagnostic]) -> String {
    d.iter().map(|x| format!("  {x}")).collect::<Vec<_>>().join("\n")
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// Reads, assembles and validates a program file.
pub fn load_program(path: &Path) -> Result<Program, HarnessError> {
    let src = fs::read_to_string(path).map_err(io_err(path))?;
    let program = assemble(&src).map_err(|source| HarnessError::Asm { path: path.to_path_buf(), source })?;
    let diagnostics = validate(&program);
    if !diagnostics.is_empty() {
        return Err(HarnessError::Invalid { path: path.to_path_buf(), diagnostics });
    }
    Ok(program)
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    #[serde(default)]
    pub args: Vec<Value>,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
pub struct Manifest {
    pub programs: Vec<ManifestEntry>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, HarnessError> {
    let path = dir.join("manifest.json");
    if !path.is_file() {
        return Err(HarnessError::MissingManifest(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| HarnessError::Manifest { path, source })
}

/// One benchmark subject: a loaded program and the arguments for `main`.
#[derive(Clone, Debug)]
pub struct Subject {
    pub name: String,
    pub program: Program,
    pub args: Vec<Value>,
}

pub fn load_suite(dir: &Path) -> Result<Vec<Subject>, HarnessError> {
    read_manifest(dir)?
        .programs
        .into_iter()
        .map(|e| Ok(Subject { program: load_program(&dir.join(&e.file))?, name: e.name, args: e.args }))
        .collect()
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub value: Value,
    pub metrics: RunMetrics,
    pub artifacts: Vec<Artifact>,
}

pub fn run(program: &Program, args: &[Value], config: VmConfig) -> Result<RunReport, HarnessError> {
    let mut vm = Vm::new(program, config);
    let t0 = Instant::now();
    let value = vm.run(args)?;
    let mut metrics = vm.metrics().clone();
    metrics.iteration_ns.push(t0.elapsed().as_nanos() as u64);
    Ok(RunReport { value, metrics, artifacts: vm.artifacts().to_vec() })
}

/// One CSV row. `iter` is the 1-based iteration, or `mean` / `stddev`.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub program: String,
    pub mode: Mode,
    pub iter: String,
    pub value: Value,
    /// wall_ns, trace_ops, trace_time_ns, stitch_time_ns, dispatches,
    /// handler_calls, guard_fails.
    pub fields: [f64; 7],
}

impl BenchRow {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{},{},{}", self.program, self.mode, self.iter, self.value);
        for f in self.fields {
            let _ = write!(s, ",{f}");
        }
        s
    }
}

fn fields(m: &RunMetrics, wall_ns: u64) -> [f64; 7] {
    [
        wall_ns as f64,
        m.trace_ops as f64,
        m.trace_time_ns as f64,
        m.stitch_time_ns as f64,
        m.dispatches as f64,
        m.handler_calls as f64,
        m.guard_fails as f64,
    ]
}

/// Mean and population standard deviation.
pub fn mean_stddev(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    /// Cumulative metrics after the last iteration.
    pub totals: RunMetrics,
}

/// Runs `main` `iterations` times in one VM, so compiled code carries over
/// between iterations. Each row holds that iteration's metric deltas; the
/// summary rows cover the iterations after `warmup`.
pub fn bench(subject: &Subject, mode: Mode, iterations: usize, warmup: usize, config: &VmConfig) -> Result<BenchResult, HarnessError> {
    let mut vm = Vm::new(&subject.program, VmConfig { mode, ..config.clone() });
    let mut rows = Vec::with_capacity(iterations + 2);
    let mut value = 0;
    for i in 1..=iterations {
        let before = vm.metrics().clone();
        let t0 = Instant::now();
        value = vm.run(&subject.args)?;
        let wall = t0.elapsed().as_nanos() as u64;
        vm.metrics_mut().iteration_ns.push(wall);
        let delta = vm.metrics().delta_since(&before);
        rows.push(BenchRow {
            program: subject.name.clone(),
            mode,
            iter: i.to_string(),
            value,
            fields: fields(&delta, wall),
        });
    }
    let kept = &rows[warmup.min(rows.len())..];
    let mut mean = [0.0; 7];
    let mut sd = [0.0; 7];
    for k in 0..7 {
        let col: Vec<f64> = kept.iter().map(|r| r.fields[k]).collect();
        (mean[k], sd[k]) = mean_stddev(&col);
    }
    for (iter, f) in [("mean", mean), ("stddev", sd)] {
        rows.push(BenchRow { program: subject.name.clone(), mode, iter: iter.into(), value, fields: f });
    }
    Ok(BenchResult { rows, totals: vm.metrics().clone() })
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub csv: String,
    /// (program, baseline trace ops, tracing trace ops).
    pub trace_ops: Vec<(String, u64, u64)>,
}

impl SuiteReport {
    /// Baseline over tracing-tier total trace ops, per program.
    pub fn ratios(&self) -> Vec<(String, f64)> {
        self.trace_ops
            .iter()
            .map(|(n, b, t)| (n.clone(), if *t == 0 { f64::NAN } else { *b as f64 / *t as f64 }))
            .collect()
    }
}

/// Benchmarks every subject under every mode in `modes`, in order.
pub fn bench_suite(
    subjects: &[Subject],
    modes: &[Mode],
    iterations: usize,
    warmup: usize,
    config: &VmConfig,
) -> Result<SuiteReport, HarnessError> {
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    let mut trace_ops = Vec::new();
    for s in subjects {
        let mut ops = [0u64; 2];
        for &mode in modes {
            let r = bench(s, mode, iterations, warmup, config)?;
            for row in &r.rows {
                csv.push_str(&row.to_csv());
                csv.push('\n');
            }
            match mode {
                Mode::Baseline => ops[0] = r.totals.trace_ops,
                Mode::Tracing => ops[1] = r.totals.trace_ops,
                Mode::Interp => {}
            }
        }
        trace_ops.push((s.name.clone(), ops[0], ops[1]));
    }
    Ok(SuiteReport { csv, trace_ops })
}

/// Appends one row for a finished run, writing the header first if the
/// file is new or empty.
pub fn append_metrics(path: &Path, program: &str, mode: Mode, report: &RunReport) -> Result<(), HarnessError> {
    use std::io::Write;
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    let wall = report.metrics.iteration_ns.iter().sum();
    let row = BenchRow {
        program: program.to_string(),
        mode,
        iter: "1".into(),
        value: report.value,
        fields: fields(&report.metrics, wall),
    };
    let mut text = String::new();
    if fresh {
        text.push_str(CSV_HEADER);
        text.push('\n');
    }
    text.push_str(&row.to_csv());
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' }).collect()
}

/// Writes each artifact as `<name>.linear.txt`, `<name>.stitched.txt` (when
/// there is one) and `<name>.optimized.txt`. Returns the paths written.
pub fn write_artifacts(dir: &Path, artifacts: &[Artifact]) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    for a in artifacts {
        let stem = file_stem(&a.name);
        let mut files = vec![("linear", &a.linear)];
        if let Some(s) = &a.stitched {
            files.push(("stitched", s));
        }
        files.push(("optimized", &a.optimized));
        for (kind, text) in files {
            let path = dir.join(format!("{stem}.{kind}.txt"));
            fs::write(&path, text).map_err(io_err(&path))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DumpOutcome {
    Written(Vec<PathBuf>),
    NoLoopFound,
}

/// Baseline: compiles every function directly, without running anything.
/// Tracing: runs the program once and dumps whatever got recorded.
pub fn dump(program: &Program, args: &[Value], mode: Mode, config: &VmConfig, dir: &Path) -> Result<DumpOutcome, HarnessError> {
    let artifacts = match mode {
        Mode::Baseline => {
            let mut out = Vec::new();
            for (id, f) in program.functions.iter().enumerate() {
                let Ok(unit) = compile_baseline(program, id, config.abort_budget, config.passes) else { continue };
                out.push(Artifact {
                    name: f.name.clone(),
                    linear: unit.linear.dump(),
                    stitched: Some(unit.stitched.dump()),
                    optimized: unit.optimized.dump(),
                });
            }
            out
        }
        Mode::Tracing => run(program, args, VmConfig { mode, keep_artifacts: true, ..config.clone() })?.artifacts,
        Mode::Interp => Vec::new(),
    };
    if artifacts.is_empty() {
        return Ok(DumpOutcome::NoLoopFound);
    }
    Ok(DumpOutcome::Written(write_artifacts(dir, &artifacts)?))
}
