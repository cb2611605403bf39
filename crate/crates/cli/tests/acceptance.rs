//! The acceptance gate: one pass/fail line per criterion, then a single
//! assertion over all of them. Criteria run one after another so the timing
//! comparisons are not disturbed by each other.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::{bytecode_cfg, differential, eager, isomorphic, pass_configs, tree_cfg};
use stitchvm::generate::{generate, suite_seed, Generated};
use stitchvm::harness::{bench, load_program, load_suite, mean_stddev, Subject, CSV_HEADER};
use stitchvm::ir::{Handler, OpKind, TraceKind, TraceOp, FRAME};
use stitchvm::vm::compile_baseline;
use stitchvm::{Mode, Opcode, Passes, Program, Vm, VmConfig};

const PROGRAMS: usize = 200;

fn programs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../programs")
}

fn subject(name: &str) -> Subject {
    load_suite(&programs_dir()).unwrap().into_iter().find(|s| s.name == name).unwrap()
}

fn corpus() -> Vec<Generated> {
    let base = suite_seed();
    (0..PROGRAMS as u64).map(|i| generate(base.wrapping_add(i))).collect()
}

#[derive(Debug, PartialEq, Clone, Copy)]
enum Kind {
    Call(Handler),
    GuardTrue,
    Cut,
    Finish,
    Label,
    Jump,
}

fn kinds(ops: &[TraceOp]) -> Vec<Kind> {
    ops.iter()
        .map(|o| match &o.kind {
            OpKind::Residual { handler, .. } => Kind::Call(*handler),
            OpKind::Guard { expect: true, .. } => Kind::GuardTrue,
            OpKind::CutMarker(_) => Kind::Cut,
            OpKind::Finish { .. } => Kind::Finish,
            OpKind::Label { .. } => Kind::Label,
            OpKind::Jump { .. } => Kind::Jump,
            other => panic!("unexpected op {other:?}"),
        })
        .collect()
}

fn op(o: Opcode) -> Kind {
    Kind::Call(Handler::Op(o))
}

fn loop_function() -> (Program, usize) {
    let p = load_program(&programs_dir().join("loop.tla")).unwrap();
    let f = p.function_by_name("loop").unwrap();
    (p, f)
}

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn c1_golden_linear() -> Verdict {
    let (p, f) = loop_function();
    let unit = compile_baseline(&p, f, 5000, Passes::all()).map_err(|e| e.to_string())?;
    let expected = vec![
        op(Opcode::Dup),
        op(Opcode::ConstInt),
        op(Opcode::Gt),
        Kind::Call(Handler::IsTrue),
        Kind::GuardTrue,
        op(Opcode::ConstInt),
        op(Opcode::Sub),
        Kind::Cut,
        op(Opcode::Call),
        op(Opcode::Ret),
        Kind::Finish,
    ];
    let got = kinds(&unit.linear.ops);
    if got == expected {
        Ok(format!("{} ops in the expected order", got.len()))
    } else {
        Err(format!("got {got:?}"))
    }
}

fn c2_golden_tree() -> Verdict {
    let (p, f) = loop_function();
    let unit = compile_baseline(&p, f, 5000, Passes::all()).map_err(|e| e.to_string())?;
    let tree = &unit.stitched;
    if tree.len() != 2 {
        return Err(format!("{} traces, want loop + one bridge", tree.len()));
    }
    let root = tree.root();
    let bridge = tree.trace(stitchvm::ir::TraceId(1));
    let root_kinds = kinds(&root.ops);
    let want_root = vec![
        Kind::Label,
        op(Opcode::Dup),
        op(Opcode::ConstInt),
        op(Opcode::Gt),
        Kind::Call(Handler::IsTrue),
        Kind::GuardTrue,
        op(Opcode::ConstInt),
        op(Opcode::Sub),
        Kind::Jump,
    ];
    if root_kinds != want_root {
        return Err(format!("loop is {root_kinds:?}"));
    }
    let (OpKind::Label { token: l, .. }, OpKind::Jump { token: j, .. }) = (&root.ops[0].kind, &root.ops[8].kind) else {
        unreachable!()
    };
    if l != j {
        return Err("loop does not jump to its own label".into());
    }
    let guard = root.ops[5].guard().unwrap();
    if guard.bridge.get() != Some(bridge.id) || bridge.kind != TraceKind::Bridge(guard.id) {
        return Err("bridge is not attached to the loop's guard".into());
    }
    if bridge.inputs != vec![FRAME] {
        return Err(format!("bridge inputs {:?}", bridge.inputs));
    }
    let want_bridge = vec![op(Opcode::Call), op(Opcode::Ret), Kind::Finish];
    if kinds(&bridge.ops) != want_bridge {
        return Err(format!("bridge is {:?}", kinds(&bridge.ops)));
    }
    Ok("loop + bridge, bridge inputs [p0]".into())
}

fn differential_suite(configs: &[Passes]) -> Verdict {
    let corpus = corpus();
    let mut checked = 0;
    for g in &corpus {
        for &passes in configs {
            for mode in [Mode::Tracing, Mode::Baseline] {
                differential(&g.program, &g.inputs, mode, passes, eager())
                    .map_err(|e| format!("seed {} {mode} {passes:?}: {e}", g.seed))?;
                checked += 1;
            }
        }
    }
    Ok(format!("{} programs, {checked} tier runs matched the interpreter", corpus.len()))
}

fn c3_differential() -> Verdict {
    differential_suite(&[Passes::all()])
}

fn c4_cfg_isomorphism() -> Verdict {
    let mut functions = 0;
    for g in corpus() {
        for f in 0..g.program.functions.len() {
            let unit = compile_baseline(&g.program, f, 5000, Passes::all()).map_err(|e| format!("seed {}: {e}", g.seed))?;
            isomorphic(&bytecode_cfg(&g.program, f), &tree_cfg(&unit.stitched.block_graph()))
                .map_err(|e| format!("seed {} function {f}: {e}", g.seed))?;
            functions += 1;
        }
    }
    Ok(format!("{functions} functions isomorphic"))
}

struct Session {
    trace_ops: u64,
    compile_ns: u64,
}

fn session(s: &Subject, mode: Mode) -> Session {
    let r = bench(s, mode, 100, 5, &VmConfig::default()).unwrap();
    let m = &r.totals;
    // The tracing tier has no stitching step; its stitch time is zero.
    Session { trace_ops: m.trace_ops, compile_ns: m.compile_ns() }
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

fn c5_trace_size() -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    for name in ["fib", "tak"] {
        let s = subject(name);
        let b = session(&s, Mode::Baseline).trace_ops;
        let t = session(&s, Mode::Tracing).trace_ops;
        let ratio = b as f64 / t as f64;
        ok &= ratio <= 0.5;
        parts.push(format!("{name} {b}/{t} = {ratio:.3}"));
    }
    let msg = format!("{} (limit 0.5)", parts.join(", "));
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c6_compile_time() -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    for name in ["fib", "tak"] {
        let s = subject(name);
        let mut base = Vec::new();
        let mut trace = Vec::new();
        for _ in 0..10 {
            base.push(session(&s, Mode::Baseline).compile_ns);
            trace.push(session(&s, Mode::Tracing).compile_ns);
        }
        let (b, t) = (median(base), median(trace));
        let ratio = b as f64 / t as f64;
        ok &= ratio <= 1.0;
        parts.push(format!("{name} {b}ns/{t}ns = {ratio:.3}"));
    }
    let msg = format!("{} (limit 1.0, medians of 10)", parts.join(", "));
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c7_dispatch() -> Verdict {
    let s = subject("loop");
    let mut interp = Vm::new(&s.program, VmConfig { record_log: true, ..VmConfig::with_mode(Mode::Interp) });
    interp.run(&s.args).map_err(|e| e.to_string())?;
    let opcodes = interp.metrics().dispatches;
    let reference = interp.take_log();

    let mut vm = Vm::new(&s.program, VmConfig { record_log: true, ..VmConfig::with_mode(Mode::Baseline) });
    for _ in 0..10 {
        vm.run(&s.args).map_err(|e| e.to_string())?;
    }
    vm.take_log();
    let before = vm.metrics().clone();
    let value = vm.run(&s.args).map_err(|e| e.to_string())?;
    let d = vm.metrics().delta_since(&before);
    let log = vm.take_log();
    if d.dispatches != 0 {
        return Err(format!("{} dispatches at steady state", d.dispatches));
    }
    if d.handler_calls != opcodes || log != reference {
        return Err(format!("{} handler calls vs {opcodes} interpreted opcodes", d.handler_calls));
    }
    Ok(format!("value {value}, 0 dispatches, {opcodes} handler calls = interpreter opcodes"))
}

fn c8_warmup() -> Verdict {
    let out = std::env::temp_dir().join(format!("stitchvm-accept-{}.csv", std::process::id()));
    let status = Command::new(env!("CARGO_BIN_EXE_stitchvm"))
        .arg("bench")
        .arg(programs_dir().join("loop.tla"))
        .args(["--arg", "20", "--iterations", "100", "--warmup", "5", "--metrics"])
        .arg(&out)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    let text = std::fs::read_to_string(&out).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_file(&out);
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err("header mismatch".into());
    }
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let mut values = Vec::new();
    for mode in Mode::ALL {
        let mine: Vec<&Vec<&str>> = rows.iter().filter(|r| r[1] == mode.name()).collect();
        let iters: Vec<&&Vec<&str>> = mine.iter().filter(|r| r[2].parse::<usize>().is_ok()).collect();
        if iters.len() != 100 {
            return Err(format!("{mode}: {} iteration rows", iters.len()));
        }
        let find = |tag: &str| mine.iter().find(|r| r[2] == tag).ok_or(format!("{mode}: no {tag} row"));
        let (mean_row, sd_row) = (find("mean")?, find("stddev")?);
        for col in 4..CSV_HEADER.split(',').count() {
            let kept: Vec<f64> = iters.iter().filter(|r| r[2].parse::<usize>().unwrap() > 5).map(|r| r[col].parse().unwrap()).collect();
            if kept.len() != 95 {
                return Err("warm-up exclusion kept the wrong rows".into());
            }
            let (m, sd) = mean_stddev(&kept);
            if mean_row[col].parse::<f64>().unwrap() != m || sd_row[col].parse::<f64>().unwrap() != sd {
                return Err(format!("{mode} column {col}: summary does not match iterations 6..100"));
            }
        }
        values.extend(mine.iter().map(|r| r[3].to_string()));
    }
    values.dedup();
    if values.len() != 1 {
        return Err(format!("value column differs across modes: {values:?}"));
    }
    Ok("3 modes x 100 iterations, summaries over iterations 6..100 exact".into())
}

fn c9_optimizer_safety() -> Verdict {
    differential_suite(&pass_configs())
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 9] = [
        ("1 golden linear trace", c1_golden_linear),
        ("2 golden stitched tree", c2_golden_tree),
        ("3 differential equivalence", c3_differential),
        ("4 CFG isomorphism", c4_cfg_isomorphism),
        ("5 trace size fib/tak", c5_trace_size),
        ("6 compile time fib/tak", c6_compile_time),
        ("7 threaded-code dispatch", c7_dispatch),
        ("8 warm-up methodology", c8_warmup),
        ("9 optimizer safety", c9_optimizer_safety),
    ];
    let mut failed = Vec::new();
    let mut err = std::io::stderr();
    for (name, check) in criteria {
        let t0 = Instant::now();
        let verdict = check();
        let secs = t0.elapsed().as_secs_f64();
        // Written to the raw handle so the lines show even when the test passes.
        let _ = match &verdict {
            Ok(detail) => writeln!(err, "PASS criterion {name}: {detail} [{secs:.2}s]"),
            Err(detail) => writeln!(err, "FAIL criterion {name}: {detail} [{secs:.2}s]"),
        };
        if verdict.is_err() {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
