//! The reference interpreter: handlers, profile points, and the dispatch
//! loop that hands control to compiled trees.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::bytecode::{FuncId, Opcode, Program};
use crate::executor::{self, TreeExit};
use crate::ir::{GuardDescr, LinearTrace, TraceTree, TreeError};
use crate::metrics::{RunMetrics, UnitOps};
use crate::optimizer::{self, Passes};
use crate::stitcher::{self, StitchError};
use crate::tracer::{self, Limits, RecState, Recording, TraceAbort};
use crate::Value;

/// One activation: the operand stack (slots at the bottom) and the pc of
/// the next instruction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub func: FuncId,
    pub pc: usize,
    pub stack: Vec<Value>,
}

impl Frame {
    pub fn new(program: &Program, func: FuncId, args: Vec<Value>) -> Frame {
        Frame { func, pc: program.functions[func].entry, stack: args }
    }

    fn pop(&mut self, pc: usize, op: Opcode) -> Result<Value, VmError> {
        self.stack.pop().ok_or(VmError::StackUnderflow { pc, op })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum VmError {
    #[error("stack underflow at pc {pc} ({op})")]
    StackUnderflow { pc: usize, op: Opcode },
    #[error("no valid instruction at pc {pc}")]
    BadInstruction { pc: usize },
    #[error("CALL at pc {pc} targets {target}, which is not a function entry")]
    BadCall { pc: usize, target: usize },
    #[error("slot {slot} out of range at pc {pc}")]
    BadSlot { pc: usize, slot: usize },
    #[error("{name} takes {expected} arguments, got {got}")]
    Arity { name: String, expected: usize, got: usize },
    #[error("call depth limit exceeded")]
    CallDepth,
    #[error("program has no main function")]
    NoMain,
}

/// What a handler asks the dispatch loop to do next.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Flow {
    Next(usize),
    Call { func: FuncId, args: Vec<Value>, ret_pc: usize },
    Return(Value),
    Exit(Value),
}

fn operand(program: &Program, at: usize) -> Result<u8, VmError> {
    program.code.get(at).copied().ok_or(VmError::BadInstruction { pc: at.saturating_sub(1) })
}

/// Runs the handler for `op` against `frame`. `operand_pc` is the address
/// right after the opcode byte. Handlers see only the frame and the code.
pub fn execute_handler(program: &Program, op: Opcode, frame: &mut Frame, operand_pc: usize) -> Result<Flow, VmError> {
    let pc = operand_pc - 1;
    let next = operand_pc + op.operand_len();
    if frame.stack.len() < op.stack_demand() {
        return Err(VmError::StackUnderflow { pc, op });
    }
    let flow = match op {
        Opcode::Nop => Flow::Next(next),
        Opcode::ConstInt => {
            frame.stack.push(operand(program, operand_pc)? as Value);
            Flow::Next(next)
        }
        Opcode::Dup => {
            let top = *frame.stack.last().expect("demand checked");
            frame.stack.push(top);
            Flow::Next(next)
        }
        Opcode::Pop => {
            frame.pop(pc, op)?;
            Flow::Next(next)
        }
        Opcode::Add | Opcode::Sub | Opcode::Mul | Opcode::Gt | Opcode::Lt | Opcode::Eq => {
            let b = frame.pop(pc, op)?;
            let a = frame.pop(pc, op)?;
            frame.stack.push(binary(op, a, b));
            Flow::Next(next)
        }
        Opcode::Jump => Flow::Next(operand(program, operand_pc)? as usize),
        Opcode::JumpIf => {
            let target = operand(program, operand_pc)? as usize;
            if frame.pop(pc, op)? != 0 {
                Flow::Next(next)
            } else {
                Flow::Next(target)
            }
        }
        Opcode::Call => {
            let target = operand(program, operand_pc)? as usize;
            let func = program.function_at_entry(target).ok_or(VmError::BadCall { pc, target })?;
            let arity = program.functions[func].arity;
            if frame.stack.len() < arity {
                return Err(VmError::StackUnderflow { pc, op });
            }
            let args = frame.stack.split_off(frame.stack.len() - arity);
            Flow::Call { func, args, ret_pc: next }
        }
        Opcode::Ret => Flow::Return(frame.pop(pc, op)?),
        Opcode::Exit => Flow::Exit(frame.pop(pc, op)?),
        Opcode::Load => {
            let slot = operand(program, operand_pc)? as usize;
            let v = *frame.stack.get(slot).ok_or(VmError::BadSlot { pc, slot })?;
            frame.stack.push(v);
            Flow::Next(next)
        }
        Opcode::Store => {
            let slot = operand(program, operand_pc)? as usize;
            let v = frame.pop(pc, op)?;
            *frame.stack.get_mut(slot).ok_or(VmError::BadSlot { pc, slot })? = v;
            Flow::Next(next)
        }
    };
    Ok(flow)
}

pub fn binary(op: Opcode, a: Value, b: Value) -> Value {
    match op {
        Opcode::Add => a.wrapping_add(b),
        Opcode::Sub => a.wrapping_sub(b),
        Opcode::Mul => a.wrapping_mul(b),
        Opcode::Gt => (a > b) as Value,
        Opcode::Lt => (a < b) as Value,
        Opcode::Eq => (a == b) as Value,
        _ => unreachable!("{op} is not a binary operator"),
    }
}

/// The truth-test half of JUMP_IF, as a residual call: pops the condition.
pub fn truth_test(frame: &mut Frame, pc: usize) -> Result<Value, VmError> {
    Ok((frame.pop(pc, Opcode::JumpIf)? != 0) as Value)
}

// ---------------------------------------------------------------------------
// Profiling

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Interp,
    Tracing,
    Baseline,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Interp, Mode::Tracing, Mode::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Interp => "interp",
            Mode::Tracing => "tracing",
            Mode::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Mode, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected interp, tracing or baseline)"))
    }
}

/// Which recorder, if any, currently drives execution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DispatchMode {
    Plain,
    RecordTracing,
    RecordTraversal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Thresholds {
    pub loop_: u32,
    pub function: u32,
    pub guard: u32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { loop_: 16, function: 8, guard: 8 }
    }
}

impl Thresholds {
    /// Every threshold clamped to at least 1.
    pub fn new(loop_: u32, function: u32, guard: u32) -> Thresholds {
        Thresholds { loop_: loop_.max(1), function: function.max(1), guard: guard.max(1) }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Site<'a> {
    BackEdge { func: FuncId, pc: usize },
    FunctionEntry(FuncId),
    GuardFail(&'a GuardDescr),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    None,
    StartTracing,
    StartTraversal,
    StartBridge,
}

#[derive(Clone, Debug)]
pub struct ProfileState {
    pub loops: HashMap<(FuncId, usize), u32>,
    pub calls: HashMap<FuncId, u32>,
    pub thresholds: Thresholds,
    pub mode: Mode,
}

fn bump(counter: &mut u32, threshold: u32) -> bool {
    let before = *counter;
    *counter = counter.saturating_add(1);
    before < threshold && *counter >= threshold
}

impl ProfileState {
    pub fn new(mode: Mode, thresholds: Thresholds) -> ProfileState {
        ProfileState { loops: HashMap::new(), calls: HashMap::new(), thresholds, mode }
    }

    /// Counts a hit and reports a start action only on the hit that takes
    /// the counter to its threshold.
    pub fn profile_point(&mut self, site: Site<'_>) -> Action {
        match site {
            Site::BackEdge { func, pc } => {
                let fired = bump(self.loops.entry((func, pc)).or_default(), self.thresholds.loop_);
                match (fired, self.mode) {
                    (true, Mode::Tracing) => Action::StartTracing,
                    _ => Action::None,
                }
            }
            Site::FunctionEntry(func) => {
                let fired = bump(self.calls.entry(func).or_default(), self.thresholds.function);
                match (fired, self.mode) {
                    (true, Mode::Baseline) => Action::StartTraversal,
                    (true, Mode::Tracing) => Action::StartTracing,
                    _ => Action::None,
                }
            }
            Site::GuardFail(descr) => {
                let mut count = descr.fail_count.get();
                let fired = bump(&mut count, self.thresholds.guard);
                descr.fail_count.set(count);
                match (fired, self.mode) {
                    (true, Mode::Tracing) => Action::StartBridge,
                    _ => Action::None,
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// The VM

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Completion {
    /// The invoked function returned.
    Return(Value),
    /// EXIT ran somewhere below; the whole program stops.
    Halt(Value),
}

impl Completion {
    pub fn value(self) -> Value {
        match self {
            Completion::Return(v) | Completion::Halt(v) => v,
        }
    }
}

/// What compiled code and recorders need from the VM.
pub trait Backend {
    /// Calls a guest function through the normal entry path.
    fn invoke(&mut self, func: FuncId, args: Vec<Value>) -> Result<Completion, VmError>;
    /// One guest instruction executed.
    fn note_handler(&mut self, pc: u32);
    /// One instruction decoded by an interpreter loop.
    fn note_dispatch(&mut self);
    fn note_residual(&mut self);
    fn note_guard_failure(&mut self);
    fn profile_point(&mut self, site: Site<'_>) -> Action;
}

#[derive(Clone, Debug)]
pub struct VmConfig {
    pub mode: Mode,
    pub thresholds: Thresholds,
    /// Ops per recording session before it is abandoned.
    pub abort_budget: usize,
    /// Call depth the tracing tier inlines before emitting a residual call.
    pub max_inline_depth: usize,
    pub passes: Passes,
    /// Frames in one interpreter loop.
    pub max_frames: usize,
    /// Nested VM entries (compiled code calling back into the VM).
    pub max_invoke_depth: usize,
    /// Keep the pc of every executed guest instruction.
    pub record_log: bool,
    /// Keep dumps of every compiled unit.
    pub keep_artifacts: bool,
}

impl Default for VmConfig {
    fn default() -> Self {
        VmConfig {
            mode: Mode::Interp,
            thresholds: Thresholds::default(),
            abort_budget: 5000,
            max_inline_depth: 7,
            passes: Passes::all(),
            max_frames: 10_000,
            max_invoke_depth: 400,
            record_log: false,
            keep_artifacts: false,
        }
    }
}

impl VmConfig {
    pub fn with_mode(mode: Mode) -> VmConfig {
        VmConfig { mode, ..VmConfig::default() }
    }

    fn limits(&self) -> Limits {
        Limits { budget: self.abort_budget, max_inline_depth: self.max_inline_depth }
    }
}

/// Where a tree is entered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TreeKey {
    /// Taken back-edge to `pc` (tracing tier).
    Loop { func: FuncId, pc: usize },
    /// Function entry.
    Function(FuncId),
}

impl TreeKey {
    pub fn name(self, program: &Program) -> String {
        match self {
            TreeKey::Loop { func, pc } => format!("{}.loop{pc}", program.functions[func].name),
            TreeKey::Function(func) => program.functions[func].name.clone(),
        }
    }
}

/// Dumps of one compilation, kept when `keep_artifacts` is set.
#[derive(Clone, Debug)]
pub struct Artifact {
    pub name: String,
    pub linear: String,
    pub stitched: Option<String>,
    pub optimized: String,
}

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("traversal aborted: {0}")]
    Trace(#[from] TraceAbort),
    #[error("stitching failed: {0}")]
    Stitch(#[from] StitchError),
    #[error("bad tree: {0}")]
    Tree(#[from] TreeError),
}

/// All stages of a baseline compilation of one function.
#[derive(Debug)]
pub struct BaselineUnit {
    pub linear: LinearTrace,
    pub stitched: TraceTree,
    pub optimized: TraceTree,
    pub trace_time: Duration,
    pub stitch_time: Duration,
    pub optimize_time: Duration,
}

/// Method traversal, stitching and cleanup for `func`. Needs no frame.
pub fn compile_baseline(program: &Program, func: FuncId, budget: usize, passes: Passes) -> Result<BaselineUnit, CompileError> {
    let t0 = Instant::now();
    let linear = tracer::trace_method(program, func, budget)?;
    let t1 = Instant::now();
    let stitched = stitcher::stitch(&linear)?;
    let t2 = Instant::now();
    let optimized = optimizer::optimize(&stitched, passes);
    let t3 = Instant::now();
    Ok(BaselineUnit {
        linear,
        stitched,
        optimized,
        trace_time: t1 - t0,
        stitch_time: t2 - t1,
        optimize_time: t3 - t2,
    })
}

/// Functions that can reach themselves through CALL.
pub fn recursive_functions(program: &Program) -> Vec<bool> {
    let n = program.functions.len();
    let callees: Vec<Vec<FuncId>> = (0..n)
        .map(|f| {
            let (s, e) = program.body(f);
            program
                .insns(s, e)
                .filter(|i| i.op == Opcode::Call)
                .filter_map(|i| program.function_at_entry(i.target()?))
                .collect()
        })
        .collect();
    (0..n)
        .map(|f| {
            let mut seen = vec![false; n];
            let mut work = callees[f].clone();
            while let Some(g) = work.pop() {
                if g == f {
                    return true;
                }
                if !std::mem::replace(&mut seen[g], true) {
                    work.extend(&callees[g]);
                }
            }
            false
        })
        .collect()
}

pub struct Vm<'p> {
    program: &'p Program,
    config: VmConfig,
    profile: ProfileState,
    trees: HashMap<TreeKey, Rc<TraceTree>>,
    recursive: Vec<bool>,
    metrics: RunMetrics,
    log: Option<Vec<u32>>,
    dispatch_mode: DispatchMode,
    invoke_depth: usize,
    artifacts: Vec<Artifact>,
}

fn resume(frames: &mut Vec<Frame>, state: RecState) -> Option<Completion> {
    match state {
        RecState::Frames(fs) => {
            frames.extend(fs);
            None
        }
        RecState::Return(v) => match frames.last_mut() {
            None => Some(Completion::Return(v)),
            Some(caller) => {
                caller.stack.push(v);
                None
            }
        },
        RecState::Exit(v) => Some(Completion::Halt(v)),
    }
}

impl<'p> Vm<'p> {
    pub fn new(program: &'p Program, config: VmConfig) -> Vm<'p> {
        Vm {
            program,
            profile: ProfileState::new(config.mode, config.thresholds),
            trees: HashMap::new(),
            recursive: recursive_functions(program),
            metrics: RunMetrics::default(),
            log: config.record_log.then(Vec::new),
            dispatch_mode: DispatchMode::Plain,
            invoke_depth: 0,
            artifacts: Vec::new(),
            config,
        }
    }

    pub fn program(&self) -> &'p Program {
        self.program
    }

    pub fn config(&self) -> &VmConfig {
        &self.config
    }

    pub fn metrics(&self) -> &RunMetrics {
        &self.metrics
    }

    pub fn metrics_mut(&mut self) -> &mut RunMetrics {
        &mut self.metrics
    }

    pub fn profile(&self) -> &ProfileState {
        &self.profile
    }

    pub fn dispatch_mode(&self) -> DispatchMode {
        self.dispatch_mode
    }

    /// Executed guest pcs, if logging was requested.
    pub fn log(&self) -> Option<&[u32]> {
        self.log.as_deref()
    }

    pub fn take_log(&mut self) -> Vec<u32> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn artifacts(&self) -> &[Artifact] {
        &self.artifacts
    }

    /// Installed trees in key order.
    pub fn trees(&self) -> Vec<(TreeKey, Rc<TraceTree>)> {
        let sorted: BTreeMap<_, _> = self.trees.iter().map(|(k, t)| (*k, Rc::clone(t))).collect();
        sorted.into_iter().collect()
    }

    pub fn tree(&self, key: TreeKey) -> Option<Rc<TraceTree>> {
        self.trees.get(&key).cloned()
    }

    /// Runs `main` with `args`.
    pub fn run(&mut self, args: &[Value]) -> Result<Value, VmError> {
        let main = self.program.main().ok_or(VmError::NoMain)?;
        Ok(self.invoke(main, args.to_vec())?.value())
    }

    pub fn invoke(&mut self, func: FuncId, args: Vec<Value>) -> Result<Completion, VmError> {
        let f = &self.program.functions[func];
        if args.len() != f.arity {
            return Err(VmError::Arity { name: f.name.clone(), expected: f.arity, got: args.len() });
        }
        if self.invoke_depth >= self.config.max_invoke_depth {
            return Err(VmError::CallDepth);
        }
        self.invoke_depth += 1;
        let result = self.run_frames(vec![Frame::new(self.program, func, args)]);
        self.invoke_depth -= 1;
        result
    }

    fn recording(&self) -> bool {
        self.dispatch_mode != DispatchMode::Plain
    }

    fn run_frames(&mut self, mut frames: Vec<Frame>) -> Result<Completion, VmError> {
        if let Some(c) = self.on_entry(&mut frames)? {
            return Ok(c);
        }
        loop {
            let program = self.program;
            let top = frames.last_mut().expect("a frame is live while running");
            let pc = top.pc;
            let insn = program.decode(pc).ok_or(VmError::BadInstruction { pc })?;
            self.metrics.dispatches += 1;
            self.note_handler(pc as u32);
            match execute_handler(program, insn.op, top, pc + 1)? {
                Flow::Next(next) => {
                    top.pc = next;
                    if matches!(insn.op, Opcode::Jump | Opcode::JumpIf) && next <= pc {
                        if let Some(c) = self.on_back_edge(&mut frames, next)? {
                            return Ok(c);
                        }
                    }
                }
                Flow::Call { func, args, ret_pc } => {
                    top.pc = ret_pc;
                    if frames.len() >= self.config.max_frames {
                        return Err(VmError::CallDepth);
                    }
                    frames.push(Frame::new(program, func, args));
                    if let Some(c) = self.on_entry(&mut frames)? {
                        return Ok(c);
                    }
                }
                Flow::Return(v) => {
                    frames.pop();
                    match frames.last_mut() {
                        None => return Ok(Completion::Return(v)),
                        Some(caller) => caller.stack.push(v),
                    }
                }
                Flow::Exit(v) => return Ok(Completion::Halt(v)),
            }
        }
    }

    /// The top frame was just pushed at its function's entry.
    fn on_entry(&mut self, frames: &mut Vec<Frame>) -> Result<Option<Completion>, VmError> {
        let func = frames.last().expect("entered frame").func;
        let key = TreeKey::Function(func);
        match self.config.mode {
            Mode::Interp => Ok(None),
            Mode::Baseline => {
                if let Some(tree) = self.trees.get(&key).cloned() {
                    return self.run_tree(tree, frames);
                }
                if self.recording() || self.profile.profile_point(Site::FunctionEntry(func)) != Action::StartTraversal {
                    return Ok(None);
                }
                match self.install_baseline(func) {
                    Some(tree) => self.run_tree(tree, frames),
                    None => Ok(None),
                }
            }
            Mode::Tracing => {
                if let Some(tree) = self.trees.get(&key).cloned() {
                    return self.run_tree(tree, frames);
                }
                if self.recording() || !self.recursive[func] {
                    return Ok(None);
                }
                if self.profile.profile_point(Site::FunctionEntry(func)) != Action::StartTracing {
                    return Ok(None);
                }
                let frame = frames.pop().expect("entered frame");
                let limits = self.config.limits();
                let program = self.program;
                let rec = self.record(|vm| tracer::trace_function(program, vm, limits, frame))?;
                self.install_root(key, rec.trace);
                Ok(resume(frames, rec.state))
            }
        }
    }

    /// The top frame just took a backward jump to `target`.
    fn on_back_edge(&mut self, frames: &mut Vec<Frame>, target: usize) -> Result<Option<Completion>, VmError> {
        if self.config.mode != Mode::Tracing {
            return Ok(None);
        }
        let top = frames.last().expect("running frame");
        let key = TreeKey::Loop { func: top.func, pc: target };
        if let Some(tree) = self.trees.get(&key).cloned() {
            if tree.root().inputs.len() == top.stack.len() + 1 {
                return self.run_tree(tree, frames);
            }
            return Ok(None);
        }
        if self.recording() {
            return Ok(None);
        }
        if self.profile.profile_point(Site::BackEdge { func: top.func, pc: target }) != Action::StartTracing {
            return Ok(None);
        }
        let frame = frames.pop().expect("running frame");
        let limits = self.config.limits();
        let program = self.program;
        let rec = self.record(|vm| tracer::trace_loop(program, vm, limits, frame))?;
        self.install_root(key, rec.trace);
        Ok(resume(frames, rec.state))
    }

    fn record(
        &mut self,
        f: impl FnOnce(&mut Vm<'p>) -> Result<Recording, VmError>,
    ) -> Result<Recording, VmError> {
        self.dispatch_mode = DispatchMode::RecordTracing;
        let t0 = Instant::now();
        let rec = f(self);
        self.dispatch_mode = DispatchMode::Plain;
        RunMetrics::add_time(&mut self.metrics.trace_time_ns, t0.elapsed());
        let rec = rec?;
        if rec.trace.is_none() {
            self.metrics.aborts += 1;
        }
        Ok(rec)
    }

    fn install_root(&mut self, key: TreeKey, trace: Option<LinearTrace>) {
        let Some(trace) = trace else { return };
        let Ok(tree) = TraceTree::new(trace.origin, trace.inputs.clone(), trace.ops.clone()) else {
            self.metrics.aborts += 1;
            return;
        };
        tree.reserve(trace.next_var, trace.next_guard);
        let t0 = Instant::now();
        let tree = optimizer::optimize(&tree, self.config.passes);
        RunMetrics::add_time(&mut self.metrics.optimize_time_ns, t0.elapsed());
        let name = key.name(self.program);
        self.metrics.trace_ops += trace.op_count() as u64;
        self.metrics.units.push(UnitOps { name: name.clone(), ops: trace.op_count() as u64 });
        if self.config.keep_artifacts {
            self.artifacts.push(Artifact { name, linear: trace.dump(), stitched: None, optimized: tree.dump() });
        }
        self.trees.insert(key, Rc::new(tree));
    }

    fn install_baseline(&mut self, func: FuncId) -> Option<Rc<TraceTree>> {
        self.dispatch_mode = DispatchMode::RecordTraversal;
        let unit = compile_baseline(self.program, func, self.config.abort_budget, self.config.passes);
        self.dispatch_mode = DispatchMode::Plain;
        let unit = match unit {
            Ok(u) => u,
            Err(_) => {
                self.metrics.aborts += 1;
                return None;
            }
        };
        let m = &mut self.metrics;
        RunMetrics::add_time(&mut m.trace_time_ns, unit.trace_time);
        RunMetrics::add_time(&mut m.stitch_time_ns, unit.stitch_time);
        RunMetrics::add_time(&mut m.optimize_time_ns, unit.optimize_time);
        let ops = unit.stitched.op_count() as u64;
        let name = self.program.functions[func].name.clone();
        m.trace_ops += ops;
        m.units.push(UnitOps { name: name.clone(), ops });
        if self.config.keep_artifacts {
            self.artifacts.push(Artifact {
                name,
                linear: unit.linear.dump(),
                stitched: Some(unit.stitched.dump()),
                optimized: unit.optimized.dump(),
            });
        }
        let tree = Rc::new(unit.optimized);
        self.trees.insert(TreeKey::Function(func), Rc::clone(&tree));
        Some(tree)
    }

    fn run_tree(&mut self, tree: Rc<TraceTree>, frames: &mut Vec<Frame>) -> Result<Option<Completion>, VmError> {
        let frame = frames.pop().expect("frame to enter the tree with");
        let program = self.program;
        match executor::execute_tree(&tree, program, frame, self)? {
            TreeExit::Return(v) => Ok(resume(frames, RecState::Return(v))),
            TreeExit::Exit(v) => Ok(Some(Completion::Halt(v))),
            TreeExit::SideExit { frames: fs, .. } => {
                frames.extend(fs);
                Ok(None)
            }
            TreeExit::StartBridge { guard, frames: fs } => {
                let limits = self.config.limits();
                let rec = self.record(|vm| tracer::trace_bridge(program, vm, limits, &tree, guard, fs))?;
                if let Some(trace) = rec.trace {
                    let t0 = Instant::now();
                    let ops = optimizer::optimize_trace(&trace.inputs, trace.ops.clone(), self.config.passes);
                    RunMetrics::add_time(&mut self.metrics.optimize_time_ns, t0.elapsed());
                    tree.reserve(trace.next_var, trace.next_guard);
                    if let Ok(id) = executor::attach_bridge(&tree, guard, trace.inputs.clone(), ops) {
                        let n = trace.op_count() as u64;
                        let name = format!("bridge{}", id.0);
                        self.metrics.trace_ops += n;
                        self.metrics.bridges += 1;
                        self.metrics.units.push(UnitOps { name: name.clone(), ops: n });
                        if self.config.keep_artifacts {
                            self.artifacts.push(Artifact {
                                name,
                                linear: trace.dump(),
                                stitched: None,
                                optimized: tree.dump(),
                            });
                        }
                    }
                }
                Ok(resume(frames, rec.state))
            }
        }
    }
}

impl Backend for Vm<'_> {
    fn invoke(&mut self, func: FuncId, args: Vec<Value>) -> Result<Completion, VmError> {
        Vm::invoke(self, func, args)
    }

    fn note_handler(&mut self, pc: u32) {
        self.metrics.handler_calls += 1;
        if let Some(log) = &mut self.log {
            log.push(pc);
        }
    }

    fn note_dispatch(&mut self) {
        self.metrics.dispatches += 1;
    }

    fn note_residual(&mut self) {
        self.metrics.residual_calls += 1;
    }

    fn note_guard_failure(&mut self) {
        self.metrics.guard_fails += 1;
    }

    fn profile_point(&mut self, site: Site<'_>) -> Action {
        let action = self.profile.profile_point(site);
        if self.recording() {
            Action::None
        } else {
            action
        }
    }
}
