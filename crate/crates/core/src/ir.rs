//! Recorded-trace IR shared by the tracer, stitcher, optimizer and executor.
//!
//! Variables are SSA values numbered per compilation unit. `FRAME` (printed
//! `p0`) is the red frame reference; every other variable holds an integer.
//! Greens (program counters, operand bytes, the traverse stack) never become
//! variables; they appear as constant arguments.
//!
//! Every op carries `origins`: the program counters of the guest
//! instructions that complete at that op. The executor replays them to
//! produce the same handler-invocation sequence as the interpreter, even
//! when an instruction compiled to nothing (a `DUP` on a virtual stack) or
//! its op was later optimized away.

use std::cell::{Cell, Ref, RefCell};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::rc::Rc;

use crate::bytecode::{FuncId, Opcode};
use crate::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub u32);

/// The frame reference, always the first input of a trace.
pub const FRAME: Var = Var(0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GuardId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TraceId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Operand {
    Var(Var),
    Const(Value),
}

impl Operand {
    pub fn as_var(self) -> Option<Var> {
        match self {
            Operand::Var(v) => Some(v),
            Operand::Const(_) => None,
        }
    }

    pub fn as_const(self) -> Option<Value> {
        match self {
            Operand::Const(c) => Some(c),
            Operand::Var(_) => None,
        }
    }
}

impl From<Var> for Operand {
    fn from(v: Var) -> Self {
        Operand::Var(v)
    }
}

/// Which compiler produced a trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tier {
    Tracing,
    Baseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimOp {
    Add,
    Sub,
    Mul,
    Gt,
    Lt,
    Eq,
    IsTrue,
    SameAs,
}

impl PrimOp {
    pub fn name(self) -> &'static str {
        match self {
            PrimOp::Add => "int_add",
            PrimOp::Sub => "int_sub",
            PrimOp::Mul => "int_mul",
            PrimOp::Gt => "int_gt",
            PrimOp::Lt => "int_lt",
            PrimOp::Eq => "int_eq",
            PrimOp::IsTrue => "int_is_true",
            PrimOp::SameAs => "same_as_i",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            PrimOp::IsTrue | PrimOp::SameAs => 1,
            _ => 2,
        }
    }

    pub fn from_opcode(op: Opcode) -> Option<PrimOp> {
        Some(match op {
            Opcode::Add => PrimOp::Add,
            Opcode::Sub => PrimOp::Sub,
            Opcode::Mul => PrimOp::Mul,
            Opcode::Gt => PrimOp::Gt,
            Opcode::Lt => PrimOp::Lt,
            Opcode::Eq => PrimOp::Eq,
            _ => return None,
        })
    }

    /// Same arithmetic the interpreter handlers use.
    pub fn eval(self, args: &[Value]) -> Value {
        match self {
            PrimOp::Add => args[0].wrapping_add(args[1]),
            PrimOp::Sub => args[0].wrapping_sub(args[1]),
            PrimOp::Mul => args[0].wrapping_mul(args[1]),
            PrimOp::Gt => (args[0] > args[1]) as Value,
            PrimOp::Lt => (args[0] < args[1]) as Value,
            PrimOp::Eq => (args[0] == args[1]) as Value,
            PrimOp::IsTrue => (args[0] != 0) as Value,
            PrimOp::SameAs => args[0],
        }
    }
}

/// Target of a residual call.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Handler {
    /// The interpreter's handler for an opcode, run against the frame.
    /// Arguments are `[p0, operand_pc]`.
    Op(Opcode),
    /// Pops the frame's top of stack and returns its truth value.
    /// Arguments are `[p0, operand_pc]`.
    IsTrue,
    /// Calls a guest function through the normal VM entry.
    /// Arguments are `[entry_pc, arg...]`.
    Invoke,
}

impl Handler {
    pub fn name(self) -> String {
        match self {
            Handler::Op(op) => format!("tla_{}", op.mnemonic()),
            Handler::IsTrue => "_is_true".into(),
            Handler::Invoke => "invoke".into(),
        }
    }
}

/// Interpreter state to rebuild for one activation when leaving a trace.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSnapshot {
    pub func: FuncId,
    /// Where the activation resumes: the guard's resume pc for the innermost
    /// frame, the return address for the others.
    pub pc: usize,
    pub slots: Vec<Operand>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuardDescr {
    pub id: GuardId,
    pub resume_pc: usize,
    /// Values the failure path needs, frame reference first.
    pub live: Vec<Var>,
    /// Virtualized activations (tracing tier). Empty when the trace works on
    /// the real frame, as baseline traces do.
    pub frames: Vec<FrameSnapshot>,
    pub fail_count: Cell<u32>,
    pub bridge: Cell<Option<TraceId>>,
}

impl GuardDescr {
    pub fn new(id: GuardId, resume_pc: usize, live: Vec<Var>) -> GuardDescr {
        GuardDescr {
            id,
            resume_pc,
            live,
            frames: Vec::new(),
            fail_count: Cell::new(0),
            bridge: Cell::new(None),
        }
    }

    /// Builds a descriptor from snapshots; the live list is the frame
    /// reference followed by every snapshot variable in first-use order.
    pub fn with_frames(id: GuardId, resume_pc: usize, frames: Vec<FrameSnapshot>) -> GuardDescr {
        let mut d = GuardDescr::new(id, resume_pc, Vec::new());
        d.frames = frames;
        d.recompute_live();
        d
    }

    pub fn recompute_live(&mut self) {
        let mut live = vec![FRAME];
        for v in self.frames.iter().flat_map(|f| f.slots.iter()).filter_map(|o| o.as_var()) {
            if !live.contains(&v) {
                live.push(v);
            }
        }
        self.live = live;
    }
}

/// Metadata of a suppressed control transfer recorded during method
/// traversal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cut {
    /// Where traversal continued: start of the next segment.
    pub resume: usize,
    /// The jump target the previous segment was heading to. `None` when the
    /// previous segment already ended in `finish`.
    pub target: Option<usize>,
    /// Pending guard whose failure path starts at `resume`.
    pub guard: GuardId,
    /// The transfer was a fall-through into an already traced block rather
    /// than an explicit `JUMP`.
    pub join: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Residual { handler: Handler, args: Vec<Operand>, result: Var },
    Prim { op: PrimOp, args: Vec<Operand>, result: Var },
    /// `expect == true` is `guard_true`.
    Guard { cond: Operand, expect: bool, descr: Box<GuardDescr> },
    CutMarker(Cut),
    Jump { token: Token, args: Vec<Operand> },
    Finish { value: Operand, exit: bool },
    Label { token: Token, params: Vec<Var> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceOp {
    pub kind: OpKind,
    pub origins: Vec<u32>,
}

impl TraceOp {
    pub fn new(kind: OpKind) -> TraceOp {
        TraceOp { kind, origins: Vec::new() }
    }

    pub fn with_origins(kind: OpKind, origins: Vec<u32>) -> TraceOp {
        TraceOp { kind, origins }
    }

    pub fn result(&self) -> Option<Var> {
        match &self.kind {
            OpKind::Residual { result, .. } | OpKind::Prim { result, .. } => Some(*result),
            _ => None,
        }
    }

    /// Every variable this op reads, including guard snapshots and label
    /// parameters.
    pub fn uses(&self) -> Vec<Var> {
        let operands = |args: &[Operand]| args.iter().filter_map(|a| a.as_var()).collect::<Vec<_>>();
        match &self.kind {
            OpKind::Residual { args, .. } | OpKind::Prim { args, .. } | OpKind::Jump { args, .. } => {
                operands(args)
            }
            OpKind::Guard { cond, descr, .. } => {
                let mut v: Vec<Var> = cond.as_var().into_iter().collect();
                v.extend(descr.live.iter().copied());
                v
            }
            OpKind::Finish { value, .. } => value.as_var().into_iter().collect(),
            OpKind::Label { params, .. } => params.clone(),
            OpKind::CutMarker(_) => Vec::new(),
        }
    }

    /// Rewrites every operand read by this op.
    pub fn map_operands(&mut self, mut f: impl FnMut(Operand) -> Operand) {
        match &mut self.kind {
            OpKind::Residual { args, .. } | OpKind::Prim { args, .. } | OpKind::Jump { args, .. } => {
                for a in args.iter_mut() {
                    *a = f(*a);
                }
            }
            OpKind::Guard { cond, descr, .. } => {
                *cond = f(*cond);
                if !descr.frames.is_empty() {
                    for s in descr.frames.iter_mut().flat_map(|fr| fr.slots.iter_mut()) {
                        *s = f(*s);
                    }
                    descr.recompute_live();
                } else {
                    let live = std::mem::take(&mut descr.live);
                    descr.live = live
                        .into_iter()
                        .filter_map(|v| if v == FRAME { Some(v) } else { f(Operand::Var(v)).as_var() })
                        .collect();
                }
            }
            OpKind::Finish { value, .. } => *value = f(*value),
            OpKind::Label { .. } | OpKind::CutMarker(_) => {}
        }
    }

    pub fn is_pure(&self) -> bool {
        matches!(self.kind, OpKind::Prim { .. })
    }

    pub fn is_terminator(&self) -> bool {
        matches!(self.kind, OpKind::Jump { .. } | OpKind::Finish { .. })
    }

    /// Counted toward trace size. Labels are bookkeeping.
    pub fn counts_as_op(&self) -> bool {
        !matches!(self.kind, OpKind::Label { .. })
    }

    pub fn guard(&self) -> Option<&GuardDescr> {
        match &self.kind {
            OpKind::Guard { descr, .. } => Some(descr),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceOrigin {
    pub func: FuncId,
    pub pc: usize,
    pub tier: Tier,
}

/// A recorded trace before it becomes (part of) a tree.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearTrace {
    pub inputs: Vec<Var>,
    pub ops: Vec<TraceOp>,
    pub origin: TraceOrigin,
    /// Instruction start pc to `(index of its first op, number of that op's
    /// origins that belong to earlier instructions)`. Baseline traces only;
    /// used to place labels.
    pub pc_index: BTreeMap<usize, (usize, usize)>,
    /// Jump tokens allocated while recording, with their target pc.
    pub labels: BTreeMap<Token, usize>,
    pub next_var: u32,
    pub next_guard: u32,
}

impl LinearTrace {
    pub fn op_count(&self) -> usize {
        self.ops.iter().filter(|o| o.counts_as_op()).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceKind {
    Root,
    Bridge(GuardId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompiledTrace {
    pub id: TraceId,
    pub kind: TraceKind,
    pub inputs: Vec<Var>,
    pub ops: Vec<TraceOp>,
}

impl CompiledTrace {
    pub fn op_count(&self) -> usize {
        self.ops.iter().filter(|o| o.counts_as_op()).count()
    }
}

/// A root trace plus the bridges attached to its guards.
///
/// Bridge attachment is the only mutation after construction and goes
/// through shared references, because an executor may be running the same
/// tree further up the stack (recursive guest functions).
#[derive(Debug)]
pub struct TraceTree {
    pub origin: TraceOrigin,
    traces: RefCell<Vec<Rc<CompiledTrace>>>,
    tokens: RefCell<BTreeMap<Token, (TraceId, usize)>>,
    guards: RefCell<BTreeMap<GuardId, (TraceId, usize)>>,
    next_var: Cell<u32>,
    next_guard: Cell<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum TreeError {
    #[error("no guard {0:?} in this tree")]
    NoSuchGuard(GuardId),
    #[error("guard {0:?} already has a bridge")]
    AlreadyAttached(GuardId),
    #[error("bridge inputs do not match the live list of guard {0:?}")]
    InputMismatch(GuardId),
    #[error("token {0:?} defined twice")]
    DuplicateToken(Token),
}

impl TraceTree {
    pub fn new(origin: TraceOrigin, inputs: Vec<Var>, ops: Vec<TraceOp>) -> Result<TraceTree, TreeError> {
        let mut max_var = inputs.iter().map(|v| v.0).max().unwrap_or(0);
        let mut max_guard = None;
        for op in &ops {
            max_var = max_var.max(op.result().map_or(0, |v| v.0));
            if let Some(g) = op.guard() {
                max_guard = max_guard.max(Some(g.id.0));
            }
        }
        let tree = TraceTree {
            origin,
            traces: RefCell::new(Vec::new()),
            tokens: RefCell::new(BTreeMap::new()),
            guards: RefCell::new(BTreeMap::new()),
            next_var: Cell::new(max_var + 1),
            next_guard: Cell::new(max_guard.map_or(0, |g| g + 1)),
        };
        tree.register(TraceKind::Root, inputs, ops)?;
        Ok(tree)
    }

    fn register(&self, kind: TraceKind, inputs: Vec<Var>, ops: Vec<TraceOp>) -> Result<TraceId, TreeError> {
        let id = TraceId(self.traces.borrow().len());
        let mut tokens = self.tokens.borrow_mut();
        let mut guards = self.guards.borrow_mut();
        let mut next_var = self.next_var.get();
        let mut next_guard = self.next_guard.get();
        for v in &inputs {
            next_var = next_var.max(v.0 + 1);
        }
        for (i, op) in ops.iter().enumerate() {
            if let Some(r) = op.result() {
                next_var = next_var.max(r.0 + 1);
            }
            match &op.kind {
                OpKind::Label { token, .. } => {
                    if tokens.insert(*token, (id, i)).is_some() {
                        return Err(TreeError::DuplicateToken(*token));
                    }
                }
                OpKind::Guard { descr, .. } => {
                    guards.insert(descr.id, (id, i));
                    next_guard = next_guard.max(descr.id.0 + 1);
                }
                _ => {}
            }
        }
        self.next_var.set(next_var);
        self.next_guard.set(next_guard);
        drop((tokens, guards));
        self.traces.borrow_mut().push(Rc::new(CompiledTrace { id, kind, inputs, ops }));
        Ok(id)
    }

    /// Installs `ops` as the bridge of `guard`. Refuses unknown guards,
    /// double attachment, and inputs that differ from the guard's live list.
    pub fn attach(&self, guard: GuardId, inputs: Vec<Var>, ops: Vec<TraceOp>) -> Result<TraceId, TreeError> {
        let (tid, idx) = *self.guards.borrow().get(&guard).ok_or(TreeError::NoSuchGuard(guard))?;
        let owner = self.trace(tid);
        let descr = owner.ops[idx].guard().expect("guard table points at a guard");
        if descr.bridge.get().is_some() {
            return Err(TreeError::AlreadyAttached(guard));
        }
        if descr.live != inputs {
            return Err(TreeError::InputMismatch(guard));
        }
        let id = self.register(TraceKind::Bridge(guard), inputs, ops)?;
        descr.bridge.set(Some(id));
        Ok(id)
    }

    pub fn root(&self) -> Rc<CompiledTrace> {
        self.trace(TraceId(0))
    }

    pub fn trace(&self, id: TraceId) -> Rc<CompiledTrace> {
        Rc::clone(&self.traces.borrow()[id.0])
    }

    pub fn traces(&self) -> Ref<'_, Vec<Rc<CompiledTrace>>> {
        self.traces.borrow()
    }

    pub fn len(&self) -> usize {
        self.traces.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, token: Token) -> Option<(TraceId, usize)> {
        self.tokens.borrow().get(&token).copied()
    }

    pub fn guard_location(&self, guard: GuardId) -> Option<(TraceId, usize)> {
        self.guards.borrow().get(&guard).copied()
    }

    /// Guard id → bridge trace, for every attached bridge.
    pub fn bridges(&self) -> BTreeMap<GuardId, TraceId> {
        self.traces
            .borrow()
            .iter()
            .filter_map(|t| match t.kind {
                TraceKind::Bridge(g) => Some((g, t.id)),
                TraceKind::Root => None,
            })
            .collect()
    }

    pub fn num_vars(&self) -> usize {
        self.next_var.get() as usize
    }

    pub fn fresh_var(&self) -> Var {
        let v = self.next_var.get();
        self.next_var.set(v + 1);
        Var(v)
    }

    pub fn next_var(&self) -> u32 {
        self.next_var.get()
    }

    pub fn next_guard(&self) -> u32 {
        self.next_guard.get()
    }

    /// Reserves guard ids and variables handed out by an external recorder.
    pub fn reserve(&self, next_var: u32, next_guard: u32) {
        self.next_var.set(self.next_var.get().max(next_var));
        self.next_guard.set(self.next_guard.get().max(next_guard));
    }

    pub fn op_count(&self) -> usize {
        self.traces.borrow().iter().map(|t| t.op_count()).sum()
    }

    /// Root token: the label the root trace starts with, if any.
    pub fn entry_token(&self) -> Option<Token> {
        match self.root().ops.first().map(|o| &o.kind) {
            Some(OpKind::Label { token, .. }) => Some(*token),
            _ => None,
        }
    }

    /// Rebuilds the tree with every trace's ops transformed; bridge links
    /// are preserved.
    pub fn map_traces(&self, mut f: impl FnMut(&CompiledTrace) -> CompiledTrace) -> Result<TraceTree, TreeError> {
        fn unlinked(mut t: CompiledTrace) -> CompiledTrace {
            for op in &mut t.ops {
                if let OpKind::Guard { descr, .. } = &mut op.kind {
                    descr.bridge = Cell::new(None);
                }
            }
            t
        }
        let traces = self.traces.borrow().clone();
        let root = unlinked(f(&traces[0]));
        let tree = TraceTree::new(self.origin, root.inputs, root.ops)?;
        for t in &traces[1..] {
            let t2 = unlinked(f(t));
            let TraceKind::Bridge(g) = t.kind else { unreachable!("only the first trace is a root") };
            tree.attach(g, t2.inputs, t2.ops)?;
        }
        tree.reserve(self.next_var.get(), self.next_guard.get());
        Ok(tree)
    }
}

impl Clone for TraceTree {
    fn clone(&self) -> Self {
        self.map_traces(|t| t.clone()).expect("cloning a valid tree")
    }
}

// ---------------------------------------------------------------------------
// Block graph

/// One straight-line block of a tree: starts at a trace start, a label, or
/// right after a guard.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub trace: TraceId,
    pub start: usize,
    pub end: usize,
    /// Ops other than labels and the closing jump.
    pub body_ops: usize,
    /// Ordered successors: a guard block lists (pass, fail).
    pub succs: Vec<usize>,
    /// A guard without a bridge: its failure leaves the tree.
    pub side_exit: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockGraph {
    pub blocks: Vec<Block>,
}

impl TraceTree {
    /// Control-flow graph over the blocks of the whole tree. Block 0 is the
    /// root trace's first block.
    pub fn block_graph(&self) -> BlockGraph {
        let traces = self.traces.borrow().clone();
        let mut starts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut spans = Vec::new();
        for t in &traces {
            let mut cuts = BTreeSet::from([0]);
            for (i, op) in t.ops.iter().enumerate() {
                match op.kind {
                    OpKind::Label { .. } => {
                        cuts.insert(i);
                    }
                    OpKind::Guard { .. } if i + 1 < t.ops.len() => {
                        cuts.insert(i + 1);
                    }
                    _ => {}
                }
            }
            let cuts: Vec<usize> = cuts.into_iter().collect();
            for (k, &s) in cuts.iter().enumerate() {
                let e = cuts.get(k + 1).copied().unwrap_or(t.ops.len());
                starts.insert((t.id.0, s), spans.len());
                spans.push((t.id.0, s, e));
            }
        }
        let label_block = |tok: Token| {
            let (tid, idx) = self.token(tok).expect("jump to a registered token");
            starts[&(tid.0, idx)]
        };
        let blocks = spans
            .iter()
            .map(|&(tid, s, e)| {
                let ops = &traces[tid].ops[s..e];
                let body_ops = ops
                    .iter()
                    .filter(|o| !matches!(o.kind, OpKind::Label { .. } | OpKind::Jump { .. }))
                    .count();
                let mut succs = Vec::new();
                let mut side_exit = false;
                match ops.last().map(|o| &o.kind) {
                    Some(OpKind::Guard { descr, .. }) => {
                        if e < traces[tid].ops.len() {
                            succs.push(starts[&(tid, e)]);
                        }
                        match descr.bridge.get() {
                            Some(b) => succs.push(starts[&(b.0, 0)]),
                            None => side_exit = true,
                        }
                    }
                    Some(OpKind::Jump { token, .. }) => succs.push(label_block(*token)),
                    Some(OpKind::Finish { .. }) | None => {}
                    Some(_) => {
                        if e < traces[tid].ops.len() {
                            succs.push(starts[&(tid, e)]);
                        }
                    }
                }
                Block { trace: TraceId(tid), start: s, end: e, body_ops, succs, side_exit }
            })
            .collect();
        BlockGraph { blocks }
    }
}

// ---------------------------------------------------------------------------
// Dumps

struct Names {
    map: HashMap<Var, String>,
    next: u32,
}

impl Names {
    fn new() -> Names {
        let mut map = HashMap::new();
        map.insert(FRAME, "p0".to_string());
        Names { map, next: 1 }
    }

    fn name(&mut self, v: Var) -> String {
        if let Some(n) = self.map.get(&v) {
            return n.clone();
        }
        let n = format!("i{}", self.next);
        self.next += 1;
        self.map.insert(v, n.clone());
        n
    }

    fn operand(&mut self, o: Operand) -> String {
        match o {
            Operand::Var(v) => self.name(v),
            Operand::Const(c) => c.to_string(),
        }
    }

    fn list(&mut self, ops: &[Operand]) -> String {
        ops.iter().map(|o| self.operand(*o)).collect::<Vec<_>>().join(", ")
    }

    fn vars(&mut self, vs: &[Var]) -> String {
        vs.iter().map(|v| self.name(*v)).collect::<Vec<_>>().join(", ")
    }
}

fn dump_op(out: &mut String, op: &TraceOp, names: &mut Names, show_bridges: bool) {
    match &op.kind {
        OpKind::Residual { handler, args, result } => {
            let args = names.list(args);
            let r = names.name(*result);
            let _ = write!(out, "{r} = call_i(ConstClass({}), {args})", handler.name());
        }
        OpKind::Prim { op, args, result } => {
            let args = names.list(args);
            let r = names.name(*result);
            let _ = write!(out, "{r} = {}({args})", op.name());
        }
        OpKind::Guard { cond, expect, descr } => {
            let c = names.operand(*cond);
            let live = names.vars(&descr.live);
            let kind = if *expect { "guard_true" } else { "guard_false" };
            let _ = write!(out, "{kind}({c}) [{live}] descr=<Guard{} resume={}", descr.id.0, descr.resume_pc);
            if !descr.frames.is_empty() {
                let frames: Vec<String> = descr
                    .frames
                    .iter()
                    .map(|f| format!("f{}@{}: {}", f.func, f.pc, names.list(&f.slots)))
                    .collect();
                let _ = write!(out, " frames=({})", frames.join(" | "));
            }
            out.push('>');
            if show_bridges {
                if let Some(b) = descr.bridge.get() {
                    let _ = write!(out, " # -> Bridge {}", b.0);
                }
            }
        }
        OpKind::CutMarker(cut) => {
            let _ = write!(out, "cut_here({}) descr=<Cut target=", cut.resume);
            match cut.target {
                Some(t) => {
                    let _ = write!(out, "{t}");
                }
                None => out.push_str("none"),
            }
            let _ = write!(out, " guard={}{}>", cut.guard.0, if cut.join { " join" } else { "" });
        }
        OpKind::Jump { token, args } => {
            let args = names.list(args);
            let _ = write!(out, "jump({args}, descr=TargetToken({}))", token.0);
        }
        OpKind::Label { token, params } => {
            let params = names.vars(params);
            let _ = write!(out, "label({params}, descr=TargetToken({}))", token.0);
        }
        OpKind::Finish { value, exit } => {
            let v = names.operand(*value);
            if *exit {
                let _ = write!(out, "finish({v}, descr=exit)");
            } else {
                let _ = write!(out, "finish({v})");
            }
        }
    }
    out.push('\n');
}

impl LinearTrace {
    /// Text form: the input list, then one op per line.
    pub fn dump(&self) -> String {
        let mut names = Names::new();
        let mut out = format!("[{}]\n", names.vars(&self.inputs));
        for op in &self.ops {
            dump_op(&mut out, op, &mut names, false);
        }
        out
    }
}

impl TraceTree {
    /// Root first, then bridges in attachment order, each under a `#`
    /// header.
    pub fn dump(&self) -> String {
        let mut names = Names::new();
        let mut out = String::new();
        for t in self.traces.borrow().iter() {
            if !out.is_empty() {
                out.push('\n');
            }
            match t.kind {
                TraceKind::Root => {
                    let is_loop = self.entry_token().is_some_and(|tok| {
                        t.ops.iter().any(|o| matches!(o.kind, OpKind::Jump { token, .. } if token == tok))
                    });
                    let kind = if is_loop { "Loop" } else { "Entry" };
                    let _ = writeln!(out, "# {kind} 0, function {} at pc {}", self.origin.func, self.origin.pc);
                }
                TraceKind::Bridge(g) => {
                    let _ = writeln!(out, "# Bridge {} from guard {}", t.id.0, g.0);
                }
            }
            let _ = writeln!(out, "[{}]", names.vars(&t.inputs));
            for op in &t.ops {
                dump_op(&mut out, op, &mut names, true);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Well-formedness

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceDiagnostic {
    pub trace: usize,
    pub op: usize,
    pub message: String,
}

impl fmt::Display for TraceDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "trace {} op {}: {}", self.trace, self.op, self.message)
    }
}

struct Checker<'a> {
    out: Vec<TraceDiagnostic>,
    defined: HashSet<Var>,
    tier: Tier,
    trace: usize,
    labels_in_trace: &'a dyn Fn(Token) -> Option<usize>,
}

impl Checker<'_> {
    fn report(&mut self, op: usize, message: impl Into<String>) {
        self.out.push(TraceDiagnostic { trace: self.trace, op, message: message.into() });
    }

    /// SSA and scope checks over one op sequence. `scope` starts as the
    /// trace inputs and is reset to the label parameters at every label.
    fn walk(&mut self, inputs: &[Var], ops: &[TraceOp], linear: bool) {
        let mut scope: HashSet<Var> = inputs.iter().copied().collect();
        for v in inputs {
            self.defined.insert(*v);
        }
        if !inputs.contains(&FRAME) {
            self.report(0, "inputs lack the frame reference");
        }
        for (i, op) in ops.iter().enumerate() {
            if let OpKind::Label { token, params } = &op.kind {
                if let Some(missing) = params.iter().find(|p| !scope.contains(p)) {
                    self.report(i, format!("label parameter {missing:?} undefined"));
                }
                if (self.labels_in_trace)(*token) != Some(i) {
                    self.report(i, format!("label {token:?} not registered at this position"));
                }
                scope = params.iter().copied().collect();
                continue;
            }
            for u in op.uses() {
                if !scope.contains(&u) {
                    self.report(i, format!("use of {u:?} before its definition"));
                }
            }
            if let Some(r) = op.result() {
                if !self.defined.insert(r) {
                    self.report(i, format!("{r:?} defined twice"));
                }
                scope.insert(r);
            }
            match &op.kind {
                OpKind::Prim { op: p, args, .. } => {
                    if self.tier == Tier::Baseline {
                        self.report(i, "tier purity: primitive op in a baseline trace");
                    }
                    if args.len() != p.arity() {
                        self.report(i, "primitive arity mismatch");
                    }
                }
                OpKind::CutMarker(_) => {
                    if !linear {
                        self.report(i, "cut marker survived stitching");
                    } else if self.tier == Tier::Tracing {
                        self.report(i, "tier purity: cut marker in a tracing-tier trace");
                    }
                }
                OpKind::Jump { .. } | OpKind::Finish { .. } if i + 1 < ops.len() => {
                    let next_is_cut = matches!(ops[i + 1].kind, OpKind::CutMarker(_));
                    if !(linear && next_is_cut) {
                        self.report(i, "terminator before the end of the trace");
                    }
                }
                _ => {}
            }
        }
        match ops.last() {
            Some(op) if op.is_terminator() => {}
            _ => self.report(ops.len().saturating_sub(1), "trace does not end in jump or finish"),
        }
    }
}

impl LinearTrace {
    pub fn check_wellformed(&self) -> Vec<TraceDiagnostic> {
        let labels: HashMap<Token, usize> = self
            .ops
            .iter()
            .enumerate()
            .filter_map(|(i, o)| match o.kind {
                OpKind::Label { token, .. } => Some((token, i)),
                _ => None,
            })
            .collect();
        let lookup = |t: Token| labels.get(&t).copied();
        let mut c = Checker {
            out: Vec::new(),
            defined: HashSet::new(),
            tier: self.origin.tier,
            trace: 0,
            labels_in_trace: &lookup,
        };
        c.walk(&self.inputs, &self.ops, true);
        for (i, op) in self.ops.iter().enumerate() {
            if let OpKind::Jump { token, .. } = op.kind {
                if !labels.contains_key(&token) && !self.labels.contains_key(&token) {
                    c.report(i, format!("jump to unknown token {token:?}"));
                }
            }
        }
        c.out
    }
}

impl TraceTree {
    pub fn check_wellformed(&self) -> Vec<TraceDiagnostic> {
        let traces = self.traces.borrow().clone();
        let mut out = Vec::new();
        let mut defined = HashSet::new();
        for t in &traces {
            let tid = t.id;
            let lookup = |tok: Token| self.token(tok).filter(|(owner, _)| *owner == tid).map(|(_, i)| i);
            let mut c = Checker {
                out: Vec::new(),
                defined: std::mem::take(&mut defined),
                tier: self.origin.tier,
                trace: t.id.0,
                labels_in_trace: &lookup,
            };
            // Inputs of a bridge are the guard's values, already defined.
            if let TraceKind::Bridge(_) = t.kind {
                for v in &t.inputs {
                    c.defined.remove(v);
                }
            }
            c.walk(&t.inputs, &t.ops, false);
            for (i, op) in t.ops.iter().enumerate() {
                match &op.kind {
                    OpKind::Jump { token, args } => match self.token(*token) {
                        None => c.report(i, format!("jump to unknown token {token:?}")),
                        Some((owner, idx)) => {
                            let target = &traces[owner.0].ops[idx];
                            if let OpKind::Label { params, .. } = &target.kind {
                                if params.len() != args.len() {
                                    c.report(i, "jump arity differs from its label");
                                }
                            } else {
                                c.report(i, "token does not point at a label");
                            }
                        }
                    },
                    OpKind::Guard { descr, .. } => {
                        if let Some(b) = descr.bridge.get() {
                            match traces.get(b.0) {
                                Some(bt) if bt.kind == TraceKind::Bridge(descr.id) => {
                                    if bt.inputs != descr.live {
                                        c.report(i, "bridge inputs differ from the guard's live list");
                                    }
                                }
                                _ => c.report(i, "guard points at a trace that is not its bridge"),
                            }
                        }
                    }
                    _ => {}
                }
            }
            if let TraceKind::Bridge(g) = t.kind {
                match self.guard_location(g) {
                    Some((owner, idx)) if owner.0 < t.id.0 => {
                        let d = traces[owner.0].ops[idx].guard().expect("guard");
                        if d.bridge.get() != Some(t.id) {
                            c.report(0, "bridge not linked from its guard");
                        }
                    }
                    _ => c.report(0, "bridge guard not found in an earlier trace"),
                }
            }
            defined = std::mem::take(&mut c.defined);
            out.extend(c.out);
        }
        out
    }
}
