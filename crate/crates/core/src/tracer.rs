//! Trace recording for both tiers.
//!
//! The tracing tier runs a recording interpreter: it executes the guest
//! concretely through the ordinary handlers while mirroring the operand
//! stack symbolically, so stack shuffling compiles to nothing and arithmetic
//! becomes primitive ops. Calls are inlined, branches become guards on the
//! direction actually taken.
//!
//! The baseline tier's method traversal never executes anything. It walks
//! the bytecode of one function, emits a residual call per handler, takes
//! the fall-through side of every conditional first and remembers the other
//! side on the traverse stack. Control transfers it cannot follow are
//! recorded as cut markers for the stitcher.

use std::collections::{BTreeMap, HashSet};

use thiserror::Error;

use crate::bytecode::{FuncId, Insn, Opcode, Program};
use crate::ir::{
    Cut, FrameSnapshot, GuardDescr, GuardId, Handler, LinearTrace, OpKind, Operand, PrimOp, Tier, Token, TraceOp,
    TraceOrigin, TraceTree, Var, FRAME,
};
use crate::vm::{execute_handler, Backend, Completion, Flow, Frame, VmError};
use crate::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Limits {
    pub budget: usize,
    pub max_inline_depth: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { budget: 5000, max_inline_depth: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum TraceAbort {
    #[error("abort budget of {0} ops exceeded")]
    Budget(usize),
    #[error("returned out of the traced loop")]
    LeftLoop,
    #[error("reached a different loop at pc {0}")]
    OtherLoop(usize),
    #[error("operand stack depth at the loop head changed")]
    StackMismatch,
    #[error("the program exited while recording")]
    Exited,
    #[error("control left the function body at pc {0}")]
    OutsideFunction(usize),
    #[error("no valid instruction at pc {0}")]
    BadInstruction(usize),
    #[error("guard has no frame snapshot to trace from")]
    NoSnapshot,
}

// ---------------------------------------------------------------------------
// Method traversal

/// Pending branch directions of a traversal, each paired with the guard
/// whose failure leads there.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TraverseStack {
    entries: Vec<(usize, GuardId)>,
    pushes: usize,
    pops: usize,
}

impl TraverseStack {
    pub fn push(&mut self, pc: usize, guard: GuardId) {
        self.pushes += 1;
        self.entries.push((pc, guard));
    }

    pub fn pop(&mut self) -> Option<(usize, GuardId)> {
        let e = self.entries.pop();
        self.pops += e.is_some() as usize;
        e
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn pushes(&self) -> usize {
        self.pushes
    }

    pub fn pops(&self) -> usize {
        self.pops
    }
}

enum Step {
    Goto { pc: usize, jump: bool },
    Finished,
}

struct Traversal<'a> {
    program: &'a Program,
    body: (usize, usize),
    budget: usize,
    ops: Vec<TraceOp>,
    pending: Vec<u32>,
    visited: HashSet<usize>,
    tstack: TraverseStack,
    pc_index: BTreeMap<usize, (usize, usize)>,
    tokens: BTreeMap<usize, Token>,
    next_var: u32,
    next_guard: u32,
}

impl Traversal<'_> {
    fn emit(&mut self, kind: OpKind) {
        let origins = std::mem::take(&mut self.pending);
        self.ops.push(TraceOp::with_origins(kind, origins));
    }

    fn residual(&mut self, handler: Handler, pc: usize) -> Var {
        let result = Var(self.next_var);
        self.next_var += 1;
        let args = vec![Operand::Var(FRAME), Operand::Const(pc as Value + 1)];
        self.emit(OpKind::Residual { handler, args, result });
        result
    }

    fn token(&mut self, pc: usize) -> Token {
        let n = self.tokens.len() as u32;
        *self.tokens.entry(pc).or_insert(Token(n))
    }

    /// Follows already traced blocks that consist of a lone JUMP, so a label
    /// lands on code that emitted ops. The skipped pcs are returned so the
    /// jump can still report them as executed.
    fn resolve(&self, mut pc: usize) -> (usize, Vec<u32>) {
        let mut chain = Vec::new();
        let mut seen = HashSet::new();
        while let Some(insn) = self.program.decode(pc) {
            if insn.op != Opcode::Jump || !self.visited.contains(&pc) || !seen.insert(pc) {
                break;
            }
            chain.push(pc as u32);
            pc = insn.target().expect("JUMP has a target");
        }
        (pc, chain)
    }

    /// The special rules for control-flow handlers.
    fn traverse_control(&mut self, insn: Insn) -> Step {
        match insn.op {
            Opcode::JumpIf => {
                let cond = self.residual(Handler::IsTrue, insn.pc);
                let guard = GuardId(self.next_guard);
                self.next_guard += 1;
                let target = insn.target().expect("JUMP_IF has a target");
                let descr = GuardDescr::new(guard, target, vec![FRAME]);
                self.emit(OpKind::Guard { cond: cond.into(), expect: true, descr: Box::new(descr) });
                self.tstack.push(target, guard);
                Step::Goto { pc: insn.next_pc(), jump: false }
            }
            Opcode::Jump => Step::Goto { pc: insn.target().expect("JUMP has a target"), jump: true },
            Opcode::Ret | Opcode::Exit => {
                let r = self.residual(Handler::Op(insn.op), insn.pc);
                self.emit(OpKind::Finish { value: r.into(), exit: insn.op == Opcode::Exit });
                Step::Finished
            }
            Opcode::Call => {
                self.residual(Handler::Op(Opcode::Call), insn.pc);
                Step::Goto { pc: insn.next_pc(), jump: false }
            }
            op => unreachable!("{op} is not a control-flow handler"),
        }
    }

    /// Moves control to `pc`. Returns where traversal continues, or `None`
    /// once the trace is sealed.
    fn transfer(&mut self, mut pc: usize, mut jump: bool) -> Option<usize> {
        loop {
            if !self.visited.contains(&pc) {
                return Some(pc);
            }
            let (target, chain) = self.resolve(pc);
            self.pending.extend(chain);
            let token = self.token(target);
            match self.tstack.pop() {
                None => {
                    self.emit(OpKind::Jump { token, args: vec![Operand::Var(FRAME)] });
                    return None;
                }
                Some((resume, guard)) => {
                    self.emit(OpKind::CutMarker(Cut { resume, target: Some(target), guard, join: !jump }));
                    pc = resume;
                    jump = false;
                }
            }
        }
    }

    /// After a `finish`: continue with the next pending direction.
    fn unwind(&mut self) -> Option<usize> {
        let (resume, guard) = self.tstack.pop()?;
        self.emit(OpKind::CutMarker(Cut { resume, target: None, guard, join: false }));
        self.transfer(resume, false)
    }
}

/// Abstractly traverses every path of `func` into one linear trace.
pub fn trace_method(program: &Program, func: FuncId, budget: usize) -> Result<LinearTrace, TraceAbort> {
    let (trace, _) = trace_method_with_stack(program, func, budget)?;
    Ok(trace)
}

/// Like [`trace_method`], also returning the final traverse stack so its
/// push/pop balance can be inspected.
pub fn trace_method_with_stack(
    program: &Program,
    func: FuncId,
    budget: usize,
) -> Result<(LinearTrace, TraverseStack), TraceAbort> {
    let body = program.body(func);
    let mut t = Traversal {
        program,
        body,
        budget,
        ops: Vec::new(),
        pending: Vec::new(),
        visited: HashSet::new(),
        tstack: TraverseStack::default(),
        pc_index: BTreeMap::new(),
        tokens: BTreeMap::new(),
        next_var: 1,
        next_guard: 0,
    };
    let mut pc = body.0;
    loop {
        if t.ops.len() > t.budget {
            return Err(TraceAbort::Budget(t.budget));
        }
        if pc < t.body.0 || pc >= t.body.1 {
            return Err(TraceAbort::OutsideFunction(pc));
        }
        let insn = program.decode(pc).ok_or(TraceAbort::BadInstruction(pc))?;
        if insn.next_pc() > t.body.1 {
            return Err(TraceAbort::OutsideFunction(insn.next_pc()));
        }
        t.visited.insert(pc);
        t.pc_index.insert(pc, (t.ops.len(), t.pending.len()));
        t.pending.push(pc as u32);
        let step = match insn.op {
            Opcode::JumpIf | Opcode::Jump | Opcode::Ret | Opcode::Exit | Opcode::Call => t.traverse_control(insn),
            op => {
                t.residual(Handler::Op(op), pc);
                Step::Goto { pc: insn.next_pc(), jump: false }
            }
        };
        let next = match step {
            Step::Goto { pc, jump } => t.transfer(pc, jump),
            Step::Finished => t.unwind(),
        };
        match next {
            Some(n) => pc = n,
            None => break,
        }
    }
    let labels = t.tokens.iter().map(|(pc, tok)| (*tok, *pc)).collect();
    let trace = LinearTrace {
        inputs: vec![FRAME],
        ops: t.ops,
        origin: TraceOrigin { func, pc: body.0, tier: Tier::Baseline },
        pc_index: t.pc_index,
        labels,
        next_var: t.next_var,
        next_guard: t.next_guard,
    };
    Ok((trace, t.tstack))
}

// ---------------------------------------------------------------------------
// Recording interpreter

/// Interpreter state after a recording session, real whether or not a trace
/// was produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RecState {
    /// Continue interpreting these frames (outermost first).
    Frames(Vec<Frame>),
    /// The outermost recorded frame returned.
    Return(Value),
    /// The program exited.
    Exit(Value),
}

#[derive(Clone, Debug)]
pub struct Recording {
    pub trace: Option<LinearTrace>,
    pub state: RecState,
    pub abort: Option<TraceAbort>,
}

#[derive(Clone, Copy)]
enum Goal {
    /// Close with a jump to `token` on a back-edge to `head` in the
    /// outermost frame, whose stack must then hold `depth` values.
    Loop { head: usize, depth: usize, token: Token },
    /// Close with `finish` when the outermost frame returns.
    Function,
}

struct RFrame {
    frame: Frame,
    sym: Vec<Operand>,
}

enum Outcome {
    Closed,
    Finished(RecState),
    Aborted(TraceAbort, RecState),
}

struct Recorder<'a, 'b> {
    program: &'a Program,
    backend: &'b mut dyn Backend,
    limits: Limits,
    frames: Vec<RFrame>,
    ops: Vec<TraceOp>,
    pending: Vec<u32>,
    next_var: u32,
    next_guard: u32,
    goal: Goal,
    /// Loop roots may not leave the loop's frame; bridges and function
    /// traces may.
    loop_root: bool,
}

impl Recorder<'_, '_> {
    fn emit(&mut self, kind: OpKind) {
        let origins = std::mem::take(&mut self.pending);
        self.ops.push(TraceOp::with_origins(kind, origins));
    }

    fn fresh(&mut self) -> Var {
        let v = Var(self.next_var);
        self.next_var += 1;
        v
    }

    fn concrete(&self) -> Vec<Frame> {
        self.frames.iter().map(|f| f.frame.clone()).collect()
    }

    fn abort(&self, why: TraceAbort) -> Outcome {
        Outcome::Aborted(why, RecState::Frames(self.concrete()))
    }

    fn snapshot(&self, resume: usize) -> Vec<FrameSnapshot> {
        let last = self.frames.len() - 1;
        self.frames
            .iter()
            .enumerate()
            .map(|(i, f)| FrameSnapshot {
                func: f.frame.func,
                pc: if i == last { resume } else { f.frame.pc },
                slots: f.sym.clone(),
            })
            .collect()
    }

    fn run(&mut self) -> Result<Outcome, VmError> {
        let program = self.program;
        loop {
            if self.ops.len() > self.limits.budget {
                return Ok(self.abort(TraceAbort::Budget(self.limits.budget)));
            }
            let depth = self.frames.len() - 1;
            let top = self.frames.last_mut().expect("recording a live frame");
            let pc = top.frame.pc;
            let insn = program.decode(pc).ok_or(VmError::BadInstruction { pc })?;
            let cond_value = top.frame.stack.last().copied();
            self.backend.note_dispatch();
            self.backend.note_handler(pc as u32);
            self.pending.push(pc as u32);
            let flow = execute_handler(program, insn.op, &mut top.frame, pc + 1)?;
            let operand = insn.operand.unwrap_or(0);
            let sym = &mut top.sym;
            match insn.op {
                Opcode::Nop | Opcode::Jump => {}
                Opcode::ConstInt => sym.push(Operand::Const(operand as Value)),
                Opcode::Dup => {
                    let t = *sym.last().expect("mirrors the concrete stack");
                    sym.push(t);
                }
                Opcode::Pop => {
                    sym.pop();
                }
                Opcode::Load => {
                    let v = sym[operand as usize];
                    sym.push(v);
                }
                Opcode::Store => {
                    let v = sym.pop().expect("mirrors the concrete stack");
                    sym[operand as usize] = v;
                }
                Opcode::Add | Opcode::Sub | Opcode::Mul | Opcode::Gt | Opcode::Lt | Opcode::Eq => {
                    let b = sym.pop().expect("mirrors the concrete stack");
                    let a = sym.pop().expect("mirrors the concrete stack");
                    let prim = PrimOp::from_opcode(insn.op).expect("binary opcode");
                    let result = self.fresh();
                    self.emit(OpKind::Prim { op: prim, args: vec![a, b], result });
                    self.frames[depth].sym.push(result.into());
                }
                Opcode::JumpIf => {
                    let c = sym.pop().expect("mirrors the concrete stack");
                    if let Operand::Var(_) = c {
                        let taken = cond_value.expect("handler checked the stack") != 0;
                        let target = insn.target().expect("JUMP_IF has a target");
                        let resume = if taken { target } else { insn.next_pc() };
                        let id = GuardId(self.next_guard);
                        self.next_guard += 1;
                        let descr = GuardDescr::with_frames(id, resume, self.snapshot(resume));
                        self.emit(OpKind::Guard { cond: c, expect: taken, descr: Box::new(descr) });
                    }
                }
                Opcode::Call => {
                    let Flow::Call { func, args, ret_pc } = flow else { unreachable!("CALL yields a call") };
                    let arg_syms = sym.split_off(sym.len() - args.len());
                    top.frame.pc = ret_pc;
                    if depth < self.limits.max_inline_depth {
                        let frame = Frame::new(program, func, args);
                        self.frames.push(RFrame { frame, sym: arg_syms });
                    } else {
                        let result = self.fresh();
                        let mut call_args = vec![Operand::Const(program.functions[func].entry as Value)];
                        call_args.extend(arg_syms);
                        self.emit(OpKind::Residual { handler: Handler::Invoke, args: call_args, result });
                        match self.backend.invoke(func, args)? {
                            Completion::Return(v) => {
                                let top = &mut self.frames[depth];
                                top.frame.stack.push(v);
                                top.sym.push(result.into());
                            }
                            Completion::Halt(v) => return Ok(Outcome::Aborted(TraceAbort::Exited, RecState::Exit(v))),
                        }
                    }
                    continue;
                }
                Opcode::Ret | Opcode::Exit => {
                    let v = sym.pop().expect("mirrors the concrete stack");
                    match flow {
                        Flow::Return(value) if depth > 0 => {
                            self.frames.pop();
                            let caller = self.frames.last_mut().expect("caller frame");
                            caller.frame.stack.push(value);
                            caller.sym.push(v);
                            continue;
                        }
                        Flow::Return(value) => {
                            if self.loop_root {
                                return Ok(Outcome::Aborted(TraceAbort::LeftLoop, RecState::Return(value)));
                            }
                            self.emit(OpKind::Finish { value: v, exit: false });
                            return Ok(Outcome::Finished(RecState::Return(value)));
                        }
                        Flow::Exit(value) => {
                            if self.loop_root {
                                return Ok(Outcome::Aborted(TraceAbort::Exited, RecState::Exit(value)));
                            }
                            self.emit(OpKind::Finish { value: v, exit: true });
                            return Ok(Outcome::Finished(RecState::Exit(value)));
                        }
                        _ => unreachable!("RET and EXIT leave the frame"),
                    }
                }
            }
            let Flow::Next(next) = flow else { unreachable!("remaining handlers continue in the frame") };
            self.frames[depth].frame.pc = next;
            let backward = matches!(insn.op, Opcode::Jump | Opcode::JumpIf) && next <= pc;
            if backward && depth == 0 {
                return Ok(match self.goal {
                    Goal::Loop { head, depth: d, token } if next == head => {
                        let sym = self.frames[0].sym.clone();
                        if sym.len() != d {
                            self.abort(TraceAbort::StackMismatch)
                        } else {
                            let mut args = vec![Operand::Var(FRAME)];
                            args.extend(sym);
                            self.emit(OpKind::Jump { token, args });
                            Outcome::Closed
                        }
                    }
                    _ => self.abort(TraceAbort::OtherLoop(next)),
                });
            }
        }
    }

    fn finish(mut self, inputs: Vec<Var>, origin: TraceOrigin, labels: BTreeMap<Token, usize>) -> Result<Recording, VmError> {
        let outcome = self.run()?;
        let (ok, state, abort) = match outcome {
            Outcome::Closed => (true, RecState::Frames(self.concrete()), None),
            Outcome::Finished(state) => (true, state, None),
            Outcome::Aborted(why, state) => (false, state, Some(why)),
        };
        let trace = ok.then(|| LinearTrace {
            inputs,
            ops: self.ops,
            origin,
            pc_index: BTreeMap::new(),
            labels,
            next_var: self.next_var,
            next_guard: self.next_guard,
        });
        Ok(Recording { trace, state, abort })
    }
}

fn root_inputs(frame: &Frame) -> (Vec<Var>, Vec<Operand>) {
    let vars: Vec<Var> = (1..=frame.stack.len() as u32).map(Var).collect();
    let mut inputs = vec![FRAME];
    inputs.extend(&vars);
    (inputs, vars.into_iter().map(Operand::Var).collect())
}

/// Records one iteration of the loop whose head `frame` is positioned at.
pub fn trace_loop(program: &Program, backend: &mut dyn Backend, limits: Limits, frame: Frame) -> Result<Recording, VmError> {
    let head = frame.pc;
    let origin = TraceOrigin { func: frame.func, pc: head, tier: Tier::Tracing };
    let (inputs, sym) = root_inputs(&frame);
    let token = Token(0);
    let label = TraceOp::new(OpKind::Label { token, params: inputs.clone() });
    let rec = Recorder {
        program,
        backend,
        limits,
        next_var: inputs.len() as u32,
        goal: Goal::Loop { head, depth: sym.len(), token },
        frames: vec![RFrame { frame, sym }],
        ops: vec![label],
        pending: Vec::new(),
        next_guard: 0,
        loop_root: true,
    };
    rec.finish(inputs, origin, BTreeMap::from([(token, head)]))
}

/// Records a whole activation of the function `frame` was just entered
/// into, until it returns.
pub fn trace_function(program: &Program, backend: &mut dyn Backend, limits: Limits, frame: Frame) -> Result<Recording, VmError> {
    let origin = TraceOrigin { func: frame.func, pc: frame.pc, tier: Tier::Tracing };
    let (inputs, sym) = root_inputs(&frame);
    let rec = Recorder {
        program,
        backend,
        limits,
        next_var: inputs.len() as u32,
        goal: Goal::Function,
        frames: vec![RFrame { frame, sym }],
        ops: Vec::new(),
        pending: Vec::new(),
        next_guard: 0,
        loop_root: false,
    };
    rec.finish(inputs, origin, BTreeMap::new())
}

/// Records the path starting at a failing guard of `tree`. `frames` are the
/// interpreter frames rebuilt from the guard's snapshot.
pub fn trace_bridge(
    program: &Program,
    backend: &mut dyn Backend,
    limits: Limits,
    tree: &TraceTree,
    guard: GuardId,
    frames: Vec<Frame>,
) -> Result<Recording, VmError> {
    let descr = tree.guard_location(guard).and_then(|(tid, idx)| tree.trace(tid).ops[idx].guard().cloned());
    let descr = match descr {
        Some(d) if d.frames.len() == frames.len() => d,
        _ => {
            return Ok(Recording { trace: None, state: RecState::Frames(frames), abort: Some(TraceAbort::NoSnapshot) })
        }
    };
    let goal = match tree.entry_token() {
        Some(token) => Goal::Loop { head: tree.origin.pc, depth: tree.root().inputs.len() - 1, token },
        None => Goal::Function,
    };
    let origin = TraceOrigin { func: frames[0].func, pc: descr.resume_pc, tier: Tier::Tracing };
    let rframes = frames
        .into_iter()
        .zip(&descr.frames)
        .map(|(frame, snap)| RFrame { frame, sym: snap.slots.clone() })
        .collect();
    let rec = Recorder {
        program,
        backend,
        limits,
        next_var: tree.next_var(),
        goal,
        frames: rframes,
        ops: Vec::new(),
        pending: Vec::new(),
        next_guard: tree.next_guard(),
        loop_root: false,
    };
    rec.finish(descr.live.clone(), origin, BTreeMap::new())
}
