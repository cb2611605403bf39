//! Runs compiled trees against a live frame.
//!
//! Residual calls go straight to the handler named in the op; nothing is
//! decoded, so a tree never counts a dispatch. Each op first reports the
//! guest instructions it stands for, which keeps the executed-instruction
//! stream identical to the interpreter's.

use std::rc::Rc;

use crate::bytecode::Program;
use crate::ir::{CompiledTrace, GuardDescr, GuardId, Handler, OpKind, Operand, TraceId, TraceOp, TraceTree, TreeError, Var};
use crate::vm::{execute_handler, truth_test, Action, Backend, Completion, Flow, Frame, Site, VmError};
use crate::Value;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TreeExit {
    /// The frame the tree was entered with returned this value.
    Return(Value),
    /// The program exited.
    Exit(Value),
    /// Left the tree at a guard without a bridge; interpretation continues
    /// with these frames, outermost first.
    SideExit { guard: GuardId, frames: Vec<Frame> },
    /// Same as a side exit, but the guard just became hot and wants a
    /// bridge recorded from here.
    StartBridge { guard: GuardId, frames: Vec<Frame> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Continuation {
    EnterBridge(TraceId),
    ResumeInterpreter,
    StartBridgeTracing,
}

/// Decides where a failing guard leads. Counts the failure unless a bridge
/// takes over.
pub fn handle_guard_failure(descr: &GuardDescr, backend: &mut dyn Backend) -> Continuation {
    if let Some(b) = descr.bridge.get() {
        return Continuation::EnterBridge(b);
    }
    match backend.profile_point(Site::GuardFail(descr)) {
        Action::StartBridge => Continuation::StartBridgeTracing,
        _ => Continuation::ResumeInterpreter,
    }
}

/// Installs `ops` as the bridge of `guard`.
pub fn attach_bridge(tree: &TraceTree, guard: GuardId, inputs: Vec<Var>, ops: Vec<TraceOp>) -> Result<TraceId, TreeError> {
    tree.attach(guard, inputs, ops)
}

struct Env(Vec<Value>);

impl Env {
    fn get(&self, o: Operand) -> Value {
        match o {
            Operand::Const(c) => c,
            Operand::Var(v) => self.0[v.0 as usize],
        }
    }

    fn set(&mut self, v: Var, x: Value) {
        let i = v.0 as usize;
        if i >= self.0.len() {
            self.0.resize(i + 1, 0);
        }
        self.0[i] = x;
    }
}

fn materialize(descr: &GuardDescr, env: &Env, frame: Frame) -> Vec<Frame> {
    if descr.frames.is_empty() {
        let mut f = frame;
        f.pc = descr.resume_pc;
        return vec![f];
    }
    descr
        .frames
        .iter()
        .map(|s| Frame { func: s.func, pc: s.pc, stack: s.slots.iter().map(|o| env.get(*o)).collect() })
        .collect()
}

/// Executes `tree` from its root. The frame must be positioned at the
/// tree's entry; for trees with value inputs its stack supplies them.
pub fn execute_tree(tree: &TraceTree, program: &Program, frame: Frame, backend: &mut dyn Backend) -> Result<TreeExit, VmError> {
    let mut frame = frame;
    let mut trace: Rc<CompiledTrace> = tree.root();
    let mut env = Env(vec![0; tree.num_vars()]);
    for (v, x) in trace.inputs[1..].iter().zip(&frame.stack) {
        env.set(*v, *x);
    }
    let mut i = 0;
    loop {
        let op = &trace.ops[i];
        for pc in &op.origins {
            backend.note_handler(*pc);
        }
        match &op.kind {
            OpKind::Label { .. } => i += 1,
            OpKind::Residual { handler, args, result } => {
                backend.note_residual();
                let value = match handler {
                    Handler::Op(opcode) => {
                        let operand_pc = env.get(args[1]) as usize;
                        match execute_handler(program, *opcode, &mut frame, operand_pc)? {
                            Flow::Next(pc) => pc as Value,
                            Flow::Return(v) | Flow::Exit(v) => v,
                            Flow::Call { func, args, ret_pc } => match backend.invoke(func, args)? {
                                Completion::Return(v) => {
                                    frame.stack.push(v);
                                    ret_pc as Value
                                }
                                Completion::Halt(v) => return Ok(TreeExit::Exit(v)),
                            },
                        }
                    }
                    Handler::IsTrue => {
                        let pc = env.get(args[1]) as usize - 1;
                        truth_test(&mut frame, pc)?
                    }
                    Handler::Invoke => {
                        let entry = env.get(args[0]) as usize;
                        let func = program.function_at_entry(entry).ok_or(VmError::BadCall { pc: entry, target: entry })?;
                        let vals = args[1..].iter().map(|a| env.get(*a)).collect();
                        match backend.invoke(func, vals)? {
                            Completion::Return(v) => v,
                            Completion::Halt(v) => return Ok(TreeExit::Exit(v)),
                        }
                    }
                };
                env.set(*result, value);
                i += 1;
            }
            OpKind::Prim { op: p, args, result } => {
                let vals: Vec<Value> = args.iter().map(|a| env.get(*a)).collect();
                env.set(*result, p.eval(&vals));
                i += 1;
            }
            OpKind::Guard { cond, expect, descr } => {
                if (env.get(*cond) != 0) == *expect {
                    i += 1;
                    continue;
                }
                backend.note_guard_failure();
                match handle_guard_failure(descr, backend) {
                    Continuation::EnterBridge(b) => {
                        trace = tree.trace(b);
                        i = 0;
                    }
                    Continuation::ResumeInterpreter => {
                        let frames = materialize(descr, &env, frame);
                        return Ok(TreeExit::SideExit { guard: descr.id, frames });
                    }
                    Continuation::StartBridgeTracing => {
                        let frames = materialize(descr, &env, frame);
                        return Ok(TreeExit::StartBridge { guard: descr.id, frames });
                    }
                }
            }
            OpKind::Jump { token, args } => {
                let (tid, idx) = tree.token(*token).expect("jump to a registered token");
                let target = tree.trace(tid);
                let OpKind::Label { params, .. } = &target.ops[idx].kind else {
                    unreachable!("tokens point at labels")
                };
                let vals: Vec<Value> = args.iter().map(|a| env.get(*a)).collect();
                for (p, x) in params.iter().zip(vals) {
                    env.set(*p, x);
                }
                trace = target;
                i = idx + 1;
            }
            OpKind::Finish { value, exit } => {
                let v = env.get(*value);
                return Ok(if *exit { TreeExit::Exit(v) } else { TreeExit::Return(v) });
            }
            OpKind::CutMarker(_) => unreachable!("cut markers never reach a tree"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::assemble;
    use crate::ir::{Tier, TraceOrigin, FRAME};
    use crate::stitcher::stitch;
    use crate::tracer::trace_method;
    use crate::vm::{Mode, Vm, VmConfig};

    const COUNTDOWN: &str = "
func loop/1:
top:
    DUP
    CONST_INT 1
    GT
    JUMP_IF else
    CONST_INT 1
    SUB
    JUMP top
else:
    CALL g
    RET
func g/1:
    RET
";

    #[test]
    fn stitched_countdown_runs_like_the_interpreter() {
        let p = assemble(COUNTDOWN).unwrap();
        let tree = stitch(&trace_method(&p, 0, 5000).unwrap()).unwrap();
        let mut interp = Vm::new(&p, VmConfig { record_log: true, ..VmConfig::with_mode(Mode::Interp) });
        assert_eq!(interp.invoke(0, vec![5]).unwrap(), Completion::Return(1));

        let mut vm = Vm::new(&p, VmConfig { record_log: true, ..VmConfig::with_mode(Mode::Interp) });
        let frame = Frame::new(&p, 0, vec![5]);
        let exit = execute_tree(&tree, &p, frame, &mut vm).unwrap();
        assert_eq!(exit, TreeExit::Return(1));
        assert_eq!(vm.log(), interp.log());
        // g ran in the interpreter; nothing of `loop` was dispatched.
        assert_eq!(vm.metrics().dispatches, 1);
        assert_eq!(vm.metrics().guard_fails, 1);
    }

    #[test]
    fn guard_without_bridge_side_exits() {
        let p = assemble(COUNTDOWN).unwrap();
        let linear = trace_method(&p, 0, 5000).unwrap();
        // Only the loop body, with the bridge missing.
        let mut ops = linear.ops[..7].to_vec();
        ops.insert(0, TraceOp::new(OpKind::Label { token: crate::ir::Token(0), params: vec![FRAME] }));
        ops.push(TraceOp::new(OpKind::Jump { token: crate::ir::Token(0), args: vec![Operand::Var(FRAME)] }));
        let tree = TraceTree::new(linear.origin, vec![FRAME], ops).unwrap();
        let mut vm = Vm::new(&p, VmConfig::with_mode(Mode::Baseline));
        let exit = execute_tree(&tree, &p, Frame::new(&p, 0, vec![3]), &mut vm).unwrap();
        let TreeExit::SideExit { guard, frames } = exit else { panic!("{exit:?}") };
        assert_eq!(guard, GuardId(0));
        assert_eq!(frames, vec![Frame { func: 0, pc: 11, stack: vec![1] }]);
    }

    #[test]
    fn finish_of_a_constant() {
        let p = assemble("CONST_INT 4\nEXIT").unwrap();
        let origin = TraceOrigin { func: 0, pc: 0, tier: Tier::Baseline };
        let tree = TraceTree::new(origin, vec![FRAME], vec![TraceOp::new(OpKind::Finish {
            value: Operand::Const(42),
            exit: false,
        })])
        .unwrap();
        let mut vm = Vm::new(&p, VmConfig::default());
        assert_eq!(execute_tree(&tree, &p, Frame::new(&p, 0, vec![]), &mut vm).unwrap(), TreeExit::Return(42));
    }

    #[test]
    fn guard_failure_policy() {
        let p = assemble(COUNTDOWN).unwrap();
        let descr = GuardDescr::new(GuardId(0), 11, vec![FRAME]);
        let mut vm = Vm::new(&p, VmConfig::with_mode(Mode::Tracing));
        let actions: Vec<_> = (0..10).map(|_| handle_guard_failure(&descr, &mut vm)).collect();
        assert_eq!(actions[7], Continuation::StartBridgeTracing);
        assert_eq!(actions.iter().filter(|a| **a == Continuation::StartBridgeTracing).count(), 1);
        assert_eq!(actions[0], Continuation::ResumeInterpreter);
        descr.bridge.set(Some(TraceId(1)));
        assert_eq!(handle_guard_failure(&descr, &mut vm), Continuation::EnterBridge(TraceId(1)));
    }

    #[test]
    fn attach_checks() {
        let p = assemble(COUNTDOWN).unwrap();
        let linear = trace_method(&p, 0, 5000).unwrap();
        let tree = stitch(&linear).unwrap();
        let fin = vec![TraceOp::new(OpKind::Finish { value: Operand::Const(0), exit: false })];
        assert_eq!(attach_bridge(&tree, GuardId(5), vec![FRAME], fin.clone()), Err(TreeError::NoSuchGuard(GuardId(5))));
        assert_eq!(attach_bridge(&tree, GuardId(0), vec![FRAME], fin), Err(TreeError::AlreadyAttached(GuardId(0))));
    }
}
