//! Cleanup passes over compiled trees.
//!
//! Residual calls are opaque: they may read and write the whole frame, so
//! they are never folded, merged or dropped. Only primitive ops and guards
//! on constants are touched. A removed op hands its origins to the next op
//! so the executed-instruction stream stays the same.

use std::collections::{HashMap, HashSet};

use crate::ir::{CompiledTrace, GuardId, OpKind, Operand, PrimOp, TraceKind, TraceOp, TraceTree, Var, FRAME};
use crate::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Passes {
    pub fold: bool,
    pub dce: bool,
    pub dedup: bool,
}

impl Passes {
    pub fn all() -> Passes {
        Passes { fold: true, dce: true, dedup: true }
    }

    pub fn none() -> Passes {
        Passes { fold: false, dce: false, dedup: false }
    }
}

impl Default for Passes {
    fn default() -> Self {
        Passes::all()
    }
}

type Subst = HashMap<Var, Operand>;

fn resolve(subst: &Subst, mut o: Operand) -> Operand {
    while let Operand::Var(v) = o {
        match subst.get(&v) {
            Some(n) => o = *n,
            None => break,
        }
    }
    o
}

fn apply(subst: &Subst, op: &mut TraceOp) {
    if !subst.is_empty() {
        op.map_operands(|o| resolve(subst, o));
    }
}

/// Drops ops flagged in `remove`, moving their origins onto the next kept
/// op (a label keeps them for the fall-through path only, which is the
/// only path that ran the removed op).
fn compact(ops: Vec<TraceOp>, remove: &[bool]) -> Vec<TraceOp> {
    let mut out = Vec::with_capacity(ops.len());
    let mut carry: Vec<u32> = Vec::new();
    for (op, gone) in ops.into_iter().zip(remove) {
        if *gone {
            carry.extend(op.origins);
            continue;
        }
        let mut op = op;
        if !carry.is_empty() {
            carry.append(&mut op.origins);
            op.origins = std::mem::take(&mut carry);
        }
        out.push(op);
    }
    debug_assert!(carry.is_empty(), "the last op is a terminator and is never removed");
    out
}

fn fold_ops(mut ops: Vec<TraceOp>, subst: &mut Subst) -> Vec<TraceOp> {
    let mut remove = vec![false; ops.len()];
    for (i, op) in ops.iter_mut().enumerate() {
        apply(subst, op);
        match &op.kind {
            OpKind::Prim { op: p, args, result } => {
                let consts: Option<Vec<Value>> = args.iter().map(|a| a.as_const()).collect();
                if let Some(c) = consts {
                    subst.insert(*result, Operand::Const(p.eval(&c)));
                    remove[i] = true;
                }
            }
            OpKind::Guard { cond: Operand::Const(c), expect, descr }
                if (*c != 0) == *expect && descr.bridge.get().is_none() =>
            {
                remove[i] = true;
            }
            _ => {}
        }
    }
    compact(ops, &remove)
}

fn dedup_ops(mut ops: Vec<TraceOp>, subst: &mut Subst) -> Vec<TraceOp> {
    let mut remove = vec![false; ops.len()];
    let mut seen: HashMap<(PrimOp, Vec<Operand>), Var> = HashMap::new();
    for (i, op) in ops.iter_mut().enumerate() {
        apply(subst, op);
        match &op.kind {
            OpKind::Guard { .. } | OpKind::Label { .. } => seen.clear(),
            OpKind::Prim { op: p, args, result } => match seen.get(&(*p, args.clone())) {
                Some(first) => {
                    subst.insert(*result, Operand::Var(*first));
                    remove[i] = true;
                }
                None => {
                    seen.insert((*p, args.clone()), *result);
                }
            },
            _ => {}
        }
    }
    compact(ops, &remove)
}

fn dce_ops(ops: Vec<TraceOp>) -> Vec<TraceOp> {
    let mut remove = vec![false; ops.len()];
    let mut used: HashSet<Var> = HashSet::new();
    for (i, op) in ops.iter().enumerate().rev() {
        if op.is_pure() && !op.result().is_some_and(|r| used.contains(&r)) {
            remove[i] = true;
            continue;
        }
        used.extend(op.uses());
    }
    compact(ops, &remove)
}

/// Runs the enabled passes over one op list, in fold, dedup, dce order.
fn run_passes(ops: Vec<TraceOp>, subst: &mut Subst, passes: Passes) -> Vec<TraceOp> {
    let mut ops = ops;
    if passes.fold {
        ops = fold_ops(ops, subst);
    }
    if passes.dedup {
        ops = dedup_ops(ops, subst);
    } else if !subst.is_empty() {
        for op in &mut ops {
            apply(subst, op);
        }
    }
    if passes.dce {
        ops = dce_ops(ops);
    }
    ops
}

/// Optimizes a whole tree. Substitutions made in a trace flow into its
/// bridges, whose inputs follow their guard's updated live list.
pub fn optimize(tree: &TraceTree, passes: Passes) -> TraceTree {
    let mut subst = Subst::new();
    let mut lives: HashMap<GuardId, Vec<Var>> = HashMap::new();
    tree.map_traces(|t: &CompiledTrace| {
        let inputs = match t.kind {
            TraceKind::Root => t.inputs.clone(),
            TraceKind::Bridge(g) => lives.get(&g).cloned().unwrap_or_else(|| t.inputs.clone()),
        };
        let ops = run_passes(t.ops.clone(), &mut subst, passes);
        for op in &ops {
            if let Some(d) = op.guard() {
                lives.insert(d.id, d.live.clone());
            }
        }
        CompiledTrace { id: t.id, kind: t.kind, inputs, ops }
    })
    .expect("optimizing keeps bridge inputs aligned with their guards")
}

/// Optimizes a freshly recorded bridge on its own; its inputs stay as they
/// are because the guard's live list is already fixed.
pub fn optimize_trace(inputs: &[Var], ops: Vec<TraceOp>, passes: Passes) -> Vec<TraceOp> {
    debug_assert!(inputs.first() == Some(&FRAME));
    run_passes(ops, &mut Subst::new(), passes)
}

pub fn fold_constants(tree: &TraceTree) -> TraceTree {
    optimize(tree, Passes { fold: true, dce: false, dedup: false })
}

pub fn eliminate_dead(tree: &TraceTree) -> TraceTree {
    optimize(tree, Passes { fold: false, dce: true, dedup: false })
}

pub fn dedup_pure(tree: &TraceTree) -> TraceTree {
    optimize(tree, Passes { fold: false, dce: false, dedup: true })
}
