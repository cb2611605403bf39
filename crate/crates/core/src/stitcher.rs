//! Trace stitching: turns a method-traversal trace back into a tree whose
//! shape follows the function's control flow.
//!
//! 1. Split the linear trace at every cut marker.
//! 2. The first segment is the root; each later segment becomes the bridge
//!    of the guard its marker names.
//! 3. A segment whose marker suppressed a jump gets that jump back, aimed at
//!    a label placed where the target's code was recorded.
//! 4. Bridges take as inputs the values they need from before their guard.
//!
//! Cleanup afterwards is the optimizer's job.

use std::collections::{BTreeMap, HashMap, HashSet};

use thiserror::Error;

use crate::ir::{Cut, GuardId, LinearTrace, OpKind, Operand, Token, TraceOp, TraceTree, TreeError, Var, FRAME};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum StitchError {
    #[error("cut marker at op {index} names guard {found:?} but guard {expected:?} is pending")]
    MarkerOrder { index: usize, expected: Option<GuardId>, found: GuardId },
    #[error("guard {0:?} never received a bridge")]
    UnmatchedGuard(GuardId),
    #[error("segment ending at op {0} neither jumps nor finishes")]
    OpenSegment(usize),
    #[error("no recorded position for label target pc {0}")]
    UnplacedLabel(usize),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// A stretch of a linear trace between markers.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    /// Index of the first op in the linear trace.
    pub start: usize,
    pub ops: Vec<TraceOp>,
    /// The marker this segment starts after.
    pub entry: Option<Cut>,
    /// The marker that ends it, with the marker's own origins.
    pub exit: Option<(Cut, Vec<u32>)>,
}

/// Step 1. Checks that markers pop guards in LIFO order.
pub fn split_at_markers(t: &LinearTrace) -> Result<Vec<Segment>, StitchError> {
    let mut segments = Vec::new();
    let mut current = Segment { start: 0, ops: Vec::new(), entry: None, exit: None };
    let mut pending: Vec<GuardId> = Vec::new();
    for (i, op) in t.ops.iter().enumerate() {
        match &op.kind {
            OpKind::CutMarker(cut) => {
                match pending.pop() {
                    Some(g) if g == cut.guard => {}
                    expected => return Err(StitchError::MarkerOrder { index: i, expected, found: cut.guard }),
                }
                current.exit = Some((*cut, op.origins.clone()));
                let next = Segment { start: i + 1, ops: Vec::new(), entry: Some(*cut), exit: None };
                segments.push(std::mem::replace(&mut current, next));
            }
            OpKind::Guard { descr, .. } => {
                pending.push(descr.id);
                current.ops.push(op.clone());
            }
            _ => current.ops.push(op.clone()),
        }
    }
    segments.push(current);
    Ok(segments)
}

/// Step 4. Variables defined before `guard` and used in the guard's bridge
/// segment or later, in definition order, frame reference first. Empty when
/// no segment belongs to `guard`.
pub fn compute_live_inputs(segments: &[Segment], guard: GuardId) -> Vec<Var> {
    let Some(k) = segments.iter().position(|s| s.entry.is_some_and(|c| c.guard == guard)) else {
        return Vec::new();
    };
    let mut defined = Vec::new();
    'scan: for s in segments {
        for op in &s.ops {
            if op.guard().is_some_and(|d| d.id == guard) {
                break 'scan;
            }
            if let Some(r) = op.result() {
                defined.push(r);
            }
        }
    }
    let used: HashSet<Var> = segments[k..].iter().flat_map(|s| s.ops.iter().flat_map(|o| o.uses())).collect();
    let mut live = vec![FRAME];
    live.extend(defined.into_iter().filter(|v| used.contains(v) && *v != FRAME));
    live
}

/// Steps 2 to 4.
pub fn stitch(t: &LinearTrace) -> Result<TraceTree, StitchError> {
    let segments = split_at_markers(t)?;
    let token_of_pc: HashMap<usize, Token> = t.labels.iter().map(|(tok, pc)| (*pc, *tok)).collect();

    // Where each label goes: segment, local index, origins that belong to
    // the code before the label.
    let mut placements: BTreeMap<(usize, usize), (Token, usize)> = BTreeMap::new();
    for (tok, pc) in &t.labels {
        let &(index, split) = t.pc_index.get(pc).ok_or(StitchError::UnplacedLabel(*pc))?;
        let seg = segments
            .iter()
            .position(|s| s.start <= index && index < s.start + s.ops.len())
            .ok_or(StitchError::UnplacedLabel(*pc))?;
        placements.insert((seg, index - segments[seg].start), (*tok, split));
    }

    let mut live: HashMap<GuardId, Vec<Var>> = HashMap::new();
    for s in &segments[1..] {
        let g = s.entry.expect("later segments start at a marker").guard;
        live.insert(g, compute_live_inputs(&segments, g));
    }

    let mut built: Vec<(Option<GuardId>, Vec<Var>, Vec<TraceOp>)> = Vec::new();
    for (k, s) in segments.iter().enumerate() {
        let mut ops = Vec::with_capacity(s.ops.len() + 2);
        for (j, op) in s.ops.iter().enumerate() {
            let mut op = op.clone();
            if let Some(&(token, split)) = placements.get(&(k, j)) {
                let split = split.min(op.origins.len());
                let before: Vec<u32> = op.origins.drain(..split).collect();
                ops.push(TraceOp::with_origins(OpKind::Label { token, params: vec![FRAME] }, before));
            }
            if let OpKind::Guard { descr, .. } = &mut op.kind {
                if let Some(l) = live.get(&descr.id) {
                    descr.live = l.clone();
                }
            }
            ops.push(op);
        }
        match &s.exit {
            Some((Cut { target: Some(pc), .. }, origins)) => {
                let token = token_of_pc[pc];
                ops.push(TraceOp::with_origins(OpKind::Jump { token, args: vec![Operand::Var(FRAME)] }, origins.clone()));
            }
            _ => {
                if !ops.last().is_some_and(|o| o.is_terminator()) {
                    return Err(StitchError::OpenSegment(s.start + s.ops.len()));
                }
            }
        }
        match s.entry {
            None => built.push((None, t.inputs.clone(), ops)),
            Some(cut) => built.push((Some(cut.guard), live[&cut.guard].clone(), ops)),
        }
    }

    let mut parts = built.into_iter();
    let (_, inputs, root) = parts.next().expect("at least one segment");
    let tree = TraceTree::new(t.origin, inputs, root)?;
    for (guard, inputs, ops) in parts {
        tree.attach(guard.expect("bridge segment"), inputs, ops)?;
    }
    tree.reserve(t.next_var, t.next_guard);
    for trace in tree.traces().iter() {
        for op in &trace.ops {
            if let Some(d) = op.guard() {
                if d.bridge.get().is_none() {
                    return Err(StitchError::UnmatchedGuard(d.id));
                }
            }
        }
    }
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::assemble;
    use crate::ir::{Handler, TraceKind};
    use crate::tracer::trace_method;

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

    fn residuals(ops: &[TraceOp]) -> usize {
        ops.iter().filter(|o| matches!(o.kind, OpKind::Residual { .. })).count()
    }

    #[test]
    fn countdown_splits_in_two() {
        let p = assemble(COUNTDOWN).unwrap();
        let t = trace_method(&p, 0, 5000).unwrap();
        let segs = split_at_markers(&t).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(residuals(&segs[0].ops), 6);
        assert_eq!(segs[1].ops.len(), 3);
        assert_eq!(compute_live_inputs(&segs, GuardId(0)), vec![FRAME]);
        assert_eq!(compute_live_inputs(&segs, GuardId(7)), Vec::<Var>::new());
    }

    #[test]
    fn countdown_stitches_into_loop_and_bridge() {
        let p = assemble(COUNTDOWN).unwrap();
        let tree = stitch(&trace_method(&p, 0, 5000).unwrap()).unwrap();
        assert_eq!(tree.len(), 2);
        let root = tree.root();
        assert!(matches!(root.ops[0].kind, OpKind::Label { token: Token(0), .. }));
        assert!(matches!(root.ops.last().unwrap().kind, OpKind::Jump { token: Token(0), .. }));
        assert_eq!(residuals(&root.ops), 6);
        let bridge = tree.trace(crate::ir::TraceId(1));
        assert_eq!(bridge.kind, TraceKind::Bridge(GuardId(0)));
        assert_eq!(bridge.inputs, vec![FRAME]);
        assert!(matches!(
            bridge.ops[0].kind,
            OpKind::Residual { handler: Handler::Op(crate::Opcode::Call), .. }
        ));
        assert!(tree.check_wellformed().is_empty(), "{:?}", tree.check_wellformed());
        let dump = tree.dump();
        assert!(dump.starts_with("# Loop"), "{dump}");
        assert!(dump.contains("# Bridge 1"));
    }

    #[test]
    fn single_segment_trace() {
        let p = assemble("CONST_INT 4\nEXIT").unwrap();
        let t = trace_method(&p, 0, 5000).unwrap();
        assert_eq!(split_at_markers(&t).unwrap().len(), 1);
        let tree = stitch(&t).unwrap();
        assert_eq!(tree.len(), 1);
    }

    #[test]
    fn nested_branches_match_guards_lifo() {
        let src = "
func f/2:
    LOAD 0
    JUMP_IF a_else
    LOAD 1
    JUMP_IF b_else
    CONST_INT 1
    RET
b_else:
    CONST_INT 2
    RET
a_else:
    CONST_INT 3
    RET
";
        let p = assemble(src).unwrap();
        let t = trace_method(&p, 0, 5000).unwrap();
        let segs = split_at_markers(&t).unwrap();
        assert_eq!(segs.len(), 3);
        assert_eq!(segs[1].entry.unwrap().guard, GuardId(1));
        assert_eq!(segs[2].entry.unwrap().guard, GuardId(0));
        let tree = stitch(&t).unwrap();
        assert_eq!(tree.bridges().len(), 2);
        assert!(tree.check_wellformed().is_empty());
    }

    #[test]
    fn out_of_order_marker_is_malformed() {
        let p = assemble(COUNTDOWN).unwrap();
        let mut t = trace_method(&p, 0, 5000).unwrap();
        if let OpKind::CutMarker(c) = &mut t.ops[7].kind {
            c.guard = GuardId(3);
        }
        assert!(matches!(split_at_markers(&t), Err(StitchError::MarkerOrder { .. })));
    }

    #[test]
    fn bridge_using_a_pre_guard_value() {
        // Hand-built: the bridge reads i1, defined before the guard.
        let p = assemble(COUNTDOWN).unwrap();
        let mut t = trace_method(&p, 0, 5000).unwrap();
        let r1 = t.ops[0].result().unwrap();
        if let OpKind::Residual { args, .. } = &mut t.ops[8].kind {
            args.push(Operand::Var(r1));
        }
        let segs = split_at_markers(&t).unwrap();
        assert_eq!(compute_live_inputs(&segs, GuardId(0)), vec![FRAME, r1]);
        let tree = stitch(&t).unwrap();
        assert!(tree.check_wellformed().is_empty(), "{:?}", tree.check_wellformed());
        assert_eq!(tree.trace(crate::ir::TraceId(1)).inputs, vec![FRAME, r1]);
    }
}
