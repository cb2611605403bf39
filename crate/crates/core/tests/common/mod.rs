//! Test oracles shared by the integration suites: a control-flow graph
//! built straight from the bytecode, and the plain interpreter as the
//! reference for differential runs.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use stitchvm::ir::BlockGraph;
use stitchvm::{Mode, Opcode, Passes, Program, Thresholds, Value, Vm, VmConfig, VmError};

/// A reduced control-flow graph: ordered successors per node, node 0 the
/// entry. A conditional lists (fall-through, taken).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cfg {
    pub succs: Vec<Vec<usize>>,
}

struct Raw {
    op: Opcode,
    next: usize,
    target: Option<usize>,
}

fn raw_insn(code: &[u8], pc: usize) -> Raw {
    let op = Opcode::from_byte(code[pc]).expect("valid opcode");
    let next = pc + 1 + op.operand_len();
    let target = match op {
        Opcode::Jump | Opcode::JumpIf => Some(code[pc + 1] as usize),
        _ => None,
    };
    Raw { op, next, target }
}

/// The CFG of `func`'s reachable code, read off the bytes. Blocks that hold
/// only a JUMP are bypassed, then straight chains (single successor into
/// a single-predecessor block) are merged.
pub fn bytecode_cfg(program: &Program, func: usize) -> Cfg {
    let code = &program.code;
    let entry = program.functions[func].entry;

    // Leaders over the reachable instructions.
    let mut reach = BTreeSet::new();
    let mut work = vec![entry];
    let mut leaders = BTreeSet::from([entry]);
    while let Some(pc) = work.pop() {
        if !reach.insert(pc) {
            continue;
        }
        let i = raw_insn(code, pc);
        match i.op {
            Opcode::Jump => {
                let t = i.target.unwrap();
                leaders.insert(t);
                work.push(t);
            }
            Opcode::JumpIf => {
                let t = i.target.unwrap();
                leaders.insert(t);
                leaders.insert(i.next);
                work.push(t);
                work.push(i.next);
            }
            Opcode::Ret | Opcode::Exit => {}
            _ => work.push(i.next),
        }
    }

    // Basic blocks: leader -> (successors, is a lone JUMP).
    let mut blocks: BTreeMap<usize, (Vec<usize>, bool)> = BTreeMap::new();
    for &start in leaders.iter().filter(|l| reach.contains(l)) {
        let mut pc = start;
        loop {
            let i = raw_insn(code, pc);
            let succs = match i.op {
                Opcode::Jump => Some(vec![i.target.unwrap()]),
                Opcode::JumpIf => Some(vec![i.next, i.target.unwrap()]),
                Opcode::Ret | Opcode::Exit => Some(vec![]),
                _ if leaders.contains(&i.next) => Some(vec![i.next]),
                _ => None,
            };
            if let Some(s) = succs {
                blocks.insert(start, (s, pc == start && i.op == Opcode::Jump));
                break;
            }
            pc = i.next;
        }
    }

    // Bypass lone-JUMP blocks.
    let skip = |mut b: usize| {
        let mut seen = BTreeSet::new();
        while blocks[&b].1 && seen.insert(b) {
            b = blocks[&b].0[0];
        }
        b
    };
    let root = skip(entry);
    let mut graph: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut work = vec![root];
    while let Some(b) = work.pop() {
        if graph.contains_key(&b) {
            continue;
        }
        let s: Vec<usize> = blocks[&b].0.iter().map(|&x| skip(x)).collect();
        work.extend(&s);
        graph.insert(b, s);
    }

    // Merge straight chains.
    let mut preds: HashMap<usize, usize> = HashMap::new();
    *preds.entry(root).or_default() += 1;
    for s in graph.values().flatten() {
        *preds.entry(*s).or_default() += 1;
    }
    // Absorbed: the only way in is an unconditional edge.
    let absorbed = |b: usize| b != root && preds[&b] == 1 && graph.values().any(|s| s.len() == 1 && s[0] == b);
    let heads: Vec<usize> = graph.keys().copied().filter(|b| !absorbed(*b)).collect();
    let mut index: HashMap<usize, usize> = HashMap::new();
    // Entry first, then the rest in address order.
    index.insert(root, 0);
    for &h in heads.iter().filter(|h| **h != root) {
        let n = index.len();
        index.insert(h, n);
    }
    let mut succs = vec![Vec::new(); index.len()];
    for (&h, &n) in &index {
        let mut b = h;
        loop {
            let s = &graph[&b];
            if s.len() == 1 && !index.contains_key(&s[0]) {
                b = s[0];
                continue;
            }
            succs[n] = s.iter().map(|x| index[x]).collect();
            break;
        }
    }
    Cfg { succs }
}

/// The same reduction applied to a tree's block graph: blocks with no body
/// and a single successor (a bridge that only jumps) are bypassed.
pub fn tree_cfg(g: &BlockGraph) -> Cfg {
    let empty = |b: usize| g.blocks[b].body_ops == 0 && g.blocks[b].succs.len() == 1;
    let skip = |mut b: usize| {
        let mut n = 0;
        while empty(b) && n <= g.blocks.len() {
            b = g.blocks[b].succs[0];
            n += 1;
        }
        b
    };
    let root = skip(0);
    let mut index: BTreeMap<usize, usize> = BTreeMap::from([(root, 0)]);
    let mut order = vec![root];
    let mut k = 0;
    while k < order.len() {
        for &s in &g.blocks[order[k]].succs {
            let s = skip(s);
            if let std::collections::btree_map::Entry::Vacant(e) = index.entry(s) {
                e.insert(order.len());
                order.push(s);
            }
        }
        k += 1;
    }
    let succs = order.iter().map(|&b| g.blocks[b].succs.iter().map(|&s| index[&skip(s)]).collect()).collect();
    Cfg { succs }
}

/// Rooted isomorphism for graphs with ordered successors: walking both from
/// the entry must pair nodes one-to-one.
pub fn isomorphic(a: &Cfg, b: &Cfg) -> Result<(), String> {
    if a.succs.len() != b.succs.len() {
        return Err(format!("{} nodes vs {}", a.succs.len(), b.succs.len()));
    }
    let mut fwd: HashMap<usize, usize> = HashMap::from([(0, 0)]);
    let mut back: HashMap<usize, usize> = HashMap::from([(0, 0)]);
    let mut work = vec![(0usize, 0usize)];
    while let Some((x, y)) = work.pop() {
        let (sx, sy) = (&a.succs[x], &b.succs[y]);
        if sx.len() != sy.len() {
            return Err(format!("node {x}/{y}: {} successors vs {}", sx.len(), sy.len()));
        }
        for (&p, &q) in sx.iter().zip(sy) {
            match (fwd.get(&p), back.get(&q)) {
                (None, None) => {
                    fwd.insert(p, q);
                    back.insert(q, p);
                    work.push((p, q));
                }
                (Some(&q2), Some(&p2)) if q2 == q && p2 == p => {}
                _ => return Err(format!("node {x}/{y}: successor {p} does not pair with {q}")),
            }
        }
    }
    if fwd.len() != a.succs.len() {
        return Err("unreachable nodes".into());
    }
    Ok(())
}

pub fn pass_configs() -> [Passes; 4] {
    [
        Passes::all(),
        Passes { fold: false, ..Passes::all() },
        Passes { dce: false, ..Passes::all() },
        Passes { dedup: false, ..Passes::all() },
    ]
}

/// Final value (or error) and executed-instruction sequence of one run.
pub type Outcome = (Result<Value, VmError>, Vec<u32>);

/// Runs every input in order on one VM, each input `rounds` times, so later
/// runs see compiled code.
pub fn run_all(program: &Program, mode: Mode, passes: Passes, thresholds: Thresholds, inputs: &[Vec<Value>], rounds: usize) -> Vec<Outcome> {
    let config = VmConfig { thresholds, passes, record_log: true, ..VmConfig::with_mode(mode) };
    let mut vm = Vm::new(program, config);
    let mut out = Vec::new();
    for _ in 0..rounds {
        for args in inputs {
            let r = vm.run(args);
            out.push((r, vm.take_log()));
        }
    }
    out
}

/// Low thresholds so that compiled code takes over early.
pub fn eager() -> Thresholds {
    Thresholds::new(2, 2, 2)
}

/// Compares `mode` against a fresh interpreter for every run. Returns a
/// description of the first mismatch.
pub fn differential(program: &Program, inputs: &[Vec<Value>], mode: Mode, passes: Passes, thresholds: Thresholds) -> Result<(), String> {
    let rounds = 3;
    let reference = run_all(program, Mode::Interp, passes, thresholds, inputs, rounds);
    let got = run_all(program, mode, passes, thresholds, inputs, rounds);
    for (k, (r, g)) in reference.iter().zip(&got).enumerate() {
        if r.0 != g.0 {
            return Err(format!("run {k}: value {:?} vs interp {:?}", g.0, r.0));
        }
        if r.1 != g.1 {
            let at = r.1.iter().zip(&g.1).position(|(a, b)| a != b).unwrap_or(r.1.len().min(g.1.len()));
            return Err(format!(
                "run {k}: instruction streams differ at step {at} (lengths {} vs interp {})",
                g.1.len(),
                r.1.len()
            ));
        }
    }
    Ok(())
}
