//! Seeded generator of structured guest programs for differential testing.
//!
//! Programs are built from statements that keep the operand stack balanced,
//! so every generated program validates. Loops count down a reserved local
//! and recursive functions recurse on a small bounded argument, so every
//! program terminates; a static cost estimate keeps runs short.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bytecode::{assemble, Program, MAX_PROGRAM_LEN};
use crate::Value;

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub max_functions: usize,
    pub max_depth: u32,
    /// Upper bound on the estimated executed instructions per run.
    pub max_cost: u64,
    pub inputs: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { max_functions: 4, max_depth: 3, max_cost: 6000, inputs: 3 }
    }
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub seed: u64,
    pub source: String,
    pub program: Program,
    /// Argument vectors for `main`.
    pub inputs: Vec<Vec<Value>>,
}

#[derive(Clone, Debug)]
struct Callee {
    name: String,
    arity: usize,
    cost: u64,
    recursive: bool,
}

struct FnGen<'a> {
    rng: &'a mut ChaCha8Rng,
    lines: Vec<String>,
    labels: usize,
    slots: usize,
    reserved: Vec<usize>,
    callees: &'a [Callee],
    max_depth: u32,
    loop_depth: u32,
}

const BINOPS: [&str; 6] = ["ADD", "SUB", "MUL", "GT", "LT", "EQ"];

impl FnGen<'_> {
    fn emit(&mut self, s: impl Into<String>) {
        self.lines.push(s.into());
    }

    fn label(&mut self, stem: &str) -> String {
        self.labels += 1;
        format!("{stem}{}", self.labels)
    }

    fn leaf(&mut self) -> u64 {
        if self.rng.gen_bool(0.5) {
            let k = self.rng.gen_range(0..12);
            self.emit(format!("CONST_INT {k}"));
        } else {
            let s = self.rng.gen_range(0..self.slots);
            self.emit(format!("LOAD {s}"));
        }
        1
    }

    /// A value in a small range that still depends on the data.
    fn bounded(&mut self, lo: u8, hi: u8) -> u64 {
        let c = self.rng.gen_range(lo..hi);
        self.emit(format!("CONST_INT {c}"));
        if self.rng.gen_bool(0.6) {
            let s = self.rng.gen_range(0..self.slots);
            let k = self.rng.gen_range(0..8);
            let cmp = *["GT", "LT"].choose(self.rng).unwrap();
            self.emit(format!("LOAD {s}"));
            self.emit(format!("CONST_INT {k}"));
            self.emit(cmp);
            self.emit("ADD");
            return 5;
        }
        1
    }

    fn expr(&mut self, depth: u32) -> u64 {
        if depth == 0 {
            return self.leaf();
        }
        match self.rng.gen_range(0..10) {
            0..=2 => self.leaf(),
            3..=6 => {
                let a = self.expr(depth - 1);
                let b = self.expr(depth - 1);
                let op = if self.rng.gen_bool(0.1) { "MUL" } else { *BINOPS.choose(self.rng).unwrap() };
                self.emit(op);
                a + b + 1
            }
            7 => {
                let a = self.expr(depth - 1);
                self.emit("DUP");
                self.emit("ADD");
                a + 2
            }
            _ => self.call(depth),
        }
    }

    fn call(&mut self, depth: u32) -> u64 {
        let Some(callee) = self.callees.choose(self.rng).cloned() else {
            return self.leaf();
        };
        let mut cost = callee.cost + 1;
        for i in 0..callee.arity {
            cost += if callee.recursive && i == 0 { self.bounded(0, 5) } else { self.expr(depth.saturating_sub(2)) };
        }
        self.emit(format!("CALL {}", callee.name));
        cost
    }

    fn free_slot(&mut self) -> Option<usize> {
        let free: Vec<usize> = (0..self.slots).filter(|s| !self.reserved.contains(s)).collect();
        free.choose(self.rng).copied()
    }

    fn block(&mut self, n: usize, depth: u32) -> u64 {
        (0..n).map(|_| self.stmt(depth)).sum()
    }

    fn stmt(&mut self, depth: u32) -> u64 {
        let roll = self.rng.gen_range(0..100);
        match roll {
            0..=1 if depth > 0 => {
                // Rare early exit behind a condition.
                let l = self.label("skip");
                let mut c = self.expr(1);
                self.emit(format!("JUMP_IF {l}"));
                c += self.expr(1);
                self.emit("EXIT");
                self.emit(format!("{l}:"));
                c + 2
            }
            2..=31 if depth > 0 => {
                let else_l = self.label("else");
                let end_l = self.label("end");
                let mut c = self.expr(2) + 1;
                self.emit(format!("JUMP_IF {else_l}"));
                let n = self.rng.gen_range(0..3);
                let then_c = self.block(n, depth - 1);
                self.emit(format!("JUMP {end_l}"));
                self.emit(format!("{else_l}:"));
                let n = self.rng.gen_range(0..3);
                let else_c = self.block(n, depth - 1);
                self.emit(format!("{end_l}:"));
                c += then_c.max(else_c) + 1;
                c
            }
            32..=51 if depth > 0 && self.loop_depth < 2 => {
                let Some(counter) = self.free_slot() else {
                    return self.assign();
                };
                let top = self.label("top");
                let done = self.label("done");
                let trips = if self.rng.gen_bool(0.5) {
                    let n = self.rng.gen_range(1..14);
                    self.emit(format!("CONST_INT {n}"));
                    n as u64
                } else {
                    self.bounded(6, 13);
                    13
                };
                self.emit(format!("STORE {counter}"));
                self.emit(format!("{top}:"));
                self.emit(format!("LOAD {counter}"));
                self.emit("CONST_INT 0");
                self.emit("GT");
                self.emit(format!("JUMP_IF {done}"));
                self.reserved.push(counter);
                self.loop_depth += 1;
                let n = self.rng.gen_range(1..3);
                let body = self.block(n, depth - 1);
                self.loop_depth -= 1;
                self.reserved.pop();
                self.emit(format!("LOAD {counter}"));
                self.emit("CONST_INT 1");
                self.emit("SUB");
                self.emit(format!("STORE {counter}"));
                self.emit(format!("JUMP {top}"));
                self.emit(format!("{done}:"));
                trips * (body + 10) + 10
            }
            52..=59 => {
                let c = self.expr(2);
                self.emit("POP");
                c + 1
            }
            _ => self.assign(),
        }
    }

    fn assign(&mut self) -> u64 {
        let c = self.expr(self.max_depth.min(2));
        match self.free_slot() {
            Some(s) => self.emit(format!("STORE {s}")),
            None => self.emit("POP"),
        }
        c + 1
    }
}

fn gen_function(
    rng: &mut ChaCha8Rng,
    name: &str,
    arity: usize,
    recursive: bool,
    callees: &[Callee],
    cfg: &GenConfig,
) -> (Vec<String>, u64) {
    let locals = rng.gen_range(1..3);
    let mut g = FnGen {
        rng,
        lines: Vec::new(),
        labels: 0,
        slots: arity + locals,
        reserved: Vec::new(),
        callees,
        max_depth: cfg.max_depth,
        loop_depth: 0,
    };
    g.emit(format!("func {name}/{arity}:"));
    for _ in 0..locals {
        g.emit("CONST_INT 0");
    }
    let mut cost = locals as u64;
    if !recursive {
        let n = g.rng.gen_range(1..4);
        cost += g.block(n, cfg.max_depth);
        cost += g.expr(2);
        g.emit("RET");
        return (g.lines, cost + 1);
    }
    // Recursion on slot 0, which nothing else may overwrite.
    g.reserved.push(0);
    let base = g.label("base");
    g.emit("LOAD 0");
    g.emit("CONST_INT 1");
    g.emit("GT");
    g.emit(format!("JUMP_IF {base}"));
    let n = g.rng.gen_range(0..2);
    let mut body = g.block(n, 1) + 4;
    let calls = g.rng.gen_range(1..3u32);
    for i in 0..calls {
        g.emit("LOAD 0");
        g.emit(format!("CONST_INT {}", i + 1));
        g.emit("SUB");
        for _ in 1..arity {
            body += g.expr(1);
        }
        g.emit(format!("CALL {name}"));
        body += 4;
        if i > 0 {
            g.emit("ADD");
        }
    }
    body += g.expr(1) + 1;
    g.emit("ADD");
    g.emit("RET");
    g.emit(format!("{base}:"));
    let leaf = g.expr(1) + 1;
    g.emit("RET");
    // Arguments stay below 6, so at most 5 levels.
    let activations = if calls == 1 { 6 } else { 32 };
    (g.lines, cost + activations * (body + leaf))
}

fn attempt(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> Option<(String, u64)> {
    let nfuncs = rng.gen_range(1..=cfg.max_functions);
    let mut callees: Vec<Callee> = Vec::new();
    let mut bodies: Vec<Vec<String>> = Vec::new();
    let mut main_cost = 0;
    for idx in (0..nfuncs).rev() {
        let (name, arity, recursive) = if idx == 0 {
            ("main".to_string(), 1, false)
        } else {
            (format!("f{idx}"), rng.gen_range(1..3), rng.gen_bool(0.4))
        };
        let (lines, cost) = gen_function(rng, &name, arity, recursive, &callees, cfg);
        bodies.push(lines);
        if idx == 0 {
            main_cost = cost;
        } else {
            callees.push(Callee { name, arity, cost, recursive });
        }
    }
    bodies.reverse();
    let source = bodies.concat().join("\n") + "\n";
    Some((source, main_cost))
}

/// Generates one program from `seed`. Deterministic per seed.
pub fn generate(seed: u64) -> Generated {
    generate_with(seed, &GenConfig::default())
}

pub fn generate_with(seed: u64, cfg: &GenConfig) -> Generated {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = cfg.clone();
    for round in 0.. {
        if round > 0 && round % 8 == 0 {
            cfg.max_depth = cfg.max_depth.saturating_sub(1).max(1);
            cfg.max_functions = cfg.max_functions.saturating_sub(1).max(1);
        }
        let Some((source, cost)) = attempt(&mut rng, &cfg) else { continue };
        if cost > cfg.max_cost {
            continue;
        }
        let Ok(program) = assemble(&source) else { continue };
        debug_assert!(program.len() <= MAX_PROGRAM_LEN);
        let inputs = (0..cfg.inputs).map(|_| vec![rng.gen_range(0..10)]).collect();
        return Generated { seed, source, program, inputs };
    }
    unreachable!()
}

/// The seed base for test suites: `STITCHVM_SEED` if set, else a fixed one.
pub fn suite_seed() -> u64 {
    std::env::var("STITCHVM_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0x5717_c4ed)
}
