//! Instruction set, program model, and the textual assembler.
//!
//! Programs live in a single code space addressed by one unsigned byte, so a
//! whole program (all functions) is at most 256 bytes. Control-flow and call
//! operands are absolute addresses.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest addressable program, in bytes.
pub const MAX_PROGRAM_LEN: usize = 256;

/// Index into [`Program::functions`].
pub type FuncId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Opcode {
    Nop = 0,
    ConstInt = 1,
    Dup = 2,
    Pop = 3,
    Add = 4,
    Sub = 5,
    Mul = 6,
    Gt = 7,
    Lt = 8,
    Eq = 9,
    Jump = 10,
    /// Pops the condition; falls through when it is non-zero, otherwise
    /// jumps to the operand address.
    JumpIf = 11,
    Call = 12,
    Ret = 13,
    Exit = 14,
    /// Pushes a copy of frame slot `n` (slots count from the bottom of the
    /// frame's operand stack, so arguments are slots `0..arity`).
    Load = 15,
    /// Pops a value into frame slot `n`.
    Store = 16,
}

impl Opcode {
    pub const ALL: [Opcode; 17] = [
        Opcode::Nop,
        Opcode::ConstInt,
        Opcode::Dup,
        Opcode::Pop,
        Opcode::Add,
        Opcode::Sub,
        Opcode::Mul,
        Opcode::Gt,
        Opcode::Lt,
        Opcode::Eq,
        Opcode::Jump,
        Opcode::JumpIf,
        Opcode::Call,
        Opcode::Ret,
        Opcode::Exit,
        Opcode::Load,
        Opcode::Store,
    ];

    pub fn from_byte(b: u8) -> Option<Opcode> {
        Self::ALL.get(b as usize).copied()
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Nop => "NOP",
            Opcode::ConstInt => "CONST_INT",
            Opcode::Dup => "DUP",
            Opcode::Pop => "POP",
            Opcode::Add => "ADD",
            Opcode::Sub => "SUB",
            Opcode::Mul => "MUL",
            Opcode::Gt => "GT",
            Opcode::Lt => "LT",
            Opcode::Eq => "EQ",
            Opcode::Jump => "JUMP",
            Opcode::JumpIf => "JUMP_IF",
            Opcode::Call => "CALL",
            Opcode::Ret => "RET",
            Opcode::Exit => "EXIT",
            Opcode::Load => "LOAD",
            Opcode::Store => "STORE",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Opcode> {
        Self::ALL.iter().copied().find(|op| op.mnemonic() == s)
    }

    /// Number of operand bytes following the opcode byte.
    pub fn operand_len(self) -> usize {
        match self {
            Opcode::ConstInt
            | Opcode::Jump
            | Opcode::JumpIf
            | Opcode::Call
            | Opcode::Load
            | Opcode::Store => 1,
            _ => 0,
        }
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(self) -> usize {
        1 + self.operand_len()
    }

    /// Whether the operand is a code address.
    pub fn has_target(self) -> bool {
        matches!(self, Opcode::Jump | Opcode::JumpIf | Opcode::Call)
    }

    /// Control never falls through to the next instruction.
    pub fn is_terminator(self) -> bool {
        matches!(self, Opcode::Jump | Opcode::Ret | Opcode::Exit)
    }

    /// Net operand-stack effect. `None` for CALL, whose effect depends on the
    /// callee's arity.
    pub fn stack_effect(self) -> Option<isize> {
        Some(match self {
            Opcode::Nop | Opcode::Jump => 0,
            Opcode::ConstInt | Opcode::Dup | Opcode::Load => 1,
            Opcode::Pop | Opcode::JumpIf | Opcode::Store => -1,
            Opcode::Add | Opcode::Sub | Opcode::Mul | Opcode::Gt | Opcode::Lt | Opcode::Eq => -1,
            Opcode::Ret | Opcode::Exit => -1,
            Opcode::Call => return None,
        })
    }

    /// Minimum stack depth the handler needs.
    pub fn stack_demand(self) -> usize {
        match self {
            Opcode::Dup | Opcode::Pop | Opcode::JumpIf | Opcode::Store => 1,
            Opcode::Ret | Opcode::Exit => 1,
            Opcode::Add | Opcode::Sub | Opcode::Mul | Opcode::Gt | Opcode::Lt | Opcode::Eq => 2,
            _ => 0,
        }
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Function {
    pub name: String,
    pub entry: usize,
    pub arity: usize,
}

/// An assembled program: raw code plus its function table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    pub code: Vec<u8>,
    /// Sorted by entry address.
    pub functions: Vec<Function>,
    /// Entry address of the main function.
    pub entry: usize,
}

/// A decoded instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Insn {
    pub pc: usize,
    pub op: Opcode,
    pub operand: Option<u8>,
}

impl Insn {
    pub fn next_pc(&self) -> usize {
        self.pc + self.op.len()
    }

    pub fn target(&self) -> Option<usize> {
        if self.op.has_target() {
            self.operand.map(usize::from)
        } else {
            None
        }
    }
}

impl Program {
    pub fn empty() -> Program {
        Program { code: Vec::new(), functions: Vec::new(), entry: 0 }
    }

    pub fn len(&self) -> usize {
        self.code.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code.is_empty()
    }

    pub fn decode(&self, pc: usize) -> Option<Insn> {
        let op = Opcode::from_byte(*self.code.get(pc)?)?;
        let operand = if op.operand_len() == 1 { Some(*self.code.get(pc + 1)?) } else { None };
        Some(Insn { pc, op, operand })
    }

    /// Linear sweep over `start..end`; stops at the first undecodable byte.
    pub fn insns(&self, start: usize, end: usize) -> impl Iterator<Item = Insn> + '_ {
        let mut pc = start;
        std::iter::from_fn(move || {
            if pc >= end {
                return None;
            }
            let insn = self.decode(pc)?;
            pc = insn.next_pc();
            Some(insn)
        })
    }

    pub fn main(&self) -> Option<FuncId> {
        self.function_at_entry(self.entry)
    }

    pub fn function_at_entry(&self, entry: usize) -> Option<FuncId> {
        self.functions.iter().position(|f| f.entry == entry)
    }

    pub fn function_by_name(&self, name: &str) -> Option<FuncId> {
        self.functions.iter().position(|f| f.name == name)
    }

    /// Function whose body contains `pc`.
    pub fn function_containing(&self, pc: usize) -> Option<FuncId> {
        if pc >= self.code.len() {
            return None;
        }
        self.functions.iter().rposition(|f| f.entry <= pc)
    }

    /// Half-open byte range of a function body.
    pub fn body(&self, func: FuncId) -> (usize, usize) {
        let start = self.functions[func].entry;
        let end = self.functions.get(func + 1).map_or(self.code.len(), |f| f.entry);
        (start, end)
    }

    /// Every instruction start in the program.
    pub fn boundaries(&self) -> BTreeSet<usize> {
        self.insns(0, self.code.len()).map(|i| i.pc).collect()
    }

    /// Writes the function table as JSON lines.
    pub fn write_function_table<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for f in &self.functions {
            serde_json::to_writer(&mut out, f)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Rebuilds a program from raw code and a JSON-lines function table.
    /// The main function is the one named `main`, else the first entry.
    pub fn from_parts<R: BufRead>(code: Vec<u8>, table: R) -> Result<Program, LoadError> {
        let mut functions = Vec::new();
        for line in table.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            functions.push(serde_json::from_str::<Function>(&line)?);
        }
        functions.sort_by_key(|f| f.entry);
        let entry = functions
            .iter()
            .find(|f| f.name == "main")
            .or(functions.first())
            .map_or(0, |f| f.entry);
        Ok(Program { code, functions, entry })
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad function table entry: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Assembler

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    #[error("operand `{0}` out of byte range")]
    OperandOutOfRange(String),
    #[error("target {0} is not on an opcode boundary")]
    MisalignedTarget(usize),
    #[error("`{0}` expects an operand")]
    MissingOperand(&'static str),
    #[error("`{0}` takes no operand")]
    UnexpectedOperand(&'static str),
    #[error("`{0}` expects a numeric operand")]
    NonNumericOperand(&'static str),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("duplicate function `{0}`")]
    DuplicateFunction(String),
    #[error("malformed function header `{0}`")]
    BadHeader(String),
    #[error("program exceeds {MAX_PROGRAM_LEN} bytes")]
    ProgramTooLarge,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

enum Operand<'a> {
    Number(usize),
    Name(&'a str),
}

struct PendingInsn<'a> {
    line: usize,
    func: usize,
    op: Opcode,
    operand: Option<Operand<'a>>,
    pc: usize,
}

fn parse_header(line: &str) -> Option<(&str, usize)> {
    let rest = line.strip_prefix("func ")?.trim().strip_suffix(':')?.trim();
    match rest.split_once('/') {
        Some((name, arity)) => Some((name.trim(), arity.trim().parse().ok()?)),
        None => Some((rest, 0)),
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

/// Assembles newline-separated source.
///
/// Each line is `MNEMONIC [operand]`, `label:`, or a `func name[/arity]:`
/// header; `;` starts a comment. Instructions before any header belong to an
/// implicit `main` of arity 0. Labels are scoped to their function; `CALL`
/// operands name functions.
pub fn assemble(source: &str) -> Result<Program, AsmError> {
    let mut functions: Vec<Function> = Vec::new();
    let mut labels: HashMap<(usize, &str), usize> = HashMap::new();
    let mut pending: Vec<PendingInsn<'_>> = Vec::new();
    let mut pc = 0usize;

    for (idx, raw) in source.lines().enumerate() {
        let line_no = idx + 1;
        let err = |kind| AsmError { line: line_no, kind };
        let line = raw.split(';').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with("func ") {
            let (name, arity) = parse_header(line)
                .filter(|(n, _)| is_ident(n))
                .ok_or_else(|| err(AsmErrorKind::BadHeader(line.to_string())))?;
            if functions.iter().any(|f| f.name == name) {
                return Err(err(AsmErrorKind::DuplicateFunction(name.to_string())));
            }
            functions.push(Function { name: name.to_string(), entry: pc, arity });
            continue;
        }
        if functions.is_empty() {
            functions.push(Function { name: "main".into(), entry: 0, arity: 0 });
        }
        let func = functions.len() - 1;
        if let Some(label) = line.strip_suffix(':') {
            let label = label.trim();
            if !is_ident(label) {
                return Err(err(AsmErrorKind::BadHeader(line.to_string())));
            }
            if labels.insert((func, label), pc).is_some() {
                return Err(err(AsmErrorKind::DuplicateLabel(label.to_string())));
            }
            continue;
        }
        let mut parts = line.split_whitespace();
        let mnemonic = parts.next().unwrap_or_default();
        let op = Opcode::from_mnemonic(&mnemonic.to_ascii_uppercase())
            .ok_or_else(|| err(AsmErrorKind::UnknownMnemonic(mnemonic.to_string())))?;
        let operand = parts.next().map(|tok| match tok.parse::<usize>() {
            Ok(n) => Operand::Number(n),
            Err(_) => Operand::Name(tok),
        });
        if let Some(extra) = parts.next() {
            return Err(err(AsmErrorKind::UnknownMnemonic(extra.to_string())));
        }
        match (op.operand_len(), &operand) {
            (1, None) => return Err(err(AsmErrorKind::MissingOperand(op.mnemonic()))),
            (0, Some(_)) => return Err(err(AsmErrorKind::UnexpectedOperand(op.mnemonic()))),
            _ => {}
        }
        if !op.has_target() {
            if let Some(Operand::Name(_)) = operand {
                return Err(err(AsmErrorKind::NonNumericOperand(op.mnemonic())));
            }
        }
        pending.push(PendingInsn { line: line_no, func, op, operand, pc });
        pc += op.len();
        if pc > MAX_PROGRAM_LEN {
            return Err(err(AsmErrorKind::ProgramTooLarge));
        }
    }

    let boundaries: BTreeSet<usize> = pending.iter().map(|p| p.pc).collect();
    let mut code = Vec::with_capacity(pc);
    for insn in &pending {
        let err = |kind| AsmError { line: insn.line, kind };
        code.push(insn.op as u8);
        let Some(operand) = &insn.operand else { continue };
        let value = match operand {
            Operand::Number(n) => {
                if *n > u8::MAX as usize {
                    return Err(err(AsmErrorKind::OperandOutOfRange(n.to_string())));
                }
                if insn.op.has_target() && *n < pc && !boundaries.contains(n) {
                    return Err(err(AsmErrorKind::MisalignedTarget(*n)));
                }
                *n
            }
            Operand::Name(name) => {
                let resolved = if insn.op == Opcode::Call {
                    functions.iter().find(|f| f.name == *name).map(|f| f.entry)
                } else {
                    None
                };
                resolved
                    .or_else(|| labels.get(&(insn.func, *name)).copied())
                    .ok_or_else(|| err(AsmErrorKind::UndefinedLabel(name.to_string())))?
            }
        };
        if value > u8::MAX as usize {
            return Err(err(AsmErrorKind::OperandOutOfRange(value.to_string())));
        }
        code.push(value as u8);
    }

    let entry = functions
        .iter()
        .find(|f| f.name == "main")
        .or(functions.first())
        .map_or(0, |f| f.entry);
    Ok(Program { code, functions, entry })
}

/// Canonical assembly text. `assemble(&disassemble(p))` reproduces `p`
/// byte for byte; a lone arity-0 `main` at address 0 is printed without a
/// header.
pub fn disassemble(p: &Program) -> String {
    let boundaries = p.boundaries();
    let entries: HashMap<usize, &Function> = p.functions.iter().map(|f| (f.entry, f)).collect();
    let mut targets = BTreeSet::new();
    for insn in p.insns(0, p.code.len()) {
        if matches!(insn.op, Opcode::Jump | Opcode::JumpIf) {
            targets.insert(insn.target().unwrap_or_default());
        }
    }
    let implicit_main = p.functions.len() == 1
        && p.functions[0].name == "main"
        && p.functions[0].arity == 0
        && p.functions[0].entry == 0;

    let mut lines = Vec::new();
    let mut pc = 0;
    while pc < p.code.len() {
        if let Some(f) = entries.get(&pc) {
            if !implicit_main {
                lines.push(format!("func {}/{}:", f.name, f.arity));
            }
        }
        if targets.contains(&pc) {
            lines.push(format!("L{pc}:"));
        }
        let Some(insn) = p.decode(pc) else { break };
        let text = match (insn.op, insn.operand) {
            (op, None) => op.mnemonic().to_string(),
            (Opcode::Call, Some(t)) => match entries.get(&(t as usize)) {
                Some(f) => format!("CALL {}", f.name),
                None => format!("CALL {t}"),
            },
            (op @ (Opcode::Jump | Opcode::JumpIf), Some(t)) => {
                let t = t as usize;
                let in_body = p
                    .function_containing(pc)
                    .is_some_and(|f| {
                        let (s, e) = p.body(f);
                        (s..e).contains(&t)
                    });
                if boundaries.contains(&t) && in_body {
                    format!("{op} L{t}")
                } else {
                    format!("{op} {t}")
                }
            }
            (op, Some(n)) => format!("{op} {n}"),
        };
        lines.push(text);
        pc = insn.next_pc();
    }
    lines.join("\n")
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    UnknownOpcode(u8),
    TruncatedOperand,
    TargetOutOfRange(usize),
    MisalignedTarget(usize),
    CrossFunctionJump(usize),
    CallTargetNotFunction(usize),
    OutsideFunction,
    FallsOffFunction,
    BadFunctionEntry(usize),
    MissingMain,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownOpcode(b) => write!(f, "unknown opcode byte {b}"),
            Violation::TruncatedOperand => write!(f, "truncated operand"),
            Violation::TargetOutOfRange(t) => write!(f, "target out of range ({t})"),
            Violation::MisalignedTarget(t) => write!(f, "misaligned target ({t})"),
            Violation::CrossFunctionJump(t) => write!(f, "jump leaves its function ({t})"),
            Violation::CallTargetNotFunction(t) => write!(f, "call target {t} is not a function entry"),
            Violation::OutsideFunction => write!(f, "instruction outside any function"),
            Violation::FallsOffFunction => write!(f, "control falls off the end of the function"),
            Violation::BadFunctionEntry(e) => write!(f, "function entry {e} is not an instruction start"),
            Violation::MissingMain => write!(f, "program has no main function"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub offset: usize,
    pub violation: Violation,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "offset {}: {}", self.offset, self.violation)
    }
}

/// Checks every structural invariant of a program. Empty means valid.
pub fn validate(p: &Program) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut push = |offset, violation| out.push(Diagnostic { offset, violation });
    if p.code.is_empty() {
        return Vec::new();
    }

    // Linear decode first; everything else is relative to it.
    let mut insns = Vec::new();
    let mut pc = 0;
    while pc < p.code.len() {
        let Some(op) = Opcode::from_byte(p.code[pc]) else {
            push(pc, Violation::UnknownOpcode(p.code[pc]));
            pc += 1;
            continue;
        };
        if pc + op.len() > p.code.len() {
            push(pc, Violation::TruncatedOperand);
            break;
        }
        let operand = (op.operand_len() == 1).then(|| p.code[pc + 1]);
        insns.push(Insn { pc, op, operand });
        pc += op.len();
    }
    let boundaries: BTreeSet<usize> = insns.iter().map(|i| i.pc).collect();

    let mut entries = BTreeMap::new();
    for f in &p.functions {
        if !boundaries.contains(&f.entry) {
            push(f.entry, Violation::BadFunctionEntry(f.entry));
        }
        entries.insert(f.entry, f);
    }
    if p.function_at_entry(p.entry).is_none() {
        push(p.entry, Violation::MissingMain);
    }
    let first_entry = p.functions.first().map_or(usize::MAX, |f| f.entry);

    for insn in &insns {
        if insn.pc < first_entry {
            push(insn.pc, Violation::OutsideFunction);
            continue;
        }
        let Some(t) = insn.target() else { continue };
        if t >= p.code.len() {
            push(insn.pc, Violation::TargetOutOfRange(t));
        } else if !boundaries.contains(&t) {
            push(insn.pc, Violation::MisalignedTarget(t));
        } else if insn.op == Opcode::Call {
            if !entries.contains_key(&t) {
                push(insn.pc, Violation::CallTargetNotFunction(t));
            }
        } else if p.function_containing(insn.pc) != p.function_containing(t) {
            push(insn.pc, Violation::CrossFunctionJump(t));
        }
    }

    for func in 0..p.functions.len() {
        let (start, end) = p.body(func);
        if start >= end {
            continue;
        }
        let last = insns.iter().rfind(|i| i.pc >= start && i.pc < end);
        if let Some(last) = last {
            if !last.op.is_terminator() {
                push(last.pc, Violation::FallsOffFunction);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const COUNTDOWN: &str = "\
func main/1:
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
    fn smallest_program() {
        let p = assemble("CONST_INT 1\nEXIT").unwrap();
        assert_eq!(p.code, vec![Opcode::ConstInt as u8, 1, Opcode::Exit as u8]);
        assert_eq!(disassemble(&p), "CONST_INT 1\nEXIT");
    }

    #[test]
    fn countdown_mnemonics_survive_round_trip() {
        let p = assemble(COUNTDOWN).unwrap();
        let mnemonics: Vec<_> = p.insns(0, p.len()).map(|i| i.op.mnemonic()).collect();
        assert_eq!(
            mnemonics,
            ["DUP", "CONST_INT", "GT", "JUMP_IF", "CONST_INT", "SUB", "JUMP", "CALL", "RET", "RET"]
        );
        // else-branch address is recomputed, not hard-coded
        assert_eq!(p.decode(4).unwrap().target(), Some(11));
        let again = assemble(&disassemble(&p)).unwrap();
        assert_eq!(again, p);
        assert!(validate(&p).is_empty());
    }

    #[test]
    fn undefined_label() {
        let e = assemble("JUMP missing_label").unwrap_err();
        assert_eq!(e.kind, AsmErrorKind::UndefinedLabel("missing_label".into()));
    }

    #[test]
    fn assembler_errors() {
        assert!(matches!(assemble("FROB").unwrap_err().kind, AsmErrorKind::UnknownMnemonic(_)));
        assert!(matches!(
            assemble("CONST_INT 300\nEXIT").unwrap_err().kind,
            AsmErrorKind::OperandOutOfRange(_)
        ));
        assert!(matches!(
            assemble("CONST_INT 1\nJUMP 1").unwrap_err().kind,
            AsmErrorKind::MisalignedTarget(1)
        ));
        assert!(matches!(assemble("ADD 3").unwrap_err().kind, AsmErrorKind::UnexpectedOperand(_)));
        assert!(matches!(assemble("JUMP").unwrap_err().kind, AsmErrorKind::MissingOperand(_)));
        assert!(matches!(
            assemble("a:\na:\nEXIT").unwrap_err().kind,
            AsmErrorKind::DuplicateLabel(_)
        ));
    }

    #[test]
    fn labels_are_function_local() {
        let src = "func main/0:\nCALL f\nl:\nJUMP done\ndone:\nEXIT\nfunc f/0:\nl:\nCONST_INT 2\nRET\n";
        let p = assemble(src).unwrap();
        assert!(validate(&p).is_empty(), "{:?}", validate(&p));
        assert!(assemble("func main/0:\nJUMP x\nfunc f/0:\nx:\nRET").is_err());
    }

    #[test]
    fn empty_program() {
        let p = assemble("").unwrap();
        assert!(p.is_empty());
        assert_eq!(disassemble(&p), "");
        assert!(validate(&p).is_empty());
    }

    #[test]
    fn misaligned_jump_is_diagnosed() {
        // JUMP 1 lands inside CONST_INT's operand.
        let p = Program {
            code: vec![Opcode::ConstInt as u8, 5, Opcode::Jump as u8, 1],
            functions: vec![Function { name: "main".into(), entry: 0, arity: 0 }],
            entry: 0,
        };
        let diags = validate(&p);
        assert_eq!(diags.len(), 1, "{diags:?}");
        assert_eq!(diags[0].violation, Violation::MisalignedTarget(1));
        assert_eq!(diags[0].offset, 2);
    }

    #[test]
    fn call_outside_code_is_diagnosed() {
        let p = Program {
            code: vec![Opcode::Call as u8, 200, Opcode::Exit as u8],
            functions: vec![Function { name: "main".into(), entry: 0, arity: 0 }],
            entry: 0,
        };
        let diags = validate(&p);
        assert_eq!(diags.len(), 1, "{diags:?}");
        assert_eq!(diags[0].violation, Violation::TargetOutOfRange(200));
    }

    #[test]
    fn falling_off_a_function_is_diagnosed() {
        let p = assemble("func main/0:\nCONST_INT 1\nfunc f/0:\nRET").unwrap();
        let diags = validate(&p);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].violation, Violation::FallsOffFunction);
    }

    #[test]
    fn function_table_round_trip() {
        let p = assemble(COUNTDOWN).unwrap();
        let mut buf = Vec::new();
        p.write_function_table(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"name":"main","entry":0,"arity":1}"#);
        let back = Program::from_parts(p.code.clone(), &buf[..]).unwrap();
        assert_eq!(back, p);
    }
}
