//! A small meta-tracing virtual machine with two compilation tiers.
//!
//! The tracing tier records hot loops (and hot recursive functions) with
//! handler bodies inlined, the way a conventional tracing JIT does. The
//! baseline tier walks a whole function abstractly, emitting one residual
//! call per bytecode handler, and then stitches the resulting linear trace
//! back into a tree that mirrors the function's control flow. Both tiers
//! run on the same trace IR and executor, so trace sizes, compile times and
//! dispatch counts can be compared directly.

pub mod bytecode;
pub mod executor;
pub mod generate;
pub mod harness;
pub mod ir;
pub mod metrics;
pub mod optimizer;
pub mod stitcher;
pub mod tracer;
pub mod vm;

/// Guest values are signed 64-bit integers with wrapping arithmetic.
pub type Value = i64;

pub use bytecode::{assemble, disassemble, validate, FuncId, Opcode, Program};
pub use ir::{LinearTrace, TraceTree};
pub use metrics::RunMetrics;
pub use optimizer::Passes;
pub use vm::{Completion, Frame, Mode, Thresholds, Vm, VmConfig, VmError};
