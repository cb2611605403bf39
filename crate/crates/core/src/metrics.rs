//! Counters and timings collected by a VM run.

use std::time::Duration;

/// Op count of one installed compilation unit (a root or a bridge).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnitOps {
    pub name: String,
    pub ops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunMetrics {
    /// Ops recorded into installed units: tracing-tier roots and bridges as
    /// recorded, baseline trees as stitched. Labels are not counted.
    pub trace_ops: u64,
    pub units: Vec<UnitOps>,
    pub trace_time_ns: u64,
    pub stitch_time_ns: u64,
    pub optimize_time_ns: u64,
    /// Instructions decoded by an interpreter loop (including the recorder).
    pub dispatches: u64,
    /// Guest instructions executed, however they were executed.
    pub handler_calls: u64,
    /// Residual calls made from compiled code.
    pub residual_calls: u64,
    pub guard_fails: u64,
    pub aborts: u64,
    pub bridges: u64,
    /// Wall time per iteration, filled by the harness.
    pub iteration_ns: Vec<u64>,
}

impl RunMetrics {
    pub fn add_time(slot: &mut u64, d: Duration) {
        *slot = slot.saturating_add(d.as_nanos() as u64);
    }

    pub fn compile_ns(&self) -> u64 {
        self.trace_time_ns + self.stitch_time_ns + self.optimize_time_ns
    }

    /// Field-wise difference, for per-iteration deltas. Unit lists and
    /// iteration times are not diffed.
    pub fn delta_since(&self, before: &RunMetrics) -> RunMetrics {
        RunMetrics {
            trace_ops: self.trace_ops - before.trace_ops,
            units: self.units[before.units.len().min(self.units.len())..].to_vec(),
            trace_time_ns: self.trace_time_ns - before.trace_time_ns,
            stitch_time_ns: self.stitch_time_ns - before.stitch_time_ns,
            optimize_time_ns: self.optimize_time_ns - before.optimize_time_ns,
            dispatches: self.dispatches - before.dispatches,
            handler_calls: self.handler_calls - before.handler_calls,
            residual_calls: self.residual_calls - before.residual_calls,
            guard_fails: self.guard_fails - before.guard_fails,
            aborts: self.aborts - before.aborts,
            bridges: self.bridges - before.bridges,
            iteration_ns: Vec::new(),
        }
    }
}
