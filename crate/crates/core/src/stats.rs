use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub retired_instructions: u64,
    pub transient_uops: u64,
    pub transient_windows: u64,
    pub mispredictions: u64,
    pub stl_bypasses: u64,
    pub deferred_faults: u64,
    /// Register writes that left the destination tainted.
    pub taint_set_events: u64,
    /// Register writes that cleared an existing taint.
    pub taint_clear_events: u64,
    /// Taint set events caused only by eviction or cold misses.
    pub overapprox_events: u64,
    pub nt_loads: u64,
    pub nt_stores: u64,
    pub syscall_count: u64,
    pub interrupts: u64,
    pub cycles: u64,
}
