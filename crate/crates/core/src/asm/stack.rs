//! Stack usage from an execution trace.

use serde::{Deserialize, Serialize};

use crate::os::LoadedProgram;
use crate::state::ExecutionDomain;
use crate::trace::TraceRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackReport {
    /// Deepest use of the non-transient stack in bytes, over all tasks.
    pub nt_peak: u64,
    pub unprotected_peak: u64,
    pub nt_size: u64,
    pub unprotected_size: u64,
}

/// Peak depth of each stack, taken from architectural trace records.
pub fn stack_report(trace: &[TraceRecord], program: &LoadedProgram) -> StackReport {
    let mut r = StackReport {
        nt_peak: 0,
        unprotected_peak: 0,
        nt_size: 0,
        unprotected_size: 0,
    };
    for st in &program.stacks {
        r.nt_size = r.nt_size.max(st.nt_stack.end - st.nt_stack.start);
        r.unprotected_size = r
            .unprotected_size
            .max(st.unprotected_stack.end - st.unprotected_stack.start);
    }
    for t in trace
        .iter()
        .filter(|t| t.domain == ExecutionDomain::Architectural)
    {
        for st in &program.stacks {
            // the top itself counts as depth 0
            if (st.nt_stack.start..=st.nt_stack.end).contains(&t.sp) {
                r.nt_peak = r.nt_peak.max(st.nt_stack.end - t.sp);
            }
            if (st.unprotected_stack.start..=st.unprotected_stack.end).contains(&t.usp) {
                r.unprotected_peak = r.unprotected_peak.max(st.unprotected_stack.end - t.usp);
            }
        }
    }
    r
}
