//! Simulator configuration.

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::memory::{CacheGeometry, NtEncoding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Latencies {
    pub hit: u64,
    pub miss: u64,
    /// Receiver classifies a probe as a hit when latency < threshold.
    pub threshold: u64,
}

impl Default for Latencies {
    fn default() -> Self {
        Latencies {
            hit: 10,
            miss: 110,
            threshold: 60,
        }
    }
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub nt_encoding: NtEncoding,
    pub context_enabled: bool,
    /// Map secret pages uncacheable instead of non-transient.
    #[serde(default)]
    pub light_mode: bool,
    /// Speculation window in µops. 0 disables speculation.
    pub window: u64,
    pub cache: CacheGeometry,
    pub latencies: Latencies,
    pub rsb_depth: usize,
    pub pht_size: usize,
    pub btb_size: usize,
    /// Unused: the simulator is deterministic.
    pub seed: u64,
    pub phys_size: u64,
    /// Instructions until a store whose address came from a missing load resolves.
    pub store_resolve_delay: u64,
    pub lfence_stall: u64,
    pub mispredict_penalty: u64,
    pub interrupt_cost: u64,
    pub timer_period: u64,
    pub max_cycles: u64,
    #[doc(hidden)]
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub taint_propagation: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            nt_encoding: NtEncoding::ReservedBit51,
            context_enabled: true,
            light_mode: false,
            window: 64,
            cache: CacheGeometry::default(),
            latencies: Latencies::default(),
            rsb_depth: 16,
            pht_size: 1024,
            btb_size: 256,
            seed: 0,
            phys_size: 16 << 20,
            store_resolve_delay: 20,
            lfence_stall: 20,
            mispredict_penalty: 15,
            interrupt_cost: 10,
            timer_period: 10_000,
            max_cycles: 50_000_000,
            taint_propagation: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.cache.validate()?;
        if self.pht_size == 0 || self.btb_size == 0 || self.rsb_depth == 0 {
            return Err(SimError::Config("predictor sizes must be nonzero".into()));
        }
        if self.latencies.hit >= self.latencies.miss {
            return Err(SimError::Config(
                "hit latency must be below miss latency".into(),
            ));
        }
        if !self.phys_size.is_multiple_of(4096) || self.phys_size < 1 << 20 {
            return Err(SimError::Config(
                "physical memory must be page-aligned and at least 1 MiB".into(),
            ));
        }
        if self.light_mode && self.context_enabled {
            return Err(SimError::Config(
                "light mode replaces the non-transient mapping; disable context".into(),
            ));
        }
        Ok(())
    }

    /// The receiver threshold cannot separate hits from misses.
    pub fn receiver_misconfigured(&self) -> bool {
        let l = self.latencies;
        !(l.hit < l.threshold && l.threshold <= l.miss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let c = SimConfig {
            nt_encoding: NtEncoding::PatMemoryType,
            window: 7,
            ..Default::default()
        };
        let s = serde_json::to_string(&c).unwrap();
        assert!(!s.contains("taint_propagation"));
        assert_eq!(serde_json::from_str::<SimConfig>(&s).unwrap(), c);
        let sab = SimConfig {
            taint_propagation: false,
            ..Default::default()
        };
        let s = serde_json::to_string(&sab).unwrap();
        assert_eq!(serde_json::from_str::<SimConfig>(&s).unwrap(), sab);
    }

    #[test]
    fn receiver_guard() {
        let mut c = SimConfig::default();
        assert!(!c.receiver_misconfigured());
        c.latencies.threshold = 111;
        assert!(c.receiver_misconfigured());
    }
}
