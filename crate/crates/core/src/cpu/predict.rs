//! Branch predictors: PHT, BTB and RSB.

use serde::{Deserialize, Serialize};

use crate::isa::INST_SIZE;

fn slot(ip: u64, size: usize) -> usize {
    ((ip / INST_SIZE) % size as u64) as usize
}

/// Two-bit saturating counters indexed by instruction address.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pht {
    counters: Vec<u8>,
}

impl Pht {
    pub fn new(size: usize) -> Pht {
        // Weakly not-taken.
        Pht {
            counters: vec![1; size.max(1)],
        }
    }

    pub fn predict(&self, ip: u64) -> bool {
        self.counters[slot(ip, self.counters.len())] >= 2
    }

    pub fn update(&mut self, ip: u64, taken: bool) {
        let i = slot(ip, self.counters.len());
        let c = &mut self.counters[i];
        *c = if taken {
            (*c + 1).min(3)
        } else {
            c.saturating_sub(1)
        };
    }

    pub fn counter(&self, ip: u64) -> u8 {
        self.counters[slot(ip, self.counters.len())]
    }
}

/// Direct-mapped branch target buffer, tagged with the full branch address.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Btb {
    entries: Vec<Option<(u64, u64)>>,
}

impl Btb {
    pub fn new(size: usize) -> Btb {
        Btb {
            entries: vec![None; size.max(1)],
        }
    }

    pub fn predict(&self, ip: u64) -> Option<u64> {
        match self.entries[slot(ip, self.entries.len())] {
            Some((tag, target)) if tag == ip => Some(target),
            _ => None,
        }
    }

    pub fn update(&mut self, ip: u64, target: u64) {
        let i = slot(ip, self.entries.len());
        self.entries[i] = Some((ip, target));
    }
}

/// Circular return stack. Overflow overwrites the oldest entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rsb {
    buf: Vec<u64>,
    top: usize,
    len: usize,
}

impl Rsb {
    pub fn new(depth: usize) -> Rsb {
        Rsb {
            buf: vec![0; depth.max(1)],
            top: 0,
            len: 0,
        }
    }

    pub fn push(&mut self, ret: u64) {
        let d = self.buf.len();
        self.buf[self.top] = ret;
        self.top = (self.top + 1) % d;
        self.len = (self.len + 1).min(d);
    }

    pub fn pop(&mut self) -> Option<u64> {
        if self.len == 0 {
            return None;
        }
        let d = self.buf.len();
        self.top = (self.top + d - 1) % d;
        self.len -= 1;
        Some(self.buf[self.top])
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predictors {
    pub pht: Pht,
    pub btb: Btb,
    pub rsb: Rsb,
}

impl Predictors {
    pub fn new(pht_size: usize, btb_size: usize, rsb_depth: usize) -> Predictors {
        Predictors {
            pht: Pht::new(pht_size),
            btb: Btb::new(btb_size),
            rsb: Rsb::new(rsb_depth),
        }
    }

    /// Predicted return target: RSB top, falling back to the BTB.
    pub fn predict_return(&mut self, ip: u64) -> Option<u64> {
        self.rsb.pop().or_else(|| self.btb.predict(ip))
    }
}
