use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perms {
    pub r: bool,
    pub w: bool,
    pub x: bool,
    pub user: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlbEntry {
    pub vpn: u64,
    pub ppn: u64,
    pub perms: Perms,
    pub non_transient: bool,
    pub uncacheable: bool,
}

/// Fully associative TLB. Entries are only dropped by explicit shootdown.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tlb {
    entries: BTreeMap<u64, TlbEntry>,
}

impl Tlb {
    pub fn get(&self, vpn: u64) -> Option<&TlbEntry> {
        self.entries.get(&vpn)
    }

    pub fn fill(&mut self, e: TlbEntry) {
        self.entries.insert(e.vpn, e);
    }

    pub fn invalidate(&mut self, vpn: u64) {
        self.entries.remove(&vpn);
    }

    pub fn flush(&mut self) {
        self.entries.clear();
    }

    pub fn entries(&self) -> impl Iterator<Item = &TlbEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
