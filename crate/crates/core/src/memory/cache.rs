//! Set-associative LRU cache with one taint bit per 64-bit chunk.
//!
//! Lines hold tags and metadata only. Data always lives in physical memory,
//! which makes write-back indistinguishable from write-through for the
//! guest, so the dirty bit is kept purely as bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::SimError;

pub const LINE_SIZE: u64 = 64;
pub const CHUNKS_PER_LINE: u64 = LINE_SIZE / 8;
pub const ALL_TAINTED: u8 = 0xff;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheGeometry {
    pub size: u64,
    pub ways: usize,
    pub line: u64,
}

impl Default for CacheGeometry {
    fn default() -> Self {
        CacheGeometry {
            size: 32 * 1024,
            ways: 8,
            line: LINE_SIZE,
        }
    }
}

impl CacheGeometry {
    pub fn sets(&self) -> usize {
        (self.size / self.line) as usize / self.ways
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.line != LINE_SIZE {
            return Err(SimError::Config(format!(
                "cache line must be {LINE_SIZE} bytes"
            )));
        }
        if self.ways == 0 || !self.size.is_multiple_of(self.line * self.ways as u64) {
            return Err(SimError::Config(
                "cache size must be a multiple of ways * line".into(),
            ));
        }
        if !self.sets().is_power_of_two() {
            return Err(SimError::Config(
                "number of cache sets must be a power of two".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheLine {
    pub valid: bool,
    /// Line address (`paddr / 64`).
    pub tag: u64,
    pub taint: u8,
    pub lru_age: u32,
    pub dirty: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cache {
    geometry: CacheGeometry,
    lines: Vec<CacheLine>,
}

/// Outcome of a lookup-and-fill.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub hit: bool,
    pub set: usize,
    pub way: usize,
    pub evicted: Option<CacheLine>,
}

impl Cache {
    pub fn new(geometry: CacheGeometry) -> Result<Cache, SimError> {
        geometry.validate()?;
        Ok(Cache {
            geometry,
            lines: vec![CacheLine::default(); geometry.sets() * geometry.ways],
        })
    }

    pub fn geometry(&self) -> CacheGeometry {
        self.geometry
    }

    /// Set index of a physical address. Line-address bits above the set
    /// field are folded in so that page-strided lines spread over all sets.
    pub fn set_index(&self, paddr: u64) -> usize {
        let line = paddr / LINE_SIZE;
        let bits = self.geometry.sets().trailing_zeros();
        let mask = self.geometry.sets() as u64 - 1;
        ((line ^ (line >> bits) ^ (line >> (2 * bits))) & mask) as usize
    }

    pub fn line(&self, set: usize, way: usize) -> &CacheLine {
        &self.lines[set * self.geometry.ways + way]
    }

    fn line_mut(&mut self, set: usize, way: usize) -> &mut CacheLine {
        &mut self.lines[set * self.geometry.ways + way]
    }

    pub fn set_lines(&self, set: usize) -> &[CacheLine] {
        let w = self.geometry.ways;
        &self.lines[set * w..(set + 1) * w]
    }

    pub fn lookup(&self, paddr: u64) -> Option<(usize, usize)> {
        let set = self.set_index(paddr);
        let tag = paddr / LINE_SIZE;
        self.set_lines(set)
            .iter()
            .position(|l| l.valid && l.tag == tag)
            .map(|way| (set, way))
    }

    pub fn resident(&self, paddr: u64) -> bool {
        self.lookup(paddr).is_some()
    }

    fn touch(&mut self, set: usize, way: usize) {
        let w = self.geometry.ways;
        let old = self.line(set, way).lru_age;
        for (i, l) in self.lines[set * w..(set + 1) * w].iter_mut().enumerate() {
            if i != way && l.valid && l.lru_age <= old {
                l.lru_age += 1;
            }
        }
        self.line_mut(set, way).lru_age = 0;
    }

    /// Way to replace in `set`: an invalid way if any, else the oldest.
    pub fn victim(&self, set: usize) -> usize {
        let lines = self.set_lines(set);
        if let Some(i) = lines.iter().position(|l| !l.valid) {
            return i;
        }
        let mut best = 0;
        for (i, l) in lines.iter().enumerate() {
            if l.lru_age > lines[best].lru_age {
                best = i;
            }
        }
        best
    }

    /// Look up `paddr`, filling on a miss with `fill_taint`.
    pub fn access(&mut self, paddr: u64, fill_taint: u8) -> Access {
        if let Some((set, way)) = self.lookup(paddr) {
            self.touch(set, way);
            return Access {
                hit: true,
                set,
                way,
                evicted: None,
            };
        }
        let set = self.set_index(paddr);
        let way = self.victim(set);
        let old = *self.line(set, way);
        let evicted = old.valid.then_some(old);
        // A fresh line is older than nothing, so treat it as maximally old
        // before touching it.
        *self.line_mut(set, way) = CacheLine {
            valid: true,
            tag: paddr / LINE_SIZE,
            taint: fill_taint,
            lru_age: u32::MAX,
            dirty: false,
        };
        self.touch(set, way);
        Access {
            hit: false,
            set,
            way,
            evicted,
        }
    }

    pub fn chunk_taint(&self, set: usize, way: usize, paddr: u64) -> bool {
        self.line(set, way).taint & chunk_bit(paddr) != 0
    }

    pub fn set_chunk_taint(&mut self, set: usize, way: usize, paddr: u64, taint: bool) {
        let l = self.line_mut(set, way);
        if taint {
            l.taint |= chunk_bit(paddr);
        } else {
            l.taint &= !chunk_bit(paddr);
        }
    }

    pub fn mark_dirty(&mut self, set: usize, way: usize) {
        self.line_mut(set, way).dirty = true;
    }

    pub fn evict(&mut self, set: usize, way: usize) -> Option<CacheLine> {
        let l = self.line_mut(set, way);
        let old = *l;
        *l = CacheLine::default();
        old.valid.then_some(old)
    }

    pub fn flush(&mut self, paddr: u64) -> Option<CacheLine> {
        self.lookup(paddr).and_then(|(s, w)| self.evict(s, w))
    }

    pub fn flush_all(&mut self) {
        self.lines.fill(CacheLine::default());
    }

    /// Tags and LRU ages, the part of the state an attacker can observe.
    pub fn observable_state(&self) -> Vec<(bool, u64, u32)> {
        self.lines
            .iter()
            .map(|l| (l.valid, l.tag, l.lru_age))
            .collect()
    }
}

pub fn chunk_bit(paddr: u64) -> u8 {
    1 << ((paddr % LINE_SIZE) / 8)
}
