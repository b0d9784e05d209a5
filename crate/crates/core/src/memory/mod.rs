//! Physical memory, page tables, TLB, PAT and the taint-carrying cache.

pub mod cache;
pub mod phys;
pub mod pte;
pub mod tlb;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use cache::{Cache, CacheGeometry, CacheLine, ALL_TAINTED, LINE_SIZE};
pub use phys::PhysMem;
pub use pte::{
    MemoryType, NtEncoding, PatTable, Pte, NS_PAT_INDEX, PAGE_SHIFT, PAGE_SIZE, UC_PAT_INDEX,
};
pub use tlb::{Perms, Tlb, TlbEntry};

use crate::error::{Fault, SimError};

/// Physical page of the host device. Byte stores at offset 0 append to the
/// host log; a store at offset 8 records the exit code.
pub const DEVICE_PADDR: u64 = 0;
pub const DEVICE_LOG: u64 = 0;
pub const DEVICE_EXIT: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Read,
    Write,
    Exec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Translation {
    pub paddr: u64,
    pub non_transient: bool,
    pub uncacheable: bool,
    pub device: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadResult {
    pub value: u64,
    pub chunk_tainted: bool,
    pub hit: bool,
    pub latency: u64,
    /// The chunk reported tainted although its last store was untainted.
    pub overapprox: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Device {
    pub log: Vec<u8>,
    pub exit_code: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorySystem {
    pub phys: PhysMem,
    pub cache: Cache,
    pub tlb: Tlb,
    page_table: BTreeMap<u64, Pte>,
    pat: PatTable,
    encoding: NtEncoding,
    cr_enable: bool,
    pub hit_lat: u64,
    pub miss_lat: u64,
    /// Non-transient chunks whose last store carried no taint.
    known_clean: BTreeSet<u64>,
    pub device: Device,
}

impl MemorySystem {
    pub fn new(
        phys_size: u64,
        geometry: CacheGeometry,
        encoding: NtEncoding,
        hit_lat: u64,
        miss_lat: u64,
    ) -> Result<MemorySystem, SimError> {
        Ok(MemorySystem {
            phys: PhysMem::new(phys_size),
            cache: Cache::new(geometry)?,
            tlb: Tlb::default(),
            page_table: BTreeMap::new(),
            pat: PatTable::default(),
            encoding,
            cr_enable: false,
            hit_lat,
            miss_lat,
            known_clean: BTreeSet::new(),
            device: Device::default(),
        })
    }

    pub fn encoding(&self) -> NtEncoding {
        self.encoding
    }

    pub fn cr_enable(&self) -> bool {
        self.cr_enable
    }

    /// Toggle the control-register gate. Cached translations are shot down.
    pub fn set_cr_enable(&mut self, on: bool) {
        self.cr_enable = on;
        self.tlb.flush();
    }

    pub fn pat(&self) -> &PatTable {
        &self.pat
    }

    pub fn set_pat(&mut self, pat: PatTable) {
        self.pat = pat;
        self.tlb.flush();
    }

    pub fn pte(&self, vpn: u64) -> Option<Pte> {
        self.page_table.get(&vpn).copied()
    }

    pub fn set_pte(&mut self, vpn: u64, pte: Pte) {
        self.page_table.insert(vpn, pte);
        self.tlb.invalidate(vpn);
    }

    pub fn page_table(&self) -> impl Iterator<Item = (u64, Pte)> + '_ {
        self.page_table.iter().map(|(v, p)| (*v, *p))
    }

    fn entry_for(&self, vpn: u64, pte: Pte) -> TlbEntry {
        TlbEntry {
            vpn,
            ppn: pte.ppn(),
            perms: Perms {
                r: true,
                w: pte.has(Pte::RW),
                x: !pte.has(Pte::NX),
                user: pte.has(Pte::USER),
            },
            non_transient: self.encoding.is_nt(pte, self.cr_enable, &self.pat),
            uncacheable: self.pat.entry(pte.pat_index()) == MemoryType::UC,
        }
    }

    fn walk(&self, vaddr: u64) -> Result<TlbEntry, Fault> {
        let vpn = vaddr >> PAGE_SHIFT;
        let pte = match self.page_table.get(&vpn) {
            Some(p) if p.present() => *p,
            _ => return Err(Fault::NotPresent(vaddr)),
        };
        if pte.0 & Pte::RESERVED_MASK & !self.encoding.allowed_reserved() != 0 {
            return Err(Fault::Protection(vaddr));
        }
        Ok(self.entry_for(vpn, pte))
    }

    fn translation(e: &TlbEntry, vaddr: u64) -> Translation {
        Translation {
            paddr: (e.ppn << PAGE_SHIFT) | (vaddr % PAGE_SIZE),
            non_transient: e.non_transient,
            uncacheable: e.uncacheable,
            device: e.ppn << PAGE_SHIFT == DEVICE_PADDR,
        }
    }

    /// Translate through the TLB, walking the page table on a miss.
    pub fn translate(
        &mut self,
        vaddr: u64,
        access: Access,
        user: bool,
    ) -> Result<Translation, Fault> {
        let vpn = vaddr >> PAGE_SHIFT;
        let e = match self.tlb.get(vpn) {
            Some(e) => *e,
            None => {
                let e = self.walk(vaddr)?;
                self.tlb.fill(e);
                e
            }
        };
        let ok = match access {
            Access::Read => e.perms.r,
            Access::Write => e.perms.w,
            Access::Exec => e.perms.x,
        };
        if !ok || (user && !e.perms.user) {
            return Err(Fault::Protection(vaddr));
        }
        Ok(Self::translation(&e, vaddr))
    }

    /// Translation ignoring permissions and without touching the TLB.
    pub fn translate_unchecked(&self, vaddr: u64) -> Option<Translation> {
        let vpn = vaddr >> PAGE_SHIFT;
        let e = match self.tlb.get(vpn) {
            Some(e) => *e,
            None => self.walk(vaddr).ok()?,
        };
        Some(Self::translation(&e, vaddr))
    }

    /// Every TLB entry agrees with a fresh walk of the page table.
    pub fn tlb_coherent(&self) -> bool {
        self.tlb
            .entries()
            .all(|e| match self.page_table.get(&e.vpn) {
                Some(p) if p.present() => self.entry_for(e.vpn, *p) == *e,
                _ => false,
            })
    }

    fn check_align(paddr: u64, width: u64) -> Result<(), SimError> {
        if !paddr.is_multiple_of(width) {
            return Err(SimError::Unaligned { addr: paddr, width });
        }
        Ok(())
    }

    pub fn load(&mut self, t: Translation, width: u64) -> Result<LoadResult, SimError> {
        let paddr = t.paddr;
        Self::check_align(paddr, width)?;
        if t.device {
            self.phys.read(paddr, width)?;
            return Ok(LoadResult {
                value: 0,
                chunk_tainted: false,
                hit: false,
                latency: self.miss_lat,
                overapprox: false,
            });
        }
        let value = self.phys.read(paddr, width)?;
        let chunk = paddr & !7;
        if t.uncacheable {
            let tainted = t.non_transient;
            return Ok(LoadResult {
                value,
                chunk_tainted: tainted,
                hit: false,
                latency: self.miss_lat,
                overapprox: tainted && self.known_clean.contains(&chunk),
            });
        }
        let fill = if t.non_transient { ALL_TAINTED } else { 0 };
        let acc = self.cache.access(paddr, fill);
        let tainted = t.non_transient && self.cache.chunk_taint(acc.set, acc.way, paddr);
        Ok(LoadResult {
            value,
            chunk_tainted: tainted,
            hit: acc.hit,
            latency: if acc.hit { self.hit_lat } else { self.miss_lat },
            overapprox: tainted && self.known_clean.contains(&chunk),
        })
    }

    /// Write-allocate store. On a non-transient page the chunk's taint
    /// becomes the source taint; a partial store can only add taint.
    /// Returns whether the line was resident.
    pub fn store(
        &mut self,
        t: Translation,
        width: u64,
        value: u64,
        src_taint: bool,
    ) -> Result<bool, SimError> {
        let paddr = t.paddr;
        Self::check_align(paddr, width)?;
        if t.device {
            self.phys.check_range(paddr, width)?;
            match paddr % PAGE_SIZE {
                DEVICE_LOG => self.device.log.push(value as u8),
                DEVICE_EXIT => self.device.exit_code = Some(value),
                _ => {}
            }
            return Ok(false);
        }
        self.phys.write(paddr, width, value)?;
        let chunk = paddr & !7;
        let full = width == 8;
        if t.non_transient {
            if src_taint {
                self.known_clean.remove(&chunk);
            } else if full {
                self.known_clean.insert(chunk);
            }
        }
        if t.uncacheable {
            return Ok(false);
        }
        let fill = if t.non_transient { ALL_TAINTED } else { 0 };
        let acc = self.cache.access(paddr, fill);
        self.cache.mark_dirty(acc.set, acc.way);
        if t.non_transient {
            let old = self.cache.chunk_taint(acc.set, acc.way, paddr);
            let new = if full { src_taint } else { old || src_taint };
            self.cache.set_chunk_taint(acc.set, acc.way, paddr, new);
        }
        Ok(acc.hit)
    }

    pub fn evict_line(&mut self, set: usize, way: usize) -> Option<CacheLine> {
        self.cache.evict(set, way)
    }

    pub fn clflush(&mut self, paddr: u64) -> Option<CacheLine> {
        self.cache.flush(paddr)
    }

    /// Flush every line overlapping `[paddr, paddr + len)`.
    pub fn flush_range(&mut self, paddr: u64, len: u64) -> usize {
        let start = paddr & !(LINE_SIZE - 1);
        (start..paddr + len)
            .step_by(LINE_SIZE as usize)
            .filter(|a| self.cache.flush(*a).is_some())
            .count()
    }

    /// Forget dataflow history for a chunk range (fresh secret contents).
    pub fn mark_unknown(&mut self, paddr: u64, len: u64) {
        let start = paddr & !7;
        let stale: Vec<u64> = self
            .known_clean
            .range(start..paddr + len)
            .copied()
            .collect();
        for c in stale {
            self.known_clean.remove(&c);
        }
    }

    /// Host-side view of guest memory: no cache, TLB or permission effects.
    pub fn peek(&self, vaddr: u64, len: usize) -> Option<Vec<u8>> {
        let mut out = vec![0; len];
        let mut done = 0;
        while done < len {
            let va = vaddr + done as u64;
            let n = ((PAGE_SIZE - va % PAGE_SIZE) as usize).min(len - done);
            let t = self.translate_unchecked(va)?;
            self.phys
                .read_bytes(t.paddr, &mut out[done..done + n])
                .ok()?;
            done += n;
        }
        Some(out)
    }

    pub fn poke(&mut self, vaddr: u64, data: &[u8]) -> Option<()> {
        let mut done = 0;
        while done < data.len() {
            let va = vaddr + done as u64;
            let n = ((PAGE_SIZE - va % PAGE_SIZE) as usize).min(data.len() - done);
            let t = self.translate_unchecked(va)?;
            self.phys.write_bytes(t.paddr, &data[done..done + n]).ok()?;
            done += n;
        }
        Some(())
    }
}
