//! Page-table entries, memory types and the non-transient encodings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const PAGE_SIZE: u64 = 4096;
pub const PAGE_SHIFT: u32 = 12;

/// 64-bit page-table entry with the x86-64 bit layout.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pte(pub u64);

impl Pte {
    pub const PRESENT: u64 = 1 << 0;
    pub const RW: u64 = 1 << 1;
    pub const USER: u64 = 1 << 2;
    pub const PWT: u64 = 1 << 3;
    pub const PCD: u64 = 1 << 4;
    pub const ACCESSED: u64 = 1 << 5;
    pub const DIRTY: u64 = 1 << 6;
    pub const PAT: u64 = 1 << 7;
    pub const GLOBAL: u64 = 1 << 8;
    pub const IGNORED_11: u64 = 1 << 11;
    pub const RESERVED_51: u64 = 1 << 51;
    pub const NX: u64 = 1 << 63;
    /// Bits 12..45.
    pub const PPN_MASK: u64 = ((1 << 34) - 1) << 12;
    /// Bits 46..51.
    pub const RESERVED_MASK: u64 = ((1 << 6) - 1) << 46;
    pub const PROTKEY_MASK: u64 = 0xf << 59;

    pub fn new(ppn: u64, flags: u64) -> Pte {
        Pte(((ppn << PAGE_SHIFT) & Pte::PPN_MASK) | (flags & !Pte::PPN_MASK))
    }

    pub fn has(self, bit: u64) -> bool {
        self.0 & bit != 0
    }

    pub fn with(self, bit: u64, on: bool) -> Pte {
        if on {
            Pte(self.0 | bit)
        } else {
            Pte(self.0 & !bit)
        }
    }

    pub fn present(self) -> bool {
        self.has(Pte::PRESENT)
    }

    pub fn ppn(self) -> u64 {
        (self.0 & Pte::PPN_MASK) >> PAGE_SHIFT
    }

    /// PAT entry selected by this mapping: `pat*4 + pcd*2 + pwt`.
    pub fn pat_index(self) -> usize {
        (self.has(Pte::PAT) as usize) << 2
            | (self.has(Pte::PCD) as usize) << 1
            | self.has(Pte::PWT) as usize
    }

    /// Set the pat/pcd/pwt bits so that the mapping selects `index`.
    pub fn with_pat_index(self, index: usize) -> Pte {
        self.with(Pte::PAT, index & 4 != 0)
            .with(Pte::PCD, index & 2 != 0)
            .with(Pte::PWT, index & 1 != 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NtEncoding {
    /// PTE bit 51.
    #[serde(rename = "reserved")]
    ReservedBit51,
    /// PTE bit 11, honoured only when the control-register gate is set.
    #[serde(rename = "ignored")]
    IgnoredBit11WithCR,
    /// PAT entry of type NS.
    #[serde(rename = "pat")]
    PatMemoryType,
}

impl NtEncoding {
    pub const ALL: [NtEncoding; 3] = [
        NtEncoding::ReservedBit51,
        NtEncoding::IgnoredBit11WithCR,
        NtEncoding::PatMemoryType,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NtEncoding::ReservedBit51 => "reserved",
            NtEncoding::IgnoredBit11WithCR => "ignored",
            NtEncoding::PatMemoryType => "pat",
        }
    }

    /// Mark `pte` as non-transient under this encoding. For the PAT variant
    /// the mapping is pointed at PAT entry 2, which must hold NS.
    pub fn mark(self, pte: Pte) -> Pte {
        match self {
            NtEncoding::ReservedBit51 => pte.with(Pte::RESERVED_51, true),
            NtEncoding::IgnoredBit11WithCR => pte.with(Pte::IGNORED_11, true),
            NtEncoding::PatMemoryType => pte.with_pat_index(NS_PAT_INDEX),
        }
    }

    /// Non-transient property of a mapping.
    pub fn is_nt(self, pte: Pte, cr_enable: bool, pat: &PatTable) -> bool {
        match self {
            NtEncoding::ReservedBit51 => pte.has(Pte::RESERVED_51),
            NtEncoding::IgnoredBit11WithCR => pte.has(Pte::IGNORED_11) && cr_enable,
            NtEncoding::PatMemoryType => pat.entry(pte.pat_index()) == MemoryType::NS,
        }
    }

    /// Reserved bits that a valid mapping may have set.
    pub fn allowed_reserved(self) -> u64 {
        match self {
            NtEncoding::ReservedBit51 => Pte::RESERVED_51,
            _ => 0,
        }
    }
}

impl fmt::Display for NtEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NtEncoding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NtEncoding::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown encoding `{s}` (expected reserved, ignored or pat)"))
    }
}

/// PAT entry the loader uses for non-transient mappings in the PAT variant.
pub const NS_PAT_INDEX: usize = 2;
/// PAT entry the loader uses for uncacheable mappings in light mode.
pub const UC_PAT_INDEX: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum MemoryType {
    UC = 0,
    WC = 1,
    NS = 2,
    Reserved = 3,
    WT = 4,
    WP = 5,
    WB = 6,
    UCminus = 7,
}

impl MemoryType {
    pub fn from_bits(v: u8) -> MemoryType {
        match v & 7 {
            0 => MemoryType::UC,
            1 => MemoryType::WC,
            2 => MemoryType::NS,
            3 => MemoryType::Reserved,
            4 => MemoryType::WT,
            5 => MemoryType::WP,
            6 => MemoryType::WB,
            _ => MemoryType::UCminus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatTable {
    entries: [MemoryType; 8],
}

impl Default for PatTable {
    /// Power-on value.
    fn default() -> Self {
        use MemoryType::*;
        PatTable {
            entries: [WB, WT, UCminus, UC, WB, WT, UCminus, UC],
        }
    }
}

impl PatTable {
    pub fn entry(&self, index: usize) -> MemoryType {
        self.entries[index]
    }

    pub fn set(&mut self, index: usize, ty: MemoryType) {
        self.entries[index] = ty;
    }

    /// `IA32_PAT` layout: entry i in byte i.
    pub fn to_msr(&self) -> u64 {
        self.entries
            .iter()
            .enumerate()
            .fold(0, |acc, (i, t)| acc | (*t as u64) << (8 * i))
    }

    pub fn from_msr(v: u64) -> PatTable {
        let mut entries = [MemoryType::WB; 8];
        for (i, e) in entries.iter_mut().enumerate() {
            *e = MemoryType::from_bits((v >> (8 * i)) as u8);
        }
        PatTable { entries }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pat_index_all_combinations() {
        for pat in 0..2u64 {
            for pcd in 0..2u64 {
                for pwt in 0..2u64 {
                    let pte = Pte(pat << 7 | pcd << 4 | pwt << 3);
                    assert_eq!(pte.pat_index() as u64, pat * 4 + pcd * 2 + pwt);
                }
            }
        }
    }

    #[test]
    fn encodings_resolve() {
        let pat = PatTable::default();
        let pte = Pte::new(5, Pte::PRESENT);
        assert!(NtEncoding::ReservedBit51.is_nt(pte.with(Pte::RESERVED_51, true), false, &pat));
        assert!(!NtEncoding::IgnoredBit11WithCR.is_nt(
            pte.with(Pte::IGNORED_11, true),
            false,
            &pat
        ));
        assert!(NtEncoding::IgnoredBit11WithCR.is_nt(pte.with(Pte::IGNORED_11, true), true, &pat));
        let ns = Pte::new(5, Pte::PRESENT | Pte::PCD);
        assert!(!NtEncoding::PatMemoryType.is_nt(ns, true, &pat));
        let mut pat = pat;
        pat.set(2, MemoryType::NS);
        assert!(NtEncoding::PatMemoryType.is_nt(ns, true, &pat));
        assert_eq!(
            NtEncoding::PatMemoryType.mark(pte).pat_index(),
            NS_PAT_INDEX
        );
    }

    #[test]
    fn pat_msr_round_trip() {
        let mut pat = PatTable::default();
        pat.set(2, MemoryType::NS);
        assert_eq!(PatTable::from_msr(pat.to_msr()), pat);
        assert_eq!(PatTable::default().to_msr(), 0x0007_0406_0007_0406);
    }

    #[test]
    fn ppn_round_trip() {
        let pte = Pte::new(0x3_ffff_ffff, Pte::PRESENT | Pte::NX);
        assert_eq!(pte.ppn(), 0x3_ffff_ffff);
        assert!(pte.has(Pte::NX));
        assert_eq!(pte.0 & Pte::RESERVED_MASK, 0);
    }
}
