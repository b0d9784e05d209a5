//! Architectural register state and the register-level taint contract.
//!
//! There are 56 taintable registers: 16 general purpose (`r0`..`r15`), 8
//! floating point (`f0`..`f7`) and 32 vector (`v0`..`v31`). Register `i`
//! owns bit `i` of the taint bitmap, which is also the layout of the
//! `IA32_TAINT` MSR. The instruction pointer and flags are never tainted.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Fault, SimError};

pub const NUM_GPR: usize = 16;
pub const NUM_FP: usize = 8;
pub const NUM_VEC: usize = 32;
pub const NUM_REGS: usize = NUM_GPR + NUM_FP + NUM_VEC;

/// Mask of the live bits of the taint bitmap.
pub const TAINT_MASK: u64 = (1 << NUM_REGS) - 1;

/// Value delivered by transient reads of secret state.
pub const DUMMY_VALUE: u64 = 0;

pub const IA32_TAINT: u64 = 0x10a0;
pub const IA32_SHADOW_TAINT: u64 = 0x10a1;
pub const IA32_PAT: u64 = 0x277;

/// Register index in the 0..56 taint space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reg(u8);

impl Reg {
    pub const SP: Reg = Reg(14);
    /// Unprotected stack pointer used by split-stack code.
    pub const USP: Reg = Reg(15);
    /// Frame pointer used by the default (non-split) frame lowering.
    pub const FP: Reg = Reg(13);

    pub fn new(index: u8) -> Result<Reg, SimError> {
        if (index as usize) < NUM_REGS {
            Ok(Reg(index))
        } else {
            Err(SimError::InvalidRegister(index))
        }
    }

    pub const fn gpr(n: u8) -> Reg {
        assert!(n < NUM_GPR as u8);
        Reg(n)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn bit(self) -> u64 {
        1 << self.0
    }

    pub fn all() -> impl Iterator<Item = Reg> {
        (0..NUM_REGS as u8).map(Reg)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = self.0 as usize;
        match i {
            14 => write!(f, "sp"),
            15 => write!(f, "usp"),
            0..=13 => write!(f, "r{i}"),
            16..=23 => write!(f, "f{}", i - 16),
            _ => write!(f, "v{}", i - 24),
        }
    }
}

impl FromStr for Reg {
    type Err = ();

    fn from_str(s: &str) -> Result<Reg, ()> {
        let s = s.to_ascii_lowercase();
        match s.as_str() {
            "sp" => return Ok(Reg::SP),
            "usp" => return Ok(Reg::USP),
            "fp" => return Ok(Reg::FP),
            _ => {}
        }
        let (base, limit, rest) = match s.split_at_checked(1) {
            Some(("r", rest)) => (0, NUM_GPR, rest),
            Some(("f", rest)) => (NUM_GPR, NUM_FP, rest),
            Some(("v", rest)) => (NUM_GPR + NUM_FP, NUM_VEC, rest),
            _ => return Err(()),
        };
        if rest.is_empty() || (rest.len() > 1 && rest.starts_with('0')) {
            return Err(());
        }
        let n: usize = rest.parse().map_err(|_| ())?;
        if n < limit {
            Ok(Reg((base + n) as u8))
        } else {
            Err(())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutionDomain {
    Architectural,
    Transient,
}

/// Operand width in bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Width {
    W8,
    W16,
    W32,
    W64,
}

impl Width {
    pub fn bytes(self) -> u64 {
        match self {
            Width::W8 => 1,
            Width::W16 => 2,
            Width::W32 => 4,
            Width::W64 => 8,
        }
    }

    pub fn bits(self) -> u32 {
        self.bytes() as u32 * 8
    }

    pub fn mask(self) -> u64 {
        match self {
            Width::W64 => u64::MAX,
            w => (1u64 << w.bits()) - 1,
        }
    }

    /// Whether a register write of this width replaces the whole register.
    /// 32-bit writes zero-extend, 8/16-bit writes merge.
    pub fn replaces_register(self) -> bool {
        matches!(self, Width::W32 | Width::W64)
    }

    pub fn from_bytes(n: u64) -> Option<Width> {
        match n {
            1 => Some(Width::W8),
            2 => Some(Width::W16),
            4 => Some(Width::W32),
            8 => Some(Width::W64),
            _ => None,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Width::W8 => ".b",
            Width::W16 => ".w",
            Width::W32 => ".d",
            Width::W64 => "",
        }
    }
}

/// Merge `value` into `old` the way a register write of width `width` does.
pub fn merge_width(old: u64, value: u64, width: Width) -> u64 {
    match width {
        Width::W64 => value,
        Width::W32 => value & Width::W32.mask(),
        w => (old & !w.mask()) | (value & w.mask()),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub zero: bool,
    pub sign: bool,
    pub carry: bool,
    pub overflow: bool,
}

impl Flags {
    pub fn to_bits(self) -> u64 {
        (self.zero as u64)
            | (self.sign as u64) << 1
            | (self.carry as u64) << 2
            | (self.overflow as u64) << 3
    }

    pub fn from_bits(bits: u64) -> Flags {
        Flags {
            zero: bits & 1 != 0,
            sign: bits & 2 != 0,
            carry: bits & 4 != 0,
            overflow: bits & 8 != 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterFile {
    /// gpr, fp and vec registers, in taint-bit order.
    pub regs: Vec<u64>,
    pub ip: u64,
    pub flags: Flags,
}

impl Default for RegisterFile {
    fn default() -> Self {
        RegisterFile {
            regs: vec![0; NUM_REGS],
            ip: 0,
            flags: Flags::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaintState {
    reg_taint: u64,
    msr_shadow: u64,
}

impl TaintState {
    pub fn bitmap(&self) -> u64 {
        self.reg_taint
    }

    pub fn shadow(&self) -> u64 {
        self.msr_shadow
    }

    pub fn is_tainted(&self, r: Reg) -> bool {
        self.reg_taint & r.bit() != 0
    }

    pub fn set(&mut self, r: Reg, taint: bool) {
        if taint {
            self.reg_taint |= r.bit();
        } else {
            self.reg_taint &= !r.bit();
        }
    }

    /// Replace the whole bitmap without touching the shadow.
    pub fn set_bitmap(&mut self, v: u64) {
        self.reg_taint = v & TAINT_MASK;
    }

    /// `IA32_TAINT` write: bitmap and shadow updated in one step.
    pub fn write_taint_msr(&mut self, v: u64) {
        self.reg_taint = v & TAINT_MASK;
        self.msr_shadow = v;
    }

    pub fn write_shadow_msr(&mut self, v: u64) {
        self.msr_shadow = v;
    }

    pub fn interrupt_entry(&mut self) {
        self.msr_shadow = self.reg_taint;
    }

    pub fn iret(&mut self) {
        self.reg_taint = self.msr_shadow & TAINT_MASK;
    }
}

/// Architectural state of the single simulated hart.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreState {
    pub rf: RegisterFile,
    pub taint: TaintState,
    pub privileged: bool,
}

impl CoreState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Read a register under `domain`. Transient reads of a tainted register
    /// yield the dummy value.
    pub fn read_reg(&self, r: Reg, domain: ExecutionDomain) -> (u64, bool) {
        let tainted = self.taint.is_tainted(r);
        let value = match domain {
            ExecutionDomain::Transient if tainted => DUMMY_VALUE,
            _ => self.rf.regs[r.index()],
        };
        (value, tainted)
    }

    /// Write a register with sub-register merge semantics. Taint is always
    /// whole-register.
    pub fn write_reg(&mut self, r: Reg, value: u64, taint: bool, width: Width) {
        let slot = &mut self.rf.regs[r.index()];
        *slot = merge_width(*slot, value, width);
        self.taint.set(r, taint);
    }

    pub fn reg(&self, r: Reg) -> u64 {
        self.rf.regs[r.index()]
    }

    pub fn set_reg(&mut self, r: Reg, value: u64) {
        self.rf.regs[r.index()] = value;
    }

    pub fn rdmsr(&self, which: u64) -> Result<u64, Fault> {
        if !self.privileged {
            return Err(Fault::Privilege);
        }
        match which {
            IA32_TAINT => Ok(self.taint.bitmap()),
            IA32_SHADOW_TAINT => Ok(self.taint.shadow()),
            _ => Err(Fault::UnknownMsr(which)),
        }
    }

    pub fn wrmsr(&mut self, which: u64, v: u64) -> Result<(), Fault> {
        if !self.privileged {
            return Err(Fault::Privilege);
        }
        match which {
            IA32_TAINT => self.taint.write_taint_msr(v),
            IA32_SHADOW_TAINT => self.taint.write_shadow_msr(v),
            _ => return Err(Fault::UnknownMsr(which)),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(n: u8) -> Reg {
        Reg::new(n).unwrap()
    }

    #[test]
    fn transient_read_of_tainted_register_is_dummy() {
        let mut core = CoreState::new();
        core.write_reg(r(3), 0x41, true, Width::W64);
        assert_eq!(core.read_reg(r(3), ExecutionDomain::Transient), (0, true));
        assert_eq!(
            core.read_reg(r(3), ExecutionDomain::Architectural),
            (0x41, true)
        );
        core.write_reg(r(7), 0x99, false, Width::W64);
        assert_eq!(
            core.read_reg(r(7), ExecutionDomain::Transient),
            (0x99, false)
        );
    }

    #[test]
    fn partial_write_taints_whole_register() {
        let mut core = CoreState::new();
        core.write_reg(r(0), 0xffff_ffff_ffff_ffff, false, Width::W64);
        core.write_reg(r(0), 0x1234, true, Width::W32);
        assert!(core.taint.is_tainted(r(0)));
        assert_eq!(core.reg(r(0)), 0x1234);
        core.write_reg(r(5), 7, true, Width::W64);
        core.write_reg(r(5), 0, false, Width::W64);
        assert!(!core.taint.is_tainted(r(5)));
        core.write_reg(r(2), 1, true, Width::W64);
        core.write_reg(r(2), 2, true, Width::W64);
        assert!(core.taint.is_tainted(r(2)));
    }

    #[test]
    fn sub_register_merge() {
        assert_eq!(
            merge_width(0xaaaa_bbbb_cccc_dddd, 0x11, Width::W8),
            0xaaaa_bbbb_cccc_dd11
        );
        assert_eq!(
            merge_width(0xaaaa_bbbb_cccc_dddd, 0x1122, Width::W16),
            0xaaaa_bbbb_cccc_1122
        );
        assert_eq!(
            merge_width(0xaaaa_bbbb_cccc_dddd, 0x1122_3344_5566, Width::W32),
            0x3344_5566
        );
    }

    #[test]
    fn msr_views() {
        let mut core = CoreState {
            privileged: true,
            ..Default::default()
        };
        core.taint.set(r(0), true);
        core.taint.set(r(5), true);
        assert_eq!(core.rdmsr(IA32_TAINT).unwrap(), 0x21);
        core.wrmsr(IA32_TAINT, 0x3).unwrap();
        assert_eq!(core.taint.bitmap(), 0x3);
        assert_eq!(core.taint.shadow(), 0x3);
        core.wrmsr(IA32_SHADOW_TAINT, 0xff).unwrap();
        assert_eq!(core.taint.bitmap(), 0x3);
        core.wrmsr(IA32_TAINT, 0).unwrap();
        assert_eq!(core.rdmsr(IA32_TAINT).unwrap(), 0);
        // high bits are write-ignored in the bitmap but kept in the shadow
        core.wrmsr(IA32_TAINT, u64::MAX).unwrap();
        assert_eq!(core.rdmsr(IA32_TAINT).unwrap(), TAINT_MASK);
        assert_eq!(core.rdmsr(IA32_SHADOW_TAINT).unwrap(), u64::MAX);
    }

    #[test]
    fn msr_access_requires_privilege() {
        let mut core = CoreState::new();
        assert_eq!(core.rdmsr(IA32_TAINT), Err(Fault::Privilege));
        assert_eq!(core.wrmsr(IA32_TAINT, 1), Err(Fault::Privilege));
    }

    #[test]
    fn interrupt_entry_and_iret() {
        let mut t = TaintState::default();
        t.set(r(2), true);
        t.interrupt_entry();
        assert_eq!(t.shadow(), 0x4);
        t.set_bitmap(0);
        t.write_shadow_msr(0x21);
        t.iret();
        assert_eq!(t.bitmap(), 0x21);
        t.write_shadow_msr(0);
        t.iret();
        assert_eq!(t.bitmap(), 0);
    }

    #[test]
    fn register_names_round_trip() {
        for reg in Reg::all() {
            let name = reg.to_string();
            assert_eq!(name.parse::<Reg>(), Ok(reg), "{name}");
        }
        assert_eq!("r14".parse::<Reg>(), Ok(Reg::SP));
        assert!("r16".parse::<Reg>().is_err());
        assert!("f8".parse::<Reg>().is_err());
        assert!("v32".parse::<Reg>().is_err());
        assert!("r01".parse::<Reg>().is_err());
        assert!(Reg::new(56).is_err());
    }

    proptest::proptest! {
        #[test]
        fn taint_msr_read_after_write(v: u64) {
            let mut core = CoreState { privileged: true, ..Default::default() };
            core.wrmsr(IA32_TAINT, v).unwrap();
            proptest::prop_assert_eq!(core.rdmsr(IA32_TAINT).unwrap(), v & TAINT_MASK);
            proptest::prop_assert_eq!(core.taint.shadow(), v);
        }

        #[test]
        fn transient_dummy_totality(v: u64, bitmap: u64, idx in 0u8..56) {
            let mut core = CoreState::new();
            core.set_reg(Reg::new(idx).unwrap(), v);
            core.taint.set_bitmap(bitmap);
            let (value, tainted) = core.read_reg(Reg::new(idx).unwrap(), ExecutionDomain::Transient);
            if tainted {
                proptest::prop_assert_eq!(value, 0);
            } else {
                proptest::prop_assert_eq!(value, v);
            }
            proptest::prop_assert_eq!(core.taint.bitmap() >> 56, 0);
        }
    }
}
