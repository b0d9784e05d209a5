//! Instruction set: 26 opcodes, fixed 16-byte encoding.
//!
//! Layout of an encoded instruction (little-endian):
//!
//! | byte  | meaning                                               |
//! |-------|-------------------------------------------------------|
//! | 0     | opcode                                                |
//! | 1     | bit 0 rep, bits 1-2 width, bits 3-4 dst operand kind  |
//! | 2     | bits 0-1 src operand kind                             |
//! | 3     | dst register                                          |
//! | 4     | src register                                          |
//! | 5     | memory base register (0xff = none)                    |
//! | 6     | memory index register (0xff = none)                   |
//! | 7     | bits 0-1 log2 scale, bits 4-7 condition code          |
//! | 8-15  | imm64, or disp32 + imm32 when a memory operand exists |

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Fault;
use crate::state::{Reg, Width};

pub const INST_SIZE: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cond {
    Eq,
    Ne,
    Lt,
    Ge,
    Le,
    Gt,
    B,
    Ae,
    Be,
    A,
    S,
    Ns,
}

impl Cond {
    const ALL: [Cond; 12] = [
        Cond::Eq,
        Cond::Ne,
        Cond::Lt,
        Cond::Ge,
        Cond::Le,
        Cond::Gt,
        Cond::B,
        Cond::Ae,
        Cond::Be,
        Cond::A,
        Cond::S,
        Cond::Ns,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Cond::Eq => "je",
            Cond::Ne => "jne",
            Cond::Lt => "jl",
            Cond::Ge => "jge",
            Cond::Le => "jle",
            Cond::Gt => "jg",
            Cond::B => "jb",
            Cond::Ae => "jae",
            Cond::Be => "jbe",
            Cond::A => "ja",
            Cond::S => "js",
            Cond::Ns => "jns",
        }
    }

    pub fn from_mnemonic(m: &str) -> Option<Cond> {
        match m {
            "jz" => Some(Cond::Eq),
            "jnz" => Some(Cond::Ne),
            _ => Cond::ALL.into_iter().find(|c| c.mnemonic() == m),
        }
    }

    fn code(self) -> u8 {
        Cond::ALL.iter().position(|&c| c == self).unwrap() as u8
    }

    fn from_code(code: u8) -> Option<Cond> {
        Cond::ALL.get(code as usize).copied()
    }

    pub fn holds(self, f: crate::state::Flags) -> bool {
        match self {
            Cond::Eq => f.zero,
            Cond::Ne => !f.zero,
            Cond::Lt => f.sign != f.overflow,
            Cond::Ge => f.sign == f.overflow,
            Cond::Le => f.zero || f.sign != f.overflow,
            Cond::Gt => !f.zero && f.sign == f.overflow,
            Cond::B => f.carry,
            Cond::Ae => !f.carry,
            Cond::Be => f.carry || f.zero,
            Cond::A => !f.carry && !f.zero,
            Cond::S => f.sign,
            Cond::Ns => !f.sign,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Opcode {
    Mov,
    Add,
    Sub,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Cmp,
    Test,
    Jcc(Cond),
    Jmp,
    Call,
    Ret,
    Push,
    Pop,
    Lfence,
    Clflush,
    Rdtime,
    Rdmsr,
    Wrmsr,
    Syscall,
    Iret,
    Crctl,
    Halt,
    Nop,
}

impl Opcode {
    const PLAIN: [(Opcode, &'static str); 25] = [
        (Opcode::Mov, "mov"),
        (Opcode::Add, "add"),
        (Opcode::Sub, "sub"),
        (Opcode::And, "and"),
        (Opcode::Or, "or"),
        (Opcode::Xor, "xor"),
        (Opcode::Shl, "shl"),
        (Opcode::Shr, "shr"),
        (Opcode::Cmp, "cmp"),
        (Opcode::Test, "test"),
        (Opcode::Jmp, "jmp"),
        (Opcode::Call, "call"),
        (Opcode::Ret, "ret"),
        (Opcode::Push, "push"),
        (Opcode::Pop, "pop"),
        (Opcode::Lfence, "lfence"),
        (Opcode::Clflush, "clflush"),
        (Opcode::Rdtime, "rdtime"),
        (Opcode::Rdmsr, "rdmsr"),
        (Opcode::Wrmsr, "wrmsr"),
        (Opcode::Syscall, "syscall"),
        (Opcode::Iret, "iret"),
        (Opcode::Crctl, "crctl"),
        (Opcode::Halt, "halt"),
        (Opcode::Nop, "nop"),
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Jcc(c) => c.mnemonic(),
            op => Opcode::PLAIN.iter().find(|(o, _)| *o == op).unwrap().1,
        }
    }

    pub fn from_mnemonic(m: &str) -> Option<Opcode> {
        Opcode::PLAIN
            .iter()
            .find(|(_, name)| *name == m)
            .map(|(op, _)| *op)
            .or_else(|| Cond::from_mnemonic(m).map(Opcode::Jcc))
    }

    fn code(self) -> u8 {
        match self {
            Opcode::Jcc(_) => 10,
            op => {
                let i = Opcode::PLAIN.iter().position(|(o, _)| *o == op).unwrap() as u8;
                if i >= 10 {
                    i + 1
                } else {
                    i
                }
            }
        }
    }

    fn from_code(code: u8, cond: u8) -> Option<Opcode> {
        match code {
            10 => Cond::from_code(cond).map(Opcode::Jcc),
            0..=9 => Some(Opcode::PLAIN[code as usize].0),
            11..=25 => Some(Opcode::PLAIN[code as usize - 1].0),
            _ => None,
        }
    }

    /// Arithmetic/logical opcodes with a register destination.
    pub fn is_alu(self) -> bool {
        matches!(
            self,
            Opcode::Add
                | Opcode::Sub
                | Opcode::And
                | Opcode::Or
                | Opcode::Xor
                | Opcode::Shl
                | Opcode::Shr
        )
    }

    /// Opcodes that end a transient window.
    pub fn is_serializing(self) -> bool {
        matches!(
            self,
            Opcode::Lfence
                | Opcode::Rdmsr
                | Opcode::Wrmsr
                | Opcode::Syscall
                | Opcode::Iret
                | Opcode::Crctl
                | Opcode::Halt
        )
    }

    pub fn is_privileged(self) -> bool {
        matches!(
            self,
            Opcode::Rdmsr | Opcode::Wrmsr | Opcode::Iret | Opcode::Crctl | Opcode::Halt
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemRef {
    pub base: Option<Reg>,
    pub index: Option<Reg>,
    /// log2 of the index scale.
    pub scale: u8,
    pub disp: i32,
}

impl MemRef {
    pub fn abs(addr: i32) -> MemRef {
        MemRef {
            base: None,
            index: None,
            scale: 0,
            disp: addr,
        }
    }

    pub fn base_disp(base: Reg, disp: i32) -> MemRef {
        MemRef {
            base: Some(base),
            index: None,
            scale: 0,
            disp,
        }
    }

    pub fn regs(&self) -> impl Iterator<Item = Reg> {
        self.base.into_iter().chain(self.index)
    }
}

impl fmt::Display for MemRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        let mut any = false;
        if let Some(b) = self.base {
            write!(f, "{b}")?;
            any = true;
        }
        if let Some(i) = self.index {
            if any {
                write!(f, " + ")?;
            }
            write!(f, "{i}*{}", 1u32 << self.scale)?;
            any = true;
        }
        if !any {
            write!(f, "{:#x}", self.disp as i64)?;
        } else if self.disp > 0 {
            write!(f, " + {:#x}", self.disp)?;
        } else if self.disp < 0 {
            write!(f, " - {:#x}", -(self.disp as i64))?;
        }
        write!(f, "]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operand {
    None,
    Reg(Reg),
    Imm(i64),
    Mem(MemRef),
}

impl Operand {
    fn kind(&self) -> u8 {
        match self {
            Operand::None => 0,
            Operand::Reg(_) => 1,
            Operand::Imm(_) => 2,
            Operand::Mem(_) => 3,
        }
    }

    pub fn reg(&self) -> Option<Reg> {
        match self {
            Operand::Reg(r) => Some(*r),
            _ => None,
        }
    }

    pub fn mem(&self) -> Option<&MemRef> {
        match self {
            Operand::Mem(m) => Some(m),
            _ => None,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::None => Ok(()),
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Imm(v) if *v < 0 => write!(f, "-{:#x}", v.unsigned_abs()),
            Operand::Imm(v) => write!(f, "{v:#x}"),
            Operand::Mem(m) => write!(f, "{m}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub op: Opcode,
    pub rep: bool,
    pub width: Width,
    pub dst: Operand,
    pub src: Operand,
}

impl Instruction {
    pub fn new(op: Opcode, dst: Operand, src: Operand) -> Instruction {
        Instruction {
            op,
            rep: false,
            width: Width::W64,
            dst,
            src,
        }
    }

    pub fn bare(op: Opcode) -> Instruction {
        Instruction::new(op, Operand::None, Operand::None)
    }

    pub fn with_width(mut self, width: Width) -> Instruction {
        self.width = width;
        self
    }

    pub fn with_rep(mut self) -> Instruction {
        self.rep = true;
        self
    }

    /// Whether the operand combination is legal for the opcode.
    pub fn validate(&self) -> Result<(), String> {
        use Operand as O;
        let ok = match self.op {
            Opcode::Mov => {
                matches!(
                    (&self.dst, &self.src),
                    (O::Reg(_), O::Reg(_) | O::Imm(_) | O::Mem(_)) | (O::Mem(_), O::Reg(_))
                ) || matches!((&self.dst, &self.src), (O::Mem(_), O::Imm(v)) if i32::try_from(*v).is_ok())
            }
            op if op.is_alu() => matches!(
                (&self.dst, &self.src),
                (O::Reg(_), O::Reg(_) | O::Imm(_) | O::Mem(_))
            ),
            Opcode::Cmp | Opcode::Test => {
                matches!(
                    (&self.dst, &self.src),
                    (O::Reg(_), O::Reg(_) | O::Imm(_) | O::Mem(_))
                )
            }
            Opcode::Jcc(_) => matches!((&self.dst, &self.src), (O::Imm(_), O::None)),
            Opcode::Jmp | Opcode::Call => {
                matches!(
                    (&self.dst, &self.src),
                    (O::Imm(_) | O::Reg(_) | O::Mem(_), O::None)
                )
            }
            Opcode::Push | Opcode::Pop | Opcode::Rdtime => {
                matches!((&self.dst, &self.src), (O::Reg(_), O::None))
            }
            Opcode::Clflush => matches!((&self.dst, &self.src), (O::Mem(_), O::None)),
            Opcode::Crctl => matches!((&self.dst, &self.src), (O::Imm(_), O::Reg(_))),
            _ => matches!((&self.dst, &self.src), (O::None, O::None)),
        };
        if !ok {
            return Err(format!("invalid operands for `{}`", self.op.mnemonic()));
        }
        if self.rep && !(self.op.is_alu() && matches!(self.dst, O::Reg(_))) {
            return Err(format!(
                "rep prefix not allowed on `{}`",
                self.op.mnemonic()
            ));
        }
        let sized = matches!(self.op, Opcode::Mov | Opcode::Cmp | Opcode::Test) || self.op.is_alu();
        if !sized && self.width != Width::W64 {
            return Err(format!("`{}` takes no width suffix", self.op.mnemonic()));
        }
        Ok(())
    }

    pub fn encode(&self) -> [u8; INST_SIZE as usize] {
        let mut b = [0u8; INST_SIZE as usize];
        b[0] = self.op.code();
        let width = match self.width {
            Width::W8 => 0,
            Width::W16 => 1,
            Width::W32 => 2,
            Width::W64 => 3,
        };
        b[1] = self.rep as u8 | width << 1 | self.dst.kind() << 3;
        b[2] = self.src.kind();
        b[3] = self.dst.reg().map_or(0, |r| r.index() as u8);
        b[4] = self.src.reg().map_or(0, |r| r.index() as u8);
        let cond = match self.op {
            Opcode::Jcc(c) => c.code(),
            _ => 0,
        };
        let mem = self.dst.mem().or(self.src.mem());
        match mem {
            Some(m) => {
                b[5] = m.base.map_or(0xff, |r| r.index() as u8);
                b[6] = m.index.map_or(0xff, |r| r.index() as u8);
                b[7] = m.scale & 3 | cond << 4;
                b[8..12].copy_from_slice(&m.disp.to_le_bytes());
                let imm = match (self.dst, self.src) {
                    (_, Operand::Imm(v)) => v as i32,
                    _ => 0,
                };
                b[12..16].copy_from_slice(&imm.to_le_bytes());
            }
            None => {
                b[5] = 0xff;
                b[6] = 0xff;
                b[7] = cond << 4;
                let imm = match (self.dst, self.src) {
                    (Operand::Imm(v), _) | (_, Operand::Imm(v)) => v,
                    _ => 0,
                };
                b[8..16].copy_from_slice(&imm.to_le_bytes());
            }
        }
        b
    }

    pub fn decode(b: &[u8]) -> Result<Instruction, Fault> {
        if b.len() < INST_SIZE as usize {
            return Err(Fault::IllegalInstruction);
        }
        let op = Opcode::from_code(b[0], b[7] >> 4).ok_or(Fault::IllegalInstruction)?;
        let rep = b[1] & 1 != 0;
        let width = match (b[1] >> 1) & 3 {
            0 => Width::W8,
            1 => Width::W16,
            2 => Width::W32,
            _ => Width::W64,
        };
        let dst_kind = (b[1] >> 3) & 3;
        let src_kind = b[2] & 3;
        let has_mem = dst_kind == 3 || src_kind == 3;
        let reg = |i: u8| Reg::new(i).map_err(|_| Fault::IllegalInstruction);
        let opt_reg = |i: u8| {
            if i == 0xff {
                Ok(None)
            } else {
                reg(i).map(Some)
            }
        };
        let mem = if has_mem {
            Some(MemRef {
                base: opt_reg(b[5])?,
                index: opt_reg(b[6])?,
                scale: b[7] & 3,
                disp: i32::from_le_bytes(b[8..12].try_into().unwrap()),
            })
        } else {
            None
        };
        let imm = if has_mem {
            i32::from_le_bytes(b[12..16].try_into().unwrap()) as i64
        } else {
            i64::from_le_bytes(b[8..16].try_into().unwrap())
        };
        let operand = |kind: u8, r: u8| -> Result<Operand, Fault> {
            Ok(match kind {
                0 => Operand::None,
                1 => Operand::Reg(reg(r)?),
                2 => Operand::Imm(imm),
                _ => Operand::Mem(mem.unwrap()),
            })
        };
        let inst = Instruction {
            op,
            rep,
            width,
            dst: operand(dst_kind, b[3])?,
            src: operand(src_kind, b[4])?,
        };
        inst.validate().map_err(|_| Fault::IllegalInstruction)?;
        Ok(inst)
    }

    /// Registers read as data operands. Address registers are not included,
    /// and neither is the destination of a zeroing idiom.
    pub fn data_sources(&self) -> Vec<Reg> {
        let mut v = Vec::new();
        if self.is_zero_idiom() {
            return v;
        }
        let dst_is_source = match self.op {
            Opcode::Mov => !self.width.replaces_register(),
            op if op.is_alu() => true,
            Opcode::Cmp | Opcode::Test => true,
            _ => false,
        };
        if dst_is_source {
            if let Operand::Reg(r) = self.dst {
                v.push(r);
            }
        }
        if let Operand::Reg(r) = self.src {
            if !v.contains(&r) {
                v.push(r);
            }
        }
        v
    }

    /// `xor r, r` and `sub r, r`: the result does not depend on the register.
    pub fn is_zero_idiom(&self) -> bool {
        matches!(self.op, Opcode::Xor | Opcode::Sub)
            && matches!((self.dst, self.src), (Operand::Reg(a), Operand::Reg(b)) if a == b)
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.rep {
            write!(f, "rep ")?;
        }
        write!(f, "{}{}", self.op.mnemonic(), self.width.suffix())?;
        match (&self.dst, &self.src) {
            (Operand::None, Operand::None) => Ok(()),
            (d, Operand::None) => write!(f, " {d}"),
            (d, s) => write!(f, " {d}, {s}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(n: u8) -> Reg {
        Reg::new(n).unwrap()
    }

    #[test]
    fn opcode_codes_are_unique() {
        let mut seen = std::collections::HashSet::new();
        for (op, _) in Opcode::PLAIN {
            assert!(seen.insert(op.code()));
            assert_eq!(Opcode::from_code(op.code(), 0), Some(op));
        }
        assert!(seen.insert(Opcode::Jcc(Cond::Eq).code()));
    }

    #[test]
    fn rep_only_on_alu_register_destination() {
        let ok = Instruction::new(Opcode::Xor, Operand::Reg(r(1)), Operand::Reg(r(1))).with_rep();
        assert!(ok.validate().is_ok());
        let bad = Instruction::new(Opcode::Mov, Operand::Reg(r(1)), Operand::Imm(0)).with_rep();
        assert!(bad.validate().is_err());
        let bad = Instruction::bare(Opcode::Ret).with_rep();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_idiom_has_no_sources() {
        let x = Instruction::new(Opcode::Xor, Operand::Reg(r(1)), Operand::Reg(r(1)));
        assert!(x.data_sources().is_empty());
        let add = Instruction::new(Opcode::Add, Operand::Reg(r(1)), Operand::Reg(r(2)));
        assert_eq!(add.data_sources(), vec![r(1), r(2)]);
        let mov = Instruction::new(Opcode::Mov, Operand::Reg(r(1)), Operand::Reg(r(2)));
        assert_eq!(mov.data_sources(), vec![r(2)]);
        let movb = mov.with_width(Width::W8);
        assert_eq!(movb.data_sources(), vec![r(1), r(2)]);
        let load = Instruction::new(
            Opcode::Mov,
            Operand::Reg(r(1)),
            Operand::Mem(MemRef {
                base: Some(r(2)),
                index: Some(r(3)),
                scale: 0,
                disp: 0,
            }),
        );
        assert!(load.data_sources().is_empty());
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(Instruction::decode(&[0xee; 16]).is_err());
        assert!(Instruction::decode(&[0; 8]).is_err());
    }

    fn arb_reg() -> impl proptest::strategy::Strategy<Value = Reg> {
        use proptest::prelude::*;
        (0u8..56).prop_map(|i| Reg::new(i).unwrap())
    }

    fn arb_inst() -> impl proptest::strategy::Strategy<Value = Instruction> {
        use proptest::prelude::*;
        let mem = (
            proptest::option::of(arb_reg()),
            proptest::option::of(arb_reg()),
            0u8..4,
            any::<i32>(),
        )
            .prop_map(|(base, index, scale, disp)| MemRef {
                base,
                index,
                scale,
                disp,
            });
        let operand = prop_oneof![
            Just(Operand::None),
            arb_reg().prop_map(Operand::Reg),
            any::<i64>().prop_map(Operand::Imm),
            any::<i32>().prop_map(|v| Operand::Imm(v as i64)),
            mem.prop_map(Operand::Mem),
        ];
        let width = prop_oneof![
            Just(Width::W8),
            Just(Width::W16),
            Just(Width::W32),
            Just(Width::W64)
        ];
        let op = (0u8..26, 0u8..12).prop_map(|(c, k)| Opcode::from_code(c, k).unwrap());
        (op, any::<bool>(), width, operand.clone(), operand)
            .prop_map(|(op, rep, width, dst, src)| Instruction {
                op,
                rep,
                width,
                dst,
                src,
            })
            .prop_filter("valid", |i| {
                i.validate().is_ok() && !(i.dst.mem().is_some() && i.src.mem().is_some())
            })
    }

    proptest::proptest! {
        #[test]
        fn encode_decode_round_trip(inst in arb_inst()) {
            let bytes = inst.encode();
            proptest::prop_assert_eq!(Instruction::decode(&bytes).unwrap(), inst);
        }
    }
}
