use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulator-internal errors. These indicate a bug in the host harness or a
/// malformed input, never a condition the guest can observe.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("invalid register index {0}")]
    InvalidRegister(u8),
    #[error("physical address {0:#x} out of range")]
    PhysOutOfRange(u64),
    #[error("unaligned {width}-byte access at {addr:#x}")]
    Unaligned { addr: u64, width: u64 },
    #[error("invalid simulator configuration: {0}")]
    Config(String),
    #[error("machine is halted")]
    Halted,
    #[error("cycle budget of {0} exhausted")]
    Budget(u64),
    #[error("snapshot: {0}")]
    Snapshot(String),
}

/// Guest-visible faults, delivered through the interrupt path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Error)]
pub enum Fault {
    #[error("page not present at {0:#x}")]
    NotPresent(u64),
    #[error("protection violation at {0:#x}")]
    Protection(u64),
    #[error("privileged instruction in user mode")]
    Privilege,
    #[error("illegal instruction")]
    IllegalInstruction,
    #[error("unknown msr {0:#x}")]
    UnknownMsr(u64),
    #[error("unaligned access at {0:#x}")]
    Unaligned(u64),
}

impl Fault {
    pub fn vector(self) -> u64 {
        match self {
            Fault::NotPresent(_) | Fault::Protection(_) => 14,
            Fault::Privilege | Fault::UnknownMsr(_) => 13,
            Fault::IllegalInstruction => 6,
            Fault::Unaligned(_) => 17,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: undefined label `{label}`")]
    UndefinedLabel { line: usize, label: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
    #[error("no entry point")]
    NoEntryPoint,
    #[error(
        "function `{func}`: locals need {need} bytes but the unprotected stack is {have} bytes"
    )]
    LocalTooLarge { func: String, need: u64, have: u64 },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported image version {0}")]
    Version(u16),
    #[error("truncated image")]
    Truncated,
    #[error("section `{0}`: {1}")]
    Section(String, String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LoadError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("sections `{0}` and `{1}` overlap")]
    Overlap(String, String),
    #[error("section `{0}` collides with a reserved region")]
    Reserved(String),
    #[error("out of physical memory")]
    OutOfMemory,
    #[error("kernel build failed: {0}")]
    Kernel(#[from] AsmError),
    #[error("at most two tasks are supported")]
    TooManyTasks,
    #[error(transparent)]
    Sim(#[from] SimError),
}
