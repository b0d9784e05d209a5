//! Assembler, disassembler and the `CTXB` image format.
//!
//! Source syntax is Intel-like: `mnemonic[.b|.w|.d] dst, src`, with memory
//! operands written `[base + index*scale + disp]`. Directives:
//!
//! - `.text`, `.data`, `.secret` switch sections, optionally taking a base
//!   address.
//! - `.byte`, `.quad`, `.ascii`, `.asciz`, `.zero`, `.align` emit data.
//! - `nospec NAME: SIZE | "string" | .byte ...` places a variable in the
//!   non-transient `.secret` section.
//! - `.stacksize N` and `.ustacksize N` size the main (non-transient) and
//!   unprotected stacks.
//! - `.func NAME` ... `.endfunc` delimit a function, `local NAME, SIZE`
//!   declares a local and `[%NAME + k]` addresses it.
//!
//! `_start` is the entry point, `_start2` the optional second task.

mod emit;
pub mod image;
mod parse;
mod split;
mod stack;

pub use emit::{assemble_unit, DATA_BASE, SECRET_BASE, TEXT_BASE};
pub use image::{BinaryImage, Meta, Section};
pub use parse::{AsmUnit, DataInit, Expr, Item, MemAst, OpAst, SectionKind, Term};
pub use split::{lower, split_stacks, FrameStyle};
pub use stack::{stack_report, StackReport};

use crate::error::{AsmError, Fault};
use crate::isa::{Instruction, INST_SIZE};

pub fn assemble(src: &str) -> Result<BinaryImage, AsmError> {
    assemble_unit(&AsmUnit::parse(src)?)
}

/// Decode a code blob starting at `base`.
pub fn disassemble(bytes: &[u8], base: u64) -> Vec<(u64, Result<Instruction, Fault>)> {
    bytes
        .chunks(INST_SIZE as usize)
        .enumerate()
        .map(|(i, c)| (base + i as u64 * INST_SIZE, Instruction::decode(c)))
        .collect()
}

/// Listing of every section: code is disassembled, data hex-dumped.
pub fn listing(img: &BinaryImage) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    for s in img.loadable() {
        let nt = if s.non_transient() { " nt" } else { "" };
        let _ = writeln!(
            out,
            "{} @ {:#x} ({} bytes{nt})",
            s.name,
            s.vaddr,
            s.bytes.len()
        );
        if s.exec() {
            for (addr, inst) in disassemble(&s.bytes, s.vaddr) {
                match inst {
                    Ok(i) => writeln!(out, "  {addr:08x}:  {i}"),
                    Err(_) => writeln!(out, "  {addr:08x}:  (bad)"),
                }
                .unwrap();
            }
        } else {
            for (i, row) in s.bytes.chunks(16).enumerate() {
                let hex: Vec<String> = row.iter().map(|b| format!("{b:02x}")).collect();
                let _ = writeln!(out, "  {:08x}:  {}", s.vaddr + 16 * i as u64, hex.join(" "));
            }
        }
    }
    if let Ok(m) = img.meta() {
        let _ = writeln!(out, "entry {:#x}", m.entry);
        if let Some(e) = m.entry2 {
            let _ = writeln!(out, "entry2 {e:#x}");
        }
        let _ = writeln!(out, "stack {} ustack {}", m.stack_size, m.ustack_size);
    }
    out
}

/// Source text that reassembles to the same `.text` bytes.
pub fn disassembly_source(img: &BinaryImage) -> Option<String> {
    let text = img.section(".text")?;
    let entry = img.meta().ok()?.entry;
    let mut out = format!(".text {:#x}\n", text.vaddr);
    for (addr, inst) in disassemble(&text.bytes, text.vaddr) {
        if addr == entry {
            out.push_str("_start:\n");
        }
        out.push_str(&format!("    {}\n", inst.ok()?));
    }
    Some(out)
}
