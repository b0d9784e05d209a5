//! Two-pass layout and encoding.

use std::collections::HashMap;

use super::image::{
    BinaryImage, Meta, Section, DEFAULT_STACK, FLAG_EXEC, FLAG_NT, FLAG_WRITE, VERSION,
};
use super::parse::{AsmUnit, DataInit, Expr, Item, OpAst, SectionKind};
use super::split::{lower, FrameStyle};
use crate::error::AsmError;
use crate::isa::{Instruction, MemRef, Opcode, Operand, INST_SIZE};
use crate::memory::PAGE_SIZE;

pub const TEXT_BASE: u64 = 0x0040_0000;
pub const DATA_BASE: u64 = 0x0080_0000;
pub const SECRET_BASE: u64 = 0x0200_0000;

const KINDS: [SectionKind; 3] = [SectionKind::Text, SectionKind::Data, SectionKind::Secret];

fn default_base(kind: SectionKind) -> u64 {
    match kind {
        SectionKind::Text => TEXT_BASE,
        SectionKind::Data => DATA_BASE,
        SectionKind::Secret => SECRET_BASE,
    }
}

fn flags(kind: SectionKind) -> u8 {
    match kind {
        SectionKind::Text => FLAG_EXEC,
        SectionKind::Data => FLAG_WRITE,
        SectionKind::Secret => FLAG_NT | FLAG_WRITE,
    }
}

fn syntax(line: usize, msg: impl Into<String>) -> AsmError {
    AsmError::Syntax {
        line,
        msg: msg.into(),
    }
}

fn item_line(item: &Item) -> Option<usize> {
    match item {
        Item::Inst { line, .. }
        | Item::Byte { line, .. }
        | Item::Quad { line, .. }
        | Item::Local { line, .. } => Some(*line).filter(|&l| l > 0),
        _ => None,
    }
}

fn nospec_bytes(init: &DataInit) -> Vec<u8> {
    match init {
        DataInit::Zero(n) => vec![0; *n as usize],
        DataInit::Bytes(b) => b.clone(),
    }
}

struct Layout {
    bases: HashMap<SectionKind, u64>,
    sizes: HashMap<SectionKind, u64>,
    labels: HashMap<String, u64>,
}

fn layout(items: &[Item]) -> Result<Layout, AsmError> {
    let mut bases: HashMap<SectionKind, u64> = HashMap::new();
    let mut sizes: HashMap<SectionKind, u64> = HashMap::new();
    let mut labels = HashMap::new();
    let mut cur = SectionKind::Text;
    let mut line = 0;
    for item in items {
        line = item_line(item).unwrap_or(line);
        let mut define = |name: &str, addr: u64| {
            if labels.insert(name.to_string(), addr).is_some() {
                Err(AsmError::DuplicateLabel {
                    line,
                    label: name.to_string(),
                })
            } else {
                Ok(())
            }
        };
        let base = *bases.entry(cur).or_insert(default_base(cur));
        let size = *sizes.entry(cur).or_insert(0);
        let new_size = match item {
            Item::Section { kind, base } => {
                if let Some(b) = base {
                    if b % PAGE_SIZE != 0 {
                        return Err(syntax(
                            line,
                            format!("section base {b:#x} is not page-aligned"),
                        ));
                    }
                    match bases.get(kind) {
                        Some(old) if old != b && sizes.get(kind).is_some_and(|&s| s > 0) => {
                            return Err(syntax(
                                line,
                                format!("{} already placed at {old:#x}", kind.name()),
                            ));
                        }
                        _ => {
                            bases.insert(*kind, *b);
                        }
                    }
                }
                cur = *kind;
                continue;
            }
            Item::Label(l) => {
                define(l, base + size)?;
                size
            }
            Item::Inst { .. } => {
                if cur != SectionKind::Text {
                    return Err(syntax(line, "instructions must be in .text"));
                }
                size + INST_SIZE
            }
            Item::Byte { values, .. } => size + values.len() as u64,
            Item::Quad { values, .. } => size + 8 * values.len() as u64,
            Item::Ascii(b) => size + b.len() as u64,
            Item::Zero(n) => size + n,
            Item::Align(a) => size.next_multiple_of(*a),
            Item::Nospec { name, init } => {
                let sbase = *bases.entry(SectionKind::Secret).or_insert(SECRET_BASE);
                let ssize = sizes.entry(SectionKind::Secret).or_insert(0);
                define(name, sbase + *ssize)?;
                *ssize += nospec_bytes(init).len() as u64;
                continue;
            }
            Item::StackSize(_) | Item::UStackSize(_) => size,
            Item::Func(_) | Item::EndFunc | Item::Local { .. } => {
                return Err(syntax(line, "unlowered function item"));
            }
        };
        sizes.insert(cur, new_size);
    }
    let mut placed: Vec<(u64, u64, SectionKind)> = KINDS
        .iter()
        .filter_map(|k| Some((*bases.get(k)?, *sizes.get(k)?, *k)))
        .filter(|p| p.1 > 0)
        .collect();
    placed.sort_by_key(|p| p.0);
    for w in placed.windows(2) {
        if w[0].0 + w[0].1 > w[1].0 {
            return Err(syntax(
                0,
                format!("sections {} and {} overlap", w[0].2.name(), w[1].2.name()),
            ));
        }
    }
    Ok(Layout {
        bases,
        sizes,
        labels,
    })
}

fn eval(labels: &HashMap<String, u64>, line: usize, e: &Expr) -> Result<i64, AsmError> {
    e.eval(|s| labels.get(s).map(|&v| v as i64))
        .map_err(|label| AsmError::UndefinedLabel { line, label })
}

fn operand(labels: &HashMap<String, u64>, line: usize, op: &OpAst) -> Result<Operand, AsmError> {
    Ok(match op {
        OpAst::Reg(r) => Operand::Reg(*r),
        OpAst::Imm(e) => Operand::Imm(eval(labels, line, e)?),
        OpAst::Mem(m) => {
            if m.local.is_some() {
                return Err(syntax(line, "local reference outside a function"));
            }
            let d = eval(labels, line, &m.disp)?;
            let disp = i32::try_from(d)
                .map_err(|_| syntax(line, format!("displacement {d:#x} out of range")))?;
            Operand::Mem(MemRef {
                base: m.base,
                index: m.index,
                scale: m.scale,
                disp,
            })
        }
    })
}

pub fn build_instruction(
    labels: &HashMap<String, u64>,
    line: usize,
    rep: bool,
    mnemonic: &str,
    width: crate::state::Width,
    ops: &[OpAst],
) -> Result<Instruction, AsmError> {
    let op = Opcode::from_mnemonic(mnemonic)
        .ok_or_else(|| syntax(line, format!("unknown mnemonic `{mnemonic}`")))?;
    let dst = ops
        .first()
        .map(|o| operand(labels, line, o))
        .transpose()?
        .unwrap_or(Operand::None);
    let src = ops
        .get(1)
        .map(|o| operand(labels, line, o))
        .transpose()?
        .unwrap_or(Operand::None);
    let inst = Instruction {
        op,
        rep,
        width,
        dst,
        src,
    };
    inst.validate().map_err(|m| syntax(line, m))?;
    Ok(inst)
}

/// Assemble a parsed unit. Functions are lowered with a frame pointer on
/// the main stack unless the unit was already split.
pub fn assemble_unit(unit: &AsmUnit) -> Result<BinaryImage, AsmError> {
    let unit = lower(unit, FrameStyle::FramePointer)?;
    let lay = layout(&unit.items)?;
    let mut bytes: HashMap<SectionKind, Vec<u8>> = HashMap::new();
    let mut cur = SectionKind::Text;
    let (mut stack, mut ustack) = (DEFAULT_STACK, DEFAULT_STACK);
    for item in &unit.items {
        let out = bytes.entry(cur).or_default();
        match item {
            Item::Section { kind, .. } => cur = *kind,
            Item::Label(_) | Item::Func(_) | Item::EndFunc | Item::Local { .. } => {}
            Item::Inst {
                line,
                rep,
                mnemonic,
                width,
                ops,
            } => {
                out.extend_from_slice(
                    &build_instruction(&lay.labels, *line, *rep, mnemonic, *width, ops)?.encode(),
                );
            }
            Item::Byte { line, values } => {
                for v in values {
                    let v = eval(&lay.labels, *line, v)?;
                    if !(-128..=255).contains(&v) {
                        return Err(syntax(*line, format!("byte value {v} out of range")));
                    }
                    out.push(v as u8);
                }
            }
            Item::Quad { line, values } => {
                for v in values {
                    out.extend_from_slice(&eval(&lay.labels, *line, v)?.to_le_bytes());
                }
            }
            Item::Ascii(b) => out.extend_from_slice(b),
            Item::Zero(n) => out.resize(out.len() + *n as usize, 0),
            Item::Align(a) => out.resize((out.len() as u64).next_multiple_of(*a) as usize, 0),
            Item::Nospec { init, .. } => bytes
                .entry(SectionKind::Secret)
                .or_default()
                .extend(nospec_bytes(init)),
            Item::StackSize(n) => stack = *n,
            Item::UStackSize(n) => ustack = *n,
        }
    }
    let text_empty = bytes.get(&SectionKind::Text).is_none_or(|b| b.is_empty());
    let entry = lay.labels.get("_start").copied();
    let text_range = |a: u64| {
        let base = lay
            .bases
            .get(&SectionKind::Text)
            .copied()
            .unwrap_or(TEXT_BASE);
        (base..base + lay.sizes.get(&SectionKind::Text).copied().unwrap_or(0)).contains(&a)
    };
    let entry = match entry {
        Some(e) if !text_empty && text_range(e) => e,
        _ => return Err(AsmError::NoEntryPoint),
    };
    let entry2 = lay
        .labels
        .get("_start2")
        .copied()
        .filter(|&e| text_range(e));
    let mut sections = Vec::new();
    for kind in KINDS {
        let Some(b) = bytes.remove(&kind).filter(|b| !b.is_empty()) else {
            continue;
        };
        debug_assert_eq!(b.len() as u64, lay.sizes[&kind]);
        sections.push(Section {
            name: kind.name().into(),
            vaddr: lay.bases[&kind],
            flags: flags(kind),
            bytes: b,
        });
    }
    sections.push(BinaryImage::meta_section(&Meta {
        entry,
        entry2,
        stack_size: stack,
        ustack_size: ustack,
    }));
    let img = BinaryImage {
        version: VERSION,
        sections,
    };
    img.validate().map_err(|e| syntax(0, e.to_string()))?;
    Ok(img)
}
