//! Lowering of `.func` / `local` frames.
//!
//! Default lowering keeps locals on the main (non-transient) stack behind a
//! frame pointer. Split lowering moves them to the unprotected stack
//! addressed through `usp`, so the non-transient stack only holds return
//! addresses and explicit pushes.

use std::collections::HashMap;

use super::image::DEFAULT_STACK;
use super::parse::{AsmUnit, Expr, Item, MemAst, OpAst};
use crate::error::AsmError;
use crate::state::{Reg, Width};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameStyle {
    FramePointer,
    Split,
}

fn inst(mnemonic: &str, ops: Vec<OpAst>) -> Item {
    Item::Inst {
        line: 0,
        rep: false,
        mnemonic: mnemonic.into(),
        width: Width::W64,
        ops,
    }
}

fn imm(v: u64) -> OpAst {
    OpAst::Imm(Expr::num(v as i64))
}

struct Frame {
    name: String,
    size: u64,
    offsets: HashMap<String, u64>,
}

fn syntax(line: usize, msg: impl Into<String>) -> AsmError {
    AsmError::Syntax {
        line,
        msg: msg.into(),
    }
}

fn collect_frame(name: &str, body: &[Item]) -> Result<Frame, AsmError> {
    let mut frame = Frame {
        name: name.to_string(),
        size: 0,
        offsets: HashMap::new(),
    };
    for item in body {
        if let Item::Local { line, name, size } = item {
            if frame.offsets.insert(name.clone(), frame.size).is_some() {
                return Err(syntax(*line, format!("duplicate local `{name}`")));
            }
            frame.size += size.div_ceil(8).max(1) * 8;
        }
    }
    Ok(frame)
}

fn prologue(style: FrameStyle, f: &Frame) -> Vec<Item> {
    if f.size == 0 {
        return Vec::new();
    }
    match style {
        FrameStyle::FramePointer => vec![
            inst("push", vec![OpAst::Reg(Reg::FP)]),
            inst("mov", vec![OpAst::Reg(Reg::FP), OpAst::Reg(Reg::SP)]),
            inst("sub", vec![OpAst::Reg(Reg::SP), imm(f.size)]),
        ],
        FrameStyle::Split => vec![inst("sub", vec![OpAst::Reg(Reg::USP), imm(f.size)])],
    }
}

fn epilogue(style: FrameStyle, f: &Frame) -> Vec<Item> {
    if f.size == 0 {
        return Vec::new();
    }
    match style {
        FrameStyle::FramePointer => vec![
            inst("mov", vec![OpAst::Reg(Reg::SP), OpAst::Reg(Reg::FP)]),
            inst("pop", vec![OpAst::Reg(Reg::FP)]),
        ],
        FrameStyle::Split => vec![inst("add", vec![OpAst::Reg(Reg::USP), imm(f.size)])],
    }
}

fn rewrite(style: FrameStyle, f: &Frame, line: usize, m: &MemAst) -> Result<MemAst, AsmError> {
    let Some(name) = &m.local else {
        return Ok(m.clone());
    };
    let off = *f
        .offsets
        .get(name)
        .ok_or_else(|| syntax(line, format!("unknown local `{name}` in `{}`", f.name)))?;
    if m.base.is_some() {
        return Err(syntax(
            line,
            "a local reference cannot take a base register",
        ));
    }
    let (base, disp) = match style {
        FrameStyle::FramePointer => (Reg::FP, off as i64 - f.size as i64),
        FrameStyle::Split => (Reg::USP, off as i64),
    };
    Ok(MemAst {
        base: Some(base),
        index: m.index,
        scale: m.scale,
        disp: m.disp.clone().plus(disp),
        local: None,
    })
}

/// Lower every function in `unit`. Units without functions come back
/// unchanged.
pub fn lower(unit: &AsmUnit, style: FrameStyle) -> Result<AsmUnit, AsmError> {
    let ustack = unit
        .items
        .iter()
        .rev()
        .find_map(|i| match i {
            Item::UStackSize(n) => Some(*n),
            _ => None,
        })
        .unwrap_or(DEFAULT_STACK);
    let mut out = Vec::with_capacity(unit.items.len());
    let mut i = 0;
    while i < unit.items.len() {
        match &unit.items[i] {
            Item::Func(name) => {
                let end = unit.items[i + 1..]
                    .iter()
                    .position(|it| matches!(it, Item::EndFunc | Item::Func(_)))
                    .map(|p| p + i + 1)
                    .filter(|&e| matches!(unit.items[e], Item::EndFunc))
                    .ok_or_else(|| {
                        syntax(0, format!("function `{name}` has no matching .endfunc"))
                    })?;
                let body = &unit.items[i + 1..end];
                let frame = collect_frame(name, body)?;
                if style == FrameStyle::Split && frame.size > ustack {
                    return Err(AsmError::LocalTooLarge {
                        func: name.clone(),
                        need: frame.size,
                        have: ustack,
                    });
                }
                out.push(Item::Label(name.clone()));
                out.extend(prologue(style, &frame));
                for item in body {
                    match item {
                        Item::Local { .. } => {}
                        Item::Inst {
                            line,
                            rep,
                            mnemonic,
                            width,
                            ops,
                        } => {
                            if mnemonic == "ret" {
                                out.extend(epilogue(style, &frame));
                            }
                            let ops = ops
                                .iter()
                                .map(|o| match o {
                                    OpAst::Mem(m) => {
                                        rewrite(style, &frame, *line, m).map(OpAst::Mem)
                                    }
                                    o => Ok(o.clone()),
                                })
                                .collect::<Result<Vec<_>, _>>()?;
                            out.push(Item::Inst {
                                line: *line,
                                rep: *rep,
                                mnemonic: mnemonic.clone(),
                                width: *width,
                                ops,
                            });
                        }
                        other => out.push(other.clone()),
                    }
                }
                i = end + 1;
            }
            Item::EndFunc => return Err(syntax(0, ".endfunc without .func")),
            Item::Local { line, .. } => return Err(syntax(*line, "local outside a function")),
            Item::Inst { line, ops, .. }
                if ops
                    .iter()
                    .any(|o| matches!(o, OpAst::Mem(m) if m.local.is_some())) =>
            {
                return Err(syntax(*line, "local reference outside a function"));
            }
            other => {
                out.push(other.clone());
                i += 1;
            }
        }
    }
    Ok(AsmUnit { items: out })
}

/// Move function locals onto the unprotected stack.
pub fn split_stacks(unit: &AsmUnit) -> Result<AsmUnit, AsmError> {
    lower(unit, FrameStyle::Split)
}
