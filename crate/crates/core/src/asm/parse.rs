//! Source parsing into an [`AsmUnit`]: a flat list of items that keeps
//! symbolic references unresolved so the unit can be transformed and
//! printed back as source.

use std::fmt;

use crate::error::AsmError;
use crate::state::{Reg, Width};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SectionKind {
    Text,
    Data,
    Secret,
}

impl SectionKind {
    pub fn name(self) -> &'static str {
        match self {
            SectionKind::Text => ".text",
            SectionKind::Data => ".data",
            SectionKind::Secret => ".secret",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Num(i64),
    Sym(String),
}

/// Sum of signed terms.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Expr(pub Vec<(bool, Term)>);

impl Expr {
    pub fn num(v: i64) -> Expr {
        Expr(vec![(false, Term::Num(v))])
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|(_, t)| *t == Term::Num(0))
    }

    pub fn plus(mut self, v: i64) -> Expr {
        if v != 0 {
            self.0.push((v < 0, Term::Num(v.unsigned_abs() as i64)));
        }
        self
    }

    /// Fold numeric terms; `lookup` resolves symbols.
    pub fn eval(&self, mut lookup: impl FnMut(&str) -> Option<i64>) -> Result<i64, String> {
        let mut acc: i64 = 0;
        for (neg, t) in &self.0 {
            let v = match t {
                Term::Num(n) => *n,
                Term::Sym(s) => lookup(s).ok_or_else(|| s.clone())?,
            };
            acc = if *neg {
                acc.wrapping_sub(v)
            } else {
                acc.wrapping_add(v)
            };
        }
        Ok(acc)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "0");
        }
        for (i, (neg, t)) in self.0.iter().enumerate() {
            match (i, neg) {
                (0, true) => write!(f, "-")?,
                (0, false) => {}
                (_, true) => write!(f, " - ")?,
                (_, false) => write!(f, " + ")?,
            }
            match t {
                Term::Num(n) if *n >= 10 => write!(f, "{n:#x}")?,
                Term::Num(n) => write!(f, "{n}")?,
                Term::Sym(s) => write!(f, "{s}")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemAst {
    pub base: Option<Reg>,
    pub index: Option<Reg>,
    pub scale: u8,
    pub disp: Expr,
    /// `%name` reference to a function local.
    pub local: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpAst {
    Reg(Reg),
    Imm(Expr),
    Mem(MemAst),
}

impl fmt::Display for OpAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpAst::Reg(r) => write!(f, "{r}"),
            OpAst::Imm(e) => write!(f, "{e}"),
            OpAst::Mem(m) => {
                let mut parts = Vec::new();
                if let Some(l) = &m.local {
                    parts.push(format!("%{l}"));
                }
                if let Some(b) = m.base {
                    parts.push(b.to_string());
                }
                if let Some(i) = m.index {
                    parts.push(format!("{i}*{}", 1u32 << m.scale));
                }
                let mut s = parts.join(" + ");
                if !m.disp.is_zero() || s.is_empty() {
                    let d = m.disp.to_string();
                    if s.is_empty() {
                        s = d;
                    } else if let Some(rest) = d.strip_prefix('-') {
                        s = format!("{s} - {rest}");
                    } else {
                        s = format!("{s} + {d}");
                    }
                }
                write!(f, "[{s}]")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataInit {
    Zero(u64),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Item {
    Section {
        kind: SectionKind,
        base: Option<u64>,
    },
    Label(String),
    Inst {
        line: usize,
        rep: bool,
        mnemonic: String,
        width: Width,
        ops: Vec<OpAst>,
    },
    Byte {
        line: usize,
        values: Vec<Expr>,
    },
    Quad {
        line: usize,
        values: Vec<Expr>,
    },
    Ascii(Vec<u8>),
    Zero(u64),
    Align(u64),
    Nospec {
        name: String,
        init: DataInit,
    },
    StackSize(u64),
    UStackSize(u64),
    Func(String),
    EndFunc,
    Local {
        line: usize,
        name: String,
        size: u64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AsmUnit {
    pub items: Vec<Item>,
}

fn syntax(line: usize, msg: impl Into<String>) -> AsmError {
    AsmError::Syntax {
        line,
        msg: msg.into(),
    }
}

fn is_ident(s: &str) -> bool {
    let mut c = s.chars();
    matches!(c.next(), Some(ch) if ch.is_ascii_alphabetic() || ch == '_' || ch == '.')
        && c.all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '.')
}

fn label_name(line: usize, name: &str) -> Result<String, AsmError> {
    if name.parse::<Reg>().is_ok() {
        return Err(syntax(line, format!("`{name}` is a register name")));
    }
    Ok(name.to_string())
}

fn strip_comment(line: &str) -> &str {
    let mut quote = None;
    for (i, c) in line.char_indices() {
        match (quote, c) {
            (None, '"' | '\'') => quote = Some(c),
            (Some(q), _) if c == q => quote = None,
            (None, ';') => return &line[..i],
            (None, '/') if line[i..].starts_with("//") => return &line[..i],
            _ => {}
        }
    }
    line
}

/// Split at top-level commas (outside brackets and quotes).
fn split_commas(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let (mut depth, mut quote, mut start) = (0, None, 0);
    for (i, c) in s.char_indices() {
        match (quote, c) {
            (None, '"' | '\'') => quote = Some(c),
            (Some(q), _) if c == q => quote = None,
            (None, '[') => depth += 1,
            (None, ']') => depth -= 1,
            (None, ',') if depth == 0 => {
                out.push(s[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    let last = s[start..].trim();
    if !last.is_empty() || !out.is_empty() {
        out.push(last);
    }
    out
}

fn parse_number(s: &str) -> Option<i64> {
    let s = s.replace('_', "");
    if let Some(h) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        return u64::from_str_radix(h, 16).ok().map(|v| v as i64);
    }
    if let Some(b) = s.strip_prefix("0b") {
        return u64::from_str_radix(b, 2).ok().map(|v| v as i64);
    }
    if s.len() == 3 && s.starts_with('\'') && s.ends_with('\'') {
        return Some(s.as_bytes()[1] as i64);
    }
    if s.starts_with(|c: char| c.is_ascii_digit()) {
        return s.parse::<u64>().ok().map(|v| v as i64);
    }
    None
}

/// Split `a + b - c` into signed pieces (top level only). An empty piece
/// other than before a leading sign signals a malformed expression.
fn signed_pieces(s: &str) -> Vec<(bool, &str)> {
    let mut out = Vec::new();
    let (mut neg, mut start, mut quote) = (false, 0, false);
    for (i, c) in s.char_indices() {
        match c {
            '\'' => quote = !quote,
            '+' | '-' if !quote => {
                let piece = s[start..i].trim();
                if !(piece.is_empty() && start == 0) {
                    out.push((neg, piece));
                }
                neg = c == '-';
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push((neg, s[start..].trim()));
    out
}

fn parse_term(line: usize, s: &str) -> Result<Term, AsmError> {
    if let Some(n) = parse_number(s) {
        return Ok(Term::Num(n));
    }
    if is_ident(s) && s.parse::<Reg>().is_err() {
        return Ok(Term::Sym(s.to_string()));
    }
    Err(syntax(line, format!("bad expression term `{s}`")))
}

pub fn parse_expr(line: usize, s: &str) -> Result<Expr, AsmError> {
    let s = s.trim();
    if s.is_empty() {
        return Err(syntax(line, "empty expression"));
    }
    let mut terms = Vec::new();
    for (neg, piece) in signed_pieces(s) {
        if piece.is_empty() {
            return Err(syntax(line, format!("bad expression `{s}`")));
        }
        terms.push((neg, parse_term(line, piece)?));
    }
    Ok(Expr(terms))
}

fn parse_mem(line: usize, inner: &str) -> Result<MemAst, AsmError> {
    let mut m = MemAst {
        base: None,
        index: None,
        scale: 0,
        disp: Expr::default(),
        local: None,
    };
    for (neg, piece) in signed_pieces(inner) {
        if piece.is_empty() {
            return Err(syntax(line, format!("bad memory operand `[{inner}]`")));
        }
        if let Some(name) = piece.strip_prefix('%') {
            if neg || m.local.is_some() || !is_ident(name) {
                return Err(syntax(line, format!("bad local reference `{piece}`")));
            }
            m.local = Some(name.to_string());
            continue;
        }
        if let Some((a, b)) = piece.split_once('*') {
            let (a, b) = (a.trim(), b.trim());
            let (reg, scale) = match (a.parse::<Reg>(), b.parse::<Reg>()) {
                (Ok(r), _) => (r, b),
                (_, Ok(r)) => (r, a),
                _ => return Err(syntax(line, format!("bad scaled index `{piece}`"))),
            };
            let scale = match parse_number(scale) {
                Some(1) => 0,
                Some(2) => 1,
                Some(4) => 2,
                Some(8) => 3,
                _ => {
                    return Err(syntax(
                        line,
                        format!("scale must be 1, 2, 4 or 8 in `{piece}`"),
                    ))
                }
            };
            if neg || m.index.is_some() {
                return Err(syntax(line, format!("bad index in `[{inner}]`")));
            }
            m.index = Some(reg);
            m.scale = scale;
            continue;
        }
        if let Ok(r) = piece.parse::<Reg>() {
            if neg {
                return Err(syntax(line, "registers cannot be subtracted"));
            }
            if m.base.is_none() {
                m.base = Some(r);
            } else if m.index.is_none() {
                m.index = Some(r);
            } else {
                return Err(syntax(line, format!("too many registers in `[{inner}]`")));
            }
            continue;
        }
        m.disp.0.push((neg, parse_term(line, piece)?));
    }
    Ok(m)
}

pub fn parse_operand(line: usize, s: &str) -> Result<OpAst, AsmError> {
    let s = s.trim();
    if let Some(inner) = s.strip_prefix('[') {
        let inner = inner
            .strip_suffix(']')
            .ok_or_else(|| syntax(line, format!("unclosed `[` in `{s}`")))?;
        return parse_mem(line, inner).map(OpAst::Mem);
    }
    if let Ok(r) = s.parse::<Reg>() {
        return Ok(OpAst::Reg(r));
    }
    parse_expr(line, s).map(OpAst::Imm)
}

fn parse_string(line: usize, s: &str) -> Result<Vec<u8>, AsmError> {
    let inner = s
        .trim()
        .strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .ok_or_else(|| syntax(line, "expected a quoted string"))?;
    let mut out = Vec::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            let mut buf = [0; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            continue;
        }
        out.push(match chars.next() {
            Some('n') => b'\n',
            Some('t') => b'\t',
            Some('0') => 0,
            Some('\\') => b'\\',
            Some('"') => b'"',
            other => {
                return Err(syntax(
                    line,
                    format!("bad escape `\\{}`", other.unwrap_or(' ')),
                ))
            }
        });
    }
    Ok(out)
}

fn parse_size(line: usize, s: &str) -> Result<u64, AsmError> {
    let s = s.trim();
    let s = s.strip_suffix("bytes").unwrap_or(s).trim();
    parse_number(s)
        .filter(|&v| v >= 0)
        .map(|v| v as u64)
        .ok_or_else(|| syntax(line, format!("expected a size, got `{s}`")))
}

fn parse_bytes_list(line: usize, s: &str) -> Result<Vec<u8>, AsmError> {
    split_commas(s)
        .into_iter()
        .map(|v| {
            parse_number(v)
                .map(|n| n as u8)
                .ok_or_else(|| syntax(line, format!("bad byte `{v}`")))
        })
        .collect()
}

impl AsmUnit {
    pub fn parse(src: &str) -> Result<AsmUnit, AsmError> {
        let mut items = Vec::new();
        for (i, raw) in src.lines().enumerate() {
            parse_line(i + 1, strip_comment(raw).trim(), &mut items)?;
        }
        Ok(AsmUnit { items })
    }

    /// Print the unit back as assembly source.
    pub fn to_source(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            let line = match item {
                Item::Section {
                    kind,
                    base: Some(b),
                } => format!("{} {b:#x}", kind.name()),
                Item::Section { kind, base: None } => kind.name().to_string(),
                Item::Label(l) => format!("{l}:"),
                Item::Inst {
                    rep,
                    mnemonic,
                    width,
                    ops,
                    ..
                } => {
                    let ops: Vec<String> = ops.iter().map(|o| o.to_string()).collect();
                    let prefix = if *rep { "rep " } else { "" };
                    let mut s = format!("    {prefix}{mnemonic}{}", width.suffix());
                    if !ops.is_empty() {
                        s.push(' ');
                        s.push_str(&ops.join(", "));
                    }
                    s
                }
                Item::Byte { values, .. } => format!("    .byte {}", join(values)),
                Item::Quad { values, .. } => format!("    .quad {}", join(values)),
                Item::Ascii(b) => format!(
                    "    .byte {}",
                    b.iter()
                        .map(|v| v.to_string())
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
                Item::Zero(n) => format!("    .zero {n}"),
                Item::Align(n) => format!("    .align {n}"),
                Item::Nospec {
                    name,
                    init: DataInit::Zero(n),
                } => format!("nospec {name}: {n}"),
                Item::Nospec {
                    name,
                    init: DataInit::Bytes(b),
                } => format!(
                    "nospec {name}: .byte {}",
                    b.iter()
                        .map(|v| v.to_string())
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
                Item::StackSize(n) => format!(".stacksize {n}"),
                Item::UStackSize(n) => format!(".ustacksize {n}"),
                Item::Func(f) => format!(".func {f}"),
                Item::EndFunc => ".endfunc".to_string(),
                Item::Local { name, size, .. } => format!("    local {name}, {size}"),
            };
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

fn join(values: &[Expr]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

fn parse_line(line: usize, mut s: &str, items: &mut Vec<Item>) -> Result<(), AsmError> {
    if let Some(rest) = s.strip_prefix("nospec ") {
        let (name, init) = rest
            .split_once(':')
            .ok_or_else(|| syntax(line, "expected `nospec NAME: ...`"))?;
        let name = name.trim();
        if !is_ident(name) {
            return Err(syntax(line, format!("bad name `{name}`")));
        }
        let init = init.trim();
        let init = if init.starts_with('"') {
            DataInit::Bytes(parse_string(line, init)?)
        } else if let Some(list) = init.strip_prefix(".byte") {
            DataInit::Bytes(parse_bytes_list(line, list)?)
        } else {
            DataInit::Zero(parse_size(line, init)?)
        };
        items.push(Item::Nospec {
            name: label_name(line, name)?,
            init,
        });
        return Ok(());
    }
    // leading labels
    while let Some((head, rest)) = s.split_once(':') {
        let head = head.trim();
        if !is_ident(head) || head.starts_with('.') {
            break;
        }
        items.push(Item::Label(label_name(line, head)?));
        s = rest.trim();
    }
    if s.is_empty() {
        return Ok(());
    }
    let (word, rest) = s
        .split_once(char::is_whitespace)
        .map_or((s, ""), |(a, b)| (a, b.trim()));
    if word.starts_with('.') {
        return parse_directive(line, word, rest, items);
    }
    if word == "local" {
        let parts = split_commas(rest);
        let [name, size] = parts[..] else {
            return Err(syntax(line, "expected `local NAME, SIZE`"));
        };
        if !is_ident(name) {
            return Err(syntax(line, format!("bad local name `{name}`")));
        }
        items.push(Item::Local {
            line,
            name: name.to_string(),
            size: parse_size(line, size)?,
        });
        return Ok(());
    }
    let (rep, word, rest) = if word == "rep" {
        let (w, r) = rest
            .split_once(char::is_whitespace)
            .map_or((rest, ""), |(a, b)| (a, b.trim()));
        (true, w, r)
    } else {
        (false, word, rest)
    };
    let (mnemonic, width) = match word.rsplit_once('.') {
        Some((m, "b")) => (m, Width::W8),
        Some((m, "w")) => (m, Width::W16),
        Some((m, "d")) => (m, Width::W32),
        Some(_) => return Err(syntax(line, format!("bad width suffix in `{word}`"))),
        None => (word, Width::W64),
    };
    let ops = split_commas(rest)
        .into_iter()
        .map(|o| parse_operand(line, o))
        .collect::<Result<Vec<_>, _>>()?;
    if ops.len() > 2 {
        return Err(syntax(line, "too many operands"));
    }
    items.push(Item::Inst {
        line,
        rep,
        mnemonic: mnemonic.to_ascii_lowercase(),
        width,
        ops,
    });
    Ok(())
}

fn parse_directive(
    line: usize,
    word: &str,
    rest: &str,
    items: &mut Vec<Item>,
) -> Result<(), AsmError> {
    let kind = match word {
        ".text" => Some(SectionKind::Text),
        ".data" => Some(SectionKind::Data),
        ".secret" => Some(SectionKind::Secret),
        _ => None,
    };
    if let Some(kind) = kind {
        let base = if rest.is_empty() {
            None
        } else {
            Some(parse_size(line, rest)?)
        };
        items.push(Item::Section { kind, base });
        return Ok(());
    }
    let item = match word {
        ".byte" => Item::Byte {
            line,
            values: split_commas(rest)
                .into_iter()
                .map(|v| parse_expr(line, v))
                .collect::<Result<_, _>>()?,
        },
        ".quad" => Item::Quad {
            line,
            values: split_commas(rest)
                .into_iter()
                .map(|v| parse_expr(line, v))
                .collect::<Result<_, _>>()?,
        },
        ".ascii" => Item::Ascii(parse_string(line, rest)?),
        ".asciz" => {
            let mut b = parse_string(line, rest)?;
            b.push(0);
            Item::Ascii(b)
        }
        ".zero" | ".space" => Item::Zero(parse_size(line, rest)?),
        ".align" => {
            let n = parse_size(line, rest)?;
            if !n.is_power_of_two() {
                return Err(syntax(line, "alignment must be a power of two"));
            }
            Item::Align(n)
        }
        ".stacksize" => Item::StackSize(parse_size(line, rest)?),
        ".ustacksize" => Item::UStackSize(parse_size(line, rest)?),
        ".func" if is_ident(rest) => Item::Func(label_name(line, rest)?),
        ".endfunc" if rest.is_empty() => Item::EndFunc,
        _ => return Err(syntax(line, format!("unknown directive `{word} {rest}`"))),
    };
    items.push(item);
    Ok(())
}
