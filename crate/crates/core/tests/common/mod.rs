//! Helpers shared by the integration tests: bare-mode boot, a random
//! straight-line program generator and an independent dataflow oracle for
//! register taint.

#![allow(dead_code)]

use std::collections::HashMap;
use std::fmt::Write;

use ntsim::asm::assemble;
use ntsim::config::SimConfig;
use ntsim::cpu::{HaltReason, Interrupt, Machine};
use ntsim::os::{boot, LoadOptions, LoadedProgram};
use ntsim::state::Reg;
use ntsim::state::TAINT_MASK;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

pub fn bare(src: &str, cfg: SimConfig) -> (Machine, LoadedProgram) {
    let img = assemble(src).unwrap_or_else(|e| panic!("{e}\n{src}"));
    boot(cfg, &img, &LoadOptions::default()).unwrap()
}

pub fn run_bare(src: &str, cfg: SimConfig) -> Machine {
    let (mut m, _) = bare(src, cfg);
    assert_eq!(m.run_to_halt().unwrap(), HaltReason::Halt);
    m
}

pub fn reg(name: &str) -> Reg {
    name.parse().unwrap()
}

/// Registers the generator may write.
pub const REGS: [&str; 16] = [
    "r0", "r1", "r2", "r3", "r4", "r5", "r6", "r7", "r8", "r9", "r10", "r11", "f0", "f1", "v0",
    "v31",
];
pub const ALU: [&str; 7] = ["add", "sub", "and", "or", "xor", "shl", "shr"];
pub const SECRET_LEN: u64 = 128;
pub const DATA_LEN: u64 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Data,
    Secret,
}

impl Region {
    fn label(self) -> &'static str {
        match self {
            Region::Data => "data",
            Region::Secret => "secret",
        }
    }
}

/// One generated instruction. Widths are in bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Gen {
    MovImm(&'static str, i32),
    MovReg(u64, &'static str, &'static str),
    Alu {
        op: &'static str,
        rep: bool,
        dst: &'static str,
        src: &'static str,
    },
    AluImm {
        op: &'static str,
        rep: bool,
        dst: &'static str,
        imm: i32,
    },
    AluMem {
        op: &'static str,
        dst: &'static str,
        region: Region,
        off: u64,
    },
    Load(u64, &'static str, Region, u64),
    Store(u64, Region, u64, &'static str),
    StoreImm(Region, u64, i32),
    Push(&'static str),
    Pop(&'static str),
    Cmp(&'static str, &'static str),
}

fn suffix(w: u64) -> &'static str {
    match w {
        1 => ".b",
        2 => ".w",
        4 => ".d",
        _ => "",
    }
}

impl Gen {
    pub fn asm(&self) -> String {
        match self {
            Gen::MovImm(d, i) => format!("mov {d}, {i}"),
            Gen::MovReg(w, d, s) => format!("mov{} {d}, {s}", suffix(*w)),
            Gen::Alu { op, rep, dst, src } => {
                format!("{}{op} {dst}, {src}", if *rep { "rep " } else { "" })
            }
            Gen::AluImm { op, rep, dst, imm } => {
                format!("{}{op} {dst}, {imm}", if *rep { "rep " } else { "" })
            }
            Gen::AluMem {
                op,
                dst,
                region,
                off,
            } => format!("{op} {dst}, [{} + {off}]", region.label()),
            Gen::Load(w, d, r, off) => format!("mov{} {d}, [{} + {off}]", suffix(*w), r.label()),
            Gen::Store(w, r, off, s) => format!("mov{} [{} + {off}], {s}", suffix(*w), r.label()),
            Gen::StoreImm(r, off, i) => format!("mov [{} + {off}], {i}", r.label()),
            Gen::Push(s) => format!("push {s}"),
            Gen::Pop(d) => format!("pop {d}"),
            Gen::Cmp(a, b) => format!("cmp {a}, {b}"),
        }
    }
}

fn offset(rng: &mut impl Rng, w: u64, len: u64) -> u64 {
    rng.gen_range(0..len / w) * w
}

/// A random straight-line program of at most `max_len` instructions.
pub fn gen_program(rng: &mut impl Rng, max_len: usize) -> Vec<Gen> {
    let len = rng.gen_range(1..=max_len);
    gen_exact(rng, len)
}

pub fn gen_exact(rng: &mut impl Rng, len: usize) -> Vec<Gen> {
    let mut out = Vec::with_capacity(len);
    let mut depth = 0usize;
    let r = |rng: &mut dyn rand::RngCore| *REGS.choose(rng).unwrap();
    while out.len() < len {
        let w = *[1u64, 2, 4, 8].choose(rng).unwrap();
        let region = if rng.gen_bool(0.6) {
            Region::Secret
        } else {
            Region::Data
        };
        let rlen = if region == Region::Secret {
            SECRET_LEN
        } else {
            DATA_LEN
        };
        let g = match rng.gen_range(0..12) {
            0 => Gen::MovImm(r(rng), rng.gen_range(-1000..1000)),
            1 => Gen::MovReg(w, r(rng), r(rng)),
            2 => Gen::Alu {
                op: ALU.choose(rng).unwrap(),
                rep: rng.gen_bool(0.3),
                dst: r(rng),
                src: r(rng),
            },
            3 => {
                let d = r(rng);
                Gen::Alu {
                    op: ["xor", "sub"].choose(rng).unwrap(),
                    rep: rng.gen_bool(0.5),
                    dst: d,
                    src: d,
                }
            }
            4 => Gen::AluImm {
                op: ALU.choose(rng).unwrap(),
                rep: rng.gen_bool(0.3),
                dst: r(rng),
                imm: rng.gen_range(0..64),
            },
            5 => Gen::AluMem {
                op: ALU.choose(rng).unwrap(),
                dst: r(rng),
                region,
                off: offset(rng, 8, rlen),
            },
            6 | 7 => Gen::Load(w, r(rng), region, offset(rng, w, rlen)),
            8 | 9 => Gen::Store(w, region, offset(rng, w, rlen), r(rng)),
            10 => Gen::StoreImm(region, offset(rng, 8, rlen), rng.gen_range(-50..50)),
            _ => {
                if depth > 0 && rng.gen_bool(0.5) {
                    depth -= 1;
                    Gen::Pop(r(rng))
                } else if rng.gen_bool(0.8) {
                    depth += 1;
                    Gen::Push(r(rng))
                } else {
                    Gen::Cmp(r(rng), r(rng))
                }
            }
        };
        out.push(g);
    }
    out
}

pub fn program_source(prog: &[Gen], secret: &[u8]) -> String {
    let mut s = String::from(".text\n_start:\n");
    for g in prog {
        writeln!(s, "    {}", g.asm()).unwrap();
    }
    s.push_str("    halt\n.data\ndata: .zero 128\n");
    let bytes: Vec<String> = secret.iter().map(|b| b.to_string()).collect();
    writeln!(s, "nospec secret: .byte {}", bytes.join(", ")).unwrap();
    s
}

/// Dataflow taint of every register after `prog`, computed from the rules
/// alone: loads from non-transient memory taint unless the chunk was last
/// fully overwritten with an untainted value, stores to normal memory
/// untaint the source, 8/16-bit register writes keep the old taint, and the
/// zeroing idioms untaint unless `rep`-prefixed. With `nt` false nothing is
/// ever tainted.
pub fn oracle(prog: &[Gen], nt: bool) -> u64 {
    let mut regs: HashMap<&str, bool> = HashMap::new();
    // chunk taint of non-transient memory: secret by offset, stack by depth
    let mut secret: HashMap<u64, bool> = HashMap::new();
    let mut stack: Vec<bool> = Vec::new();
    let t = |regs: &HashMap<&str, bool>, r: &str| regs.get(r).copied().unwrap_or(false);
    let merges = |w: u64| w < 4;
    for g in prog {
        match *g {
            Gen::MovImm(d, _) => {
                regs.insert(d, false);
            }
            Gen::MovReg(w, d, s) => {
                let v = t(&regs, s) || (merges(w) && t(&regs, d));
                regs.insert(d, v);
            }
            Gen::Alu {
                op: "xor" | "sub",
                rep,
                dst,
                src,
            } if dst == src => {
                let v = rep && t(&regs, dst);
                regs.insert(dst, v);
            }
            Gen::Alu { dst, src, .. } => {
                let v = t(&regs, dst) || t(&regs, src);
                regs.insert(dst, v);
            }
            Gen::AluImm { .. } | Gen::Cmp(..) => {}
            Gen::AluMem {
                dst, region, off, ..
            } => {
                let m = region == Region::Secret && nt && *secret.get(&(off & !7)).unwrap_or(&true);
                let v = t(&regs, dst) || m;
                regs.insert(dst, v);
            }
            Gen::Load(w, d, region, off) => {
                let m = region == Region::Secret && nt && *secret.get(&(off & !7)).unwrap_or(&true);
                let v = m || (merges(w) && t(&regs, d));
                regs.insert(d, v);
            }
            Gen::Store(w, region, off, s) => {
                if region == Region::Secret && nt {
                    let c = secret.entry(off & !7).or_insert(true);
                    *c = if w == 8 {
                        t(&regs, s)
                    } else {
                        *c || t(&regs, s)
                    };
                } else {
                    regs.insert(s, false);
                }
            }
            Gen::StoreImm(region, off, _) => {
                if region == Region::Secret && nt {
                    secret.insert(off & !7, false);
                }
            }
            Gen::Push(s) => {
                if nt {
                    stack.push(t(&regs, s));
                } else {
                    stack.push(false);
                    regs.insert(s, false);
                }
            }
            Gen::Pop(d) => {
                let v = stack.pop().expect("balanced");
                regs.insert(d, v);
            }
        }
    }
    regs.iter()
        .filter(|(_, &v)| v)
        .fold(0, |acc, (r, _)| acc | reg(r).bit())
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Sweep {
    pub checked: usize,
    pub failures: usize,
}

/// Deliver `irq` to `m` and run until the interrupted user context is back.
/// Returns whether the taint map and ip came back unchanged.
fn round_trip(mut m: Machine, irq: Interrupt, budget: usize) -> bool {
    let (ip, before) = (m.core.rf.ip, m.core.taint.bitmap());
    m.inject(irq);
    m.step().unwrap();
    for _ in 0..budget {
        if m.in_user_mode() {
            return m.core.rf.ip == ip && m.core.taint.bitmap() == before;
        }
        m.step().unwrap();
    }
    false
}

/// Interrupt every instruction boundary of a `len`-instruction user program
/// with a timer interrupt, for `maps` random initial taint maps. With
/// `nested`, one boundary per map additionally gets an NMI injected at every
/// instruction boundary of the timer handler.
pub fn interrupt_sweep(aware: bool, len: usize, maps: usize, seed: u64, nested: bool) -> Sweep {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let prog = gen_exact(&mut rng, len);
    let secret: Vec<u8> = (0..SECRET_LEN).map(|_| rng.gen()).collect();
    let img = assemble(&program_source(&prog, &secret)).unwrap();
    let opts = LoadOptions {
        taint_aware: aware,
        ..LoadOptions::kernel()
    };
    let (mut start, _) = boot(SimConfig::default(), &img, &opts).unwrap();
    while !start.in_user_mode() {
        start.step().unwrap();
    }
    let mut out = Sweep::default();
    let mut record = |ok: bool| {
        out.checked += 1;
        out.failures += !ok as usize;
    };
    for map in 0..maps {
        let mut m = start.clone();
        m.core.taint.set_bitmap(rng.gen::<u64>() & TAINT_MASK);
        let nested_at = map % len;
        for k in 0..len {
            record(round_trip(m.clone(), Interrupt::Timer, 1000));
            if nested && k == nested_at {
                let mut outer = m.clone();
                let (ip, before) = (outer.core.rf.ip, outer.core.taint.bitmap());
                outer.inject(Interrupt::Timer);
                outer.step().unwrap();
                while !outer.in_user_mode() {
                    let mut inner = outer.clone();
                    inner.inject(Interrupt::Nmi);
                    let mut steps = 0;
                    while !inner.in_user_mode() && steps < 2000 {
                        inner.step().unwrap();
                        steps += 1;
                    }
                    record(inner.core.rf.ip == ip && inner.core.taint.bitmap() == before);
                    outer.step().unwrap();
                }
            }
            m.step().unwrap();
            assert!(m.in_user_mode() && m.halted().is_none());
        }
    }
    out
}

/// A program of chained functions with locals of mixed sizes, the last one
/// recursive. Every function logs one byte derived from its locals.
pub fn gen_frame_program(rng: &mut impl Rng) -> String {
    const SIZES: [u64; 8] = [8, 16, 24, 64, 128, 256, 512, 1024];
    let funcs = rng.gen_range(1..=4);
    let depth = rng.gen_range(1..=12);
    let mut s = format!(
        ".text\n_start:\n    mov r0, {}\n    mov r1, {depth}\n    call fn0\n    mov.b [0x7fff0000], r0\n    halt\n",
        rng.gen_range(0..200)
    );
    for i in 0..funcs {
        let big = *SIZES.choose(rng).unwrap();
        let off = rng.gen_range(0..big / 8) * 8;
        let k = rng.gen_range(1..50);
        writeln!(s, ".func fn{i}\n    local buf, {big}\n    local arg, 8").unwrap();
        writeln!(
            s,
            "    mov [%arg], r0\n    mov [%buf + {off}], r0\n    add r0, {k}"
        )
        .unwrap();
        if i + 1 < funcs {
            writeln!(
                s,
                "    push r0\n    call fn{}\n    pop r3\n    add r0, r3",
                i + 1
            )
            .unwrap();
        } else {
            writeln!(
                s,
                "    sub r1, 1\n    je fn{i}_base\n    call fn{i}\nfn{i}_base:"
            )
            .unwrap();
        }
        writeln!(
            s,
            "    mov r2, [%arg]\n    add r0, r2\n    mov r2, [%buf + {off}]\n    xor r0, r2"
        )
        .unwrap();
        writeln!(s, "    mov.b [0x7fff0000], r0\n    ret\n.endfunc").unwrap();
    }
    s
}

/// Architectural outcome of a frame program plus its stack usage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRun {
    pub log: Vec<u8>,
    pub halt: HaltReason,
    pub result: u64,
    pub nt_peak: u64,
    pub unprotected_peak: u64,
}

pub fn run_frame_program(src: &str, split: bool) -> FrameRun {
    use ntsim::asm::{assemble_unit, split_stacks, stack_report, AsmUnit};
    let unit = AsmUnit::parse(src).unwrap();
    let unit = if split {
        split_stacks(&unit).unwrap()
    } else {
        unit
    };
    let img = assemble_unit(&unit).unwrap();
    let (mut m, prog) = boot(SimConfig::default(), &img, &LoadOptions::default()).unwrap();
    m.enable_trace();
    let halt = m.run_to_halt().unwrap();
    let trace = m.take_trace();
    let r = stack_report(&trace, &prog);
    FrameRun {
        log: m.mem().device.log.clone(),
        halt,
        result: m.core.reg(Reg::gpr(0)),
        nt_peak: r.nt_peak,
        unprotected_peak: r.unprotected_peak,
    }
}

/// Run a generated program. With `evict`, lines of the secret and the stack
/// top are randomly flushed between instructions.
pub fn run_program(
    prog: &[Gen],
    secret: &[u8],
    cfg: SimConfig,
    evict: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Machine {
    let (mut m, loaded) = bare(&program_source(prog, secret), cfg);
    let secret_base = loaded.symbol_section(".secret").unwrap().vaddr;
    let stack_top = loaded.stacks[0].nt_stack.end;
    let mut evict = evict;
    while m.halted().is_none() {
        if let Some(rng) = evict.as_deref_mut() {
            if rng.gen_bool(0.3) {
                let addr = match rng.gen_range(0..3) {
                    0 => secret_base,
                    1 => secret_base + 64,
                    _ => stack_top - 64,
                };
                m.clflush(addr).unwrap();
            }
        }
        m.step().unwrap();
    }
    assert_eq!(m.halted(), Some(HaltReason::Halt));
    m
}
