//! Instruction semantics and taint propagation, shared by the architectural
//! and the transient domain.

use serde::{Deserialize, Serialize};

use super::{System, CR_NT_ENABLE, CR_TIMER_PERIOD, MODE_USER, NUM_CRS};
use crate::error::{Fault, SimError};
use crate::isa::{Instruction, MemRef, Opcode, Operand};
use crate::memory::{Access, Translation};
use crate::state::{CoreState, ExecutionDomain, Flags, Reg, Width, IA32_PAT};

/// A store that has executed but not yet reached memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingStore {
    pub vaddr: u64,
    pub t: Translation,
    pub width: u64,
    pub value: u64,
    /// Source register taint.
    pub taint: bool,
    /// Retirement count at which the address becomes known.
    pub resolve_at: u64,
}

impl PendingStore {
    pub fn overlaps(&self, paddr: u64, width: u64) -> bool {
        self.t.paddr < paddr + width && paddr < self.t.paddr + self.width
    }

    /// Taint a forwarded value carries: only stores into non-transient
    /// memory keep their taint.
    fn forward_taint(&self) -> bool {
        self.taint && self.t.non_transient
    }
}

/// Why a transient window stopped early.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowEnd {
    Budget,
    Serializing(Opcode),
    Fault,
    UncacheableLoad,
}

#[derive(Debug)]
pub(crate) enum ExecError {
    Fault(Fault),
    End(WindowEnd),
    Sim(SimError),
}

impl From<Fault> for ExecError {
    fn from(f: Fault) -> Self {
        ExecError::Fault(f)
    }
}

impl From<SimError> for ExecError {
    fn from(e: SimError) -> Self {
        ExecError::Sim(e)
    }
}

/// Non-fallthrough outcomes of an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Effect {
    Continue,
    Syscall,
    Iret,
    Halt,
}

struct Loaded {
    value: u64,
    taint: bool,
    overapprox: bool,
    slow: u64,
}

pub(crate) struct Ctx<'a> {
    pub core: &'a mut CoreState,
    pub sys: &'a mut System,
    pub domain: ExecutionDomain,
    /// Stores executed inside the current transient window.
    pub overlay: &'a mut Vec<PendingStore>,
    pub touched: Vec<usize>,
    pub latency: u64,
    /// Loads observed in the window: (vaddr, value, tainted).
    pub loads: Vec<(u64, u64, bool)>,
}

impl<'a> Ctx<'a> {
    pub fn new(
        core: &'a mut CoreState,
        sys: &'a mut System,
        domain: ExecutionDomain,
        overlay: &'a mut Vec<PendingStore>,
    ) -> Ctx<'a> {
        Ctx {
            core,
            sys,
            domain,
            overlay,
            touched: Vec::new(),
            latency: 0,
            loads: Vec::new(),
        }
    }

    fn arch(&self) -> bool {
        self.domain == ExecutionDomain::Architectural
    }

    fn user(&self) -> bool {
        !self.core.privileged
    }

    fn rd(&self, r: Reg) -> (u64, bool) {
        self.core.read_reg(r, self.domain)
    }

    fn slow(&self, r: Reg) -> u64 {
        self.sys.slow_until[r.index()]
    }

    fn touch(&mut self, paddr: u64) {
        let set = self.sys.mem.cache.set_index(paddr);
        if !self.touched.contains(&set) {
            self.touched.push(set);
        }
    }

    fn ea(&self, m: &MemRef) -> u64 {
        let base = m.base.map_or(0, |r| self.rd(r).0);
        let index = m.index.map_or(0, |r| self.rd(r).0 << m.scale);
        base.wrapping_add(index).wrapping_add(m.disp as i64 as u64)
    }

    fn addr_slow(&self, m: &MemRef) -> u64 {
        m.regs().map(|r| self.slow(r)).max().unwrap_or(0)
    }

    fn write(
        &mut self,
        r: Reg,
        value: u64,
        taint: bool,
        width: Width,
        overapprox: bool,
        slow: u64,
    ) {
        let taint = taint && self.sys.config.taint_propagation;
        if self.arch() {
            let prior = self.core.taint.is_tainted(r);
            let st = &mut self.sys.stats;
            if taint {
                st.taint_set_events += 1;
                if overapprox {
                    st.overapprox_events += 1;
                }
            } else if prior {
                st.taint_clear_events += 1;
            }
            self.sys.slow_until[r.index()] = slow;
        }
        self.core.write_reg(r, value, taint, width);
    }

    /// Set a stack pointer without touching its taint.
    fn set_sp(&mut self, value: u64) {
        self.core.set_reg(Reg::SP, value);
    }

    fn untaint_after_store(&mut self, r: Reg, t: &Translation) {
        if self.arch() && !t.non_transient && self.core.taint.is_tainted(r) {
            self.sys.stats.taint_clear_events += 1;
            self.core.taint.set(r, false);
        }
    }

    fn load(&mut self, vaddr: u64, width: u64) -> Result<Loaded, ExecError> {
        if self.arch() {
            self.load_arch(vaddr, width)
        } else {
            self.load_transient(vaddr, width)
        }
    }

    /// Byte-wise merge of pending stores over a load. Returns the value
    /// bytes, a coverage mask, the forwarded taint and whether a store
    /// narrower than a chunk contributed.
    fn forward<'s>(
        paddr: u64,
        width: u64,
        stores: impl Iterator<Item = &'s PendingStore>,
    ) -> Forwarded {
        let mut f = Forwarded {
            bytes: [0; 8],
            covered: 0,
            taint: false,
            partial: false,
        };
        for s in stores {
            if !s.overlaps(paddr, width) {
                continue;
            }
            f.taint |= s.forward_taint();
            f.partial |= s.width < 8;
            let sb = s.value.to_le_bytes();
            for i in 0..width {
                let a = paddr + i;
                if a >= s.t.paddr && a < s.t.paddr + s.width {
                    f.bytes[i as usize] = sb[(a - s.t.paddr) as usize];
                    f.covered |= 1 << i;
                }
            }
        }
        f
    }

    fn merge(mem: u64, bytes: [u8; 8], covered: u8) -> u64 {
        let mut out = mem.to_le_bytes();
        for i in 0..8 {
            if covered & (1 << i) != 0 {
                out[i] = bytes[i];
            }
        }
        u64::from_le_bytes(out)
    }

    fn load_arch(&mut self, vaddr: u64, width: u64) -> Result<Loaded, ExecError> {
        if !vaddr.is_multiple_of(width) {
            return Err(Fault::Unaligned(vaddr).into());
        }
        let t = self.sys.mem.translate(vaddr, Access::Read, self.user())?;
        if t.device {
            self.latency += self.sys.mem.miss_lat;
            return Ok(Loaded {
                value: 0,
                taint: false,
                overapprox: false,
                slow: 0,
            });
        }
        if t.non_transient {
            self.sys.stats.nt_loads += 1;
        }
        let full = full_mask(width);
        let Forwarded {
            bytes,
            covered,
            taint: fwd_taint,
            partial,
        } = Self::forward(t.paddr, width, self.sys.sb.iter());
        // A partial store leaves the rest of its chunk's taint in place, so
        // the chunk has to be consulted as if the store had retired.
        if covered == full && !(partial && t.non_transient) {
            self.latency += self.sys.mem.hit_lat;
            return Ok(Loaded {
                value: Self::merge(0, bytes, covered),
                taint: fwd_taint,
                overapprox: false,
                slow: 0,
            });
        }
        let r = self.sys.mem.load(t, width)?;
        if !t.uncacheable {
            self.touch(t.paddr);
        }
        self.latency += r.latency;
        let slow = if r.hit {
            0
        } else {
            self.sys.stats.retired_instructions + self.sys.config.store_resolve_delay
        };
        Ok(Loaded {
            value: Self::merge(r.value, bytes, covered),
            taint: r.chunk_tainted || fwd_taint,
            overapprox: r.overapprox && !fwd_taint,
            slow,
        })
    }

    fn load_transient(&mut self, vaddr: u64, width: u64) -> Result<Loaded, ExecError> {
        if !vaddr.is_multiple_of(width) {
            return Err(ExecError::End(WindowEnd::Fault));
        }
        let nt_on = self.sys.config.taint_propagation;
        let loaded = match self.sys.mem.translate(vaddr, Access::Read, self.user()) {
            Ok(t) => self.load_transient_ok(t, width)?,
            Err(_) => {
                // Deferred fault: the value is forwarded only if it is already
                // cached, and never from non-transient memory.
                self.sys.stats.deferred_faults += 1;
                match self.sys.mem.translate_unchecked(vaddr) {
                    Some(t) if t.non_transient && nt_on => Loaded {
                        value: 0,
                        taint: true,
                        overapprox: false,
                        slow: 0,
                    },
                    Some(t) if !t.device && self.sys.mem.cache.resident(t.paddr) => Loaded {
                        value: self.sys.mem.phys.read(t.paddr, width)?,
                        taint: false,
                        overapprox: false,
                        slow: 0,
                    },
                    _ => Loaded {
                        value: 0,
                        taint: false,
                        overapprox: false,
                        slow: 0,
                    },
                }
            }
        };
        self.loads.push((vaddr, loaded.value, loaded.taint));
        Ok(loaded)
    }

    fn load_transient_ok(&mut self, t: Translation, width: u64) -> Result<Loaded, ExecError> {
        if t.uncacheable {
            return Err(ExecError::End(WindowEnd::UncacheableLoad));
        }
        if t.device {
            return Ok(Loaded {
                value: 0,
                taint: false,
                overapprox: false,
                slow: 0,
            });
        }
        let full = full_mask(width);
        // Unresolved store-buffer entries are bypassed.
        let sb = self
            .sys
            .sb
            .iter()
            .filter(|s| s.resolve_at <= self.sys.stats.retired_instructions);
        let stores: Vec<PendingStore> = sb.chain(self.overlay.iter()).copied().collect();
        let Forwarded {
            bytes,
            covered,
            taint: fwd_taint,
            partial,
        } = Self::forward(t.paddr, width, stores.iter());
        let nt_on = self.sys.config.taint_propagation;
        let (value, taint) = if covered == full && !(partial && t.non_transient) {
            (Self::merge(0, bytes, covered), fwd_taint)
        } else {
            let r = self.sys.mem.load(t, width)?;
            self.touch(t.paddr);
            let mem_taint = t.non_transient && r.chunk_tainted;
            (Self::merge(r.value, bytes, covered), mem_taint || fwd_taint)
        };
        let taint = taint && nt_on;
        // Secret data never becomes a usable value in the transient domain.
        let value = if taint {
            crate::state::DUMMY_VALUE
        } else {
            value
        };
        Ok(Loaded {
            value,
            taint,
            overapprox: false,
            slow: 0,
        })
    }

    /// Returns the translation of the stored-to page.
    fn store(
        &mut self,
        vaddr: u64,
        width: u64,
        value: u64,
        taint: bool,
        resolve_at: u64,
    ) -> Result<Translation, ExecError> {
        if !vaddr.is_multiple_of(width) {
            return Err(if self.arch() {
                Fault::Unaligned(vaddr).into()
            } else {
                ExecError::End(WindowEnd::Fault)
            });
        }
        let t = match self.sys.mem.translate(vaddr, Access::Write, self.user()) {
            Ok(t) => t,
            Err(f) if self.arch() => return Err(f.into()),
            Err(_) => return Err(ExecError::End(WindowEnd::Fault)),
        };
        let value = value & Width::from_bytes(width).unwrap().mask();
        let entry = PendingStore {
            vaddr,
            t,
            width,
            value,
            taint,
            resolve_at,
        };
        if !self.arch() {
            self.overlay.push(entry);
            return Ok(t);
        }
        if t.non_transient {
            self.sys.stats.nt_stores += 1;
        }
        if self.sys.sb.is_empty() && resolve_at <= self.sys.stats.retired_instructions {
            self.sys.mem.store(t, width, value, taint)?;
            if !t.uncacheable && !t.device {
                self.touch(t.paddr);
            }
        } else {
            self.sys.sb.push_back(entry);
        }
        Ok(t)
    }

    fn push(&mut self, value: u64, taint: bool) -> Result<Translation, ExecError> {
        let sp = self.rd(Reg::SP).0.wrapping_sub(8);
        let t = self.store(sp, 8, value, taint, self.slow(Reg::SP))?;
        self.set_sp(sp);
        Ok(t)
    }

    fn pop(&mut self) -> Result<Loaded, ExecError> {
        let sp = self.rd(Reg::SP).0;
        let v = self.load(sp, 8)?;
        self.set_sp(sp.wrapping_add(8));
        Ok(v)
    }

    fn target(&mut self, op: &Operand) -> Result<u64, ExecError> {
        Ok(match op {
            Operand::Imm(v) => *v as u64,
            Operand::Reg(r) => self.rd(*r).0,
            Operand::Mem(m) => {
                let a = self.ea(m);
                self.load(a, 8)?.value
            }
            Operand::None => unreachable!("validated"),
        })
    }

    /// Execute one instruction at `core.rf.ip`.
    pub fn exec(&mut self, inst: &Instruction) -> Result<Effect, ExecError> {
        if inst.op.is_privileged() && !self.core.privileged {
            return Err(Fault::Privilege.into());
        }
        let next = self.core.rf.ip.wrapping_add(crate::isa::INST_SIZE);
        self.core.rf.ip = next;
        let w = inst.width;
        let bytes = w.bytes();
        match inst.op {
            Opcode::Mov => match (inst.dst, inst.src) {
                (Operand::Reg(d), src) => {
                    let prior = !w.replaces_register() && self.core.taint.is_tainted(d);
                    let (v, t, ov, slow) = match src {
                        Operand::Reg(s) => {
                            let (v, t) = self.rd(s);
                            (v, t, false, self.slow(s))
                        }
                        Operand::Imm(i) => (i as u64, false, false, 0),
                        Operand::Mem(m) => {
                            let a = self.ea(&m);
                            let l = self.load(a, bytes)?;
                            (l.value, l.taint, l.overapprox, l.slow)
                        }
                        Operand::None => unreachable!("validated"),
                    };
                    self.write(d, v, t || prior, w, ov && !prior, slow);
                }
                (Operand::Mem(m), src) => {
                    let a = self.ea(&m);
                    let resolve = self.addr_slow(&m);
                    match src {
                        Operand::Reg(s) => {
                            let (v, t) = self.rd(s);
                            let tr = self.store(a, bytes, v, t, resolve)?;
                            self.untaint_after_store(s, &tr);
                        }
                        Operand::Imm(i) => {
                            self.store(a, bytes, i as u64, false, resolve)?;
                        }
                        _ => unreachable!("validated"),
                    }
                }
                _ => unreachable!("validated"),
            },
            op if op.is_alu() || matches!(op, Opcode::Cmp | Opcode::Test) => {
                let d = inst.dst.reg().expect("validated");
                let (a, ta) = self.rd(d);
                let (b, tb, ov, slow) = match inst.src {
                    Operand::Reg(s) => {
                        let (v, t) = self.rd(s);
                        (v, t, false, self.slow(s))
                    }
                    Operand::Imm(i) => (i as u64, false, false, 0),
                    Operand::Mem(m) => {
                        let addr = self.ea(&m);
                        let l = self.load(addr, bytes)?;
                        (l.value, l.taint, l.overapprox, l.slow)
                    }
                    Operand::None => unreachable!("validated"),
                };
                let prior_taint = self.core.taint.is_tainted(d);
                let (res, flags) = if inst.is_zero_idiom() {
                    (0, alu(op, 0, 0, w).1)
                } else {
                    alu(op, a, b, w)
                };
                self.core.rf.flags = flags;
                if op.is_alu() {
                    let (taint, slow) = if inst.is_zero_idiom() {
                        (inst.rep && prior_taint, 0)
                    } else {
                        (
                            ta || tb || (inst.rep && prior_taint),
                            slow.max(self.slow(d)),
                        )
                    };
                    let ov = ov && !ta;
                    self.write(d, res, taint, w, ov, slow);
                }
            }
            Opcode::Jcc(c) => {
                if c.holds(self.core.rf.flags) {
                    self.core.rf.ip = self.target(&inst.dst)?;
                }
            }
            Opcode::Jmp => {
                self.core.rf.ip = self.target(&inst.dst)?;
            }
            Opcode::Call => {
                let target = self.target(&inst.dst)?;
                self.push(next, false)?;
                self.core.rf.ip = target;
            }
            Opcode::Ret => {
                self.core.rf.ip = self.pop()?.value;
            }
            Opcode::Push => {
                let r = inst.dst.reg().expect("validated");
                let (v, t) = self.rd(r);
                let tr = self.push(v, t)?;
                self.untaint_after_store(r, &tr);
            }
            Opcode::Pop => {
                let r = inst.dst.reg().expect("validated");
                let l = self.pop()?;
                self.write(r, l.value, l.taint, Width::W64, l.overapprox, l.slow);
            }
            Opcode::Lfence => {
                if self.arch() {
                    self.sys.drain_all()?;
                    self.latency += self.sys.config.lfence_stall;
                }
            }
            Opcode::Clflush => {
                let m = *inst.dst.mem().expect("validated");
                let a = self.ea(&m);
                let t = match self.sys.mem.translate(a, Access::Read, self.user()) {
                    Ok(t) => t,
                    Err(f) if self.arch() => return Err(f.into()),
                    Err(_) => return Err(ExecError::End(WindowEnd::Fault)),
                };
                if self.arch() {
                    self.sys.drain_all()?;
                    self.sys.mem.clflush(t.paddr);
                    self.touch(t.paddr);
                }
            }
            Opcode::Rdtime => {
                let r = inst.dst.reg().expect("validated");
                let now = self.sys.cycles;
                self.write(r, now, false, Width::W64, false, 0);
            }
            Opcode::Rdmsr => {
                let (which, t) = self.rd(Reg::gpr(1));
                let v = if which == IA32_PAT {
                    self.sys.mem.pat().to_msr()
                } else {
                    self.core.rdmsr(which)?
                };
                self.write(Reg::gpr(0), v, t, Width::W64, false, 0);
            }
            Opcode::Wrmsr => {
                let which = self.rd(Reg::gpr(1)).0;
                let v = self.rd(Reg::gpr(0)).0;
                if which == IA32_PAT {
                    self.sys.mem.set_pat(crate::memory::PatTable::from_msr(v));
                } else {
                    self.core.wrmsr(which, v)?;
                }
            }
            Opcode::Syscall => {
                if self.core.privileged {
                    return Err(Fault::IllegalInstruction.into());
                }
                return Ok(Effect::Syscall);
            }
            Opcode::Iret => {
                let ip = self.pop()?.value;
                let mode = self.pop()?.value;
                let sp = self.pop()?.value;
                self.core.rf.ip = ip;
                self.core.rf.flags = Flags::from_bits(mode);
                self.core.privileged = mode & MODE_USER == 0;
                self.set_sp(sp);
                self.core.taint.iret();
                return Ok(Effect::Iret);
            }
            Opcode::Crctl => {
                let idx = match inst.dst {
                    Operand::Imm(i) if (0..NUM_CRS as i64).contains(&i) => i as usize,
                    _ => return Err(Fault::IllegalInstruction.into()),
                };
                let v = self.rd(inst.src.reg().expect("validated")).0;
                self.sys.cr[idx] = v;
                match idx as u64 {
                    CR_NT_ENABLE => self.sys.mem.set_cr_enable(v != 0),
                    CR_TIMER_PERIOD => self.sys.next_timer = (v != 0).then(|| self.sys.cycles + v),
                    _ => {}
                }
            }
            Opcode::Halt => return Ok(Effect::Halt),
            Opcode::Nop => {}
            _ => unreachable!("all opcodes covered"),
        }
        Ok(Effect::Continue)
    }
}

struct Forwarded {
    bytes: [u8; 8],
    covered: u8,
    taint: bool,
    partial: bool,
}

fn full_mask(width: u64) -> u8 {
    ((1u16 << width) - 1) as u8
}

/// Result and flags of an arithmetic/logical operation at `width`.
pub fn alu(op: Opcode, a: u64, b: u64, width: Width) -> (u64, Flags) {
    let mask = width.mask();
    let bits = width.bits();
    let sign = 1u64 << (bits - 1);
    let (a, b) = (a & mask, b & mask);
    let (r, carry, overflow) = match op {
        Opcode::Add => {
            let r = a.wrapping_add(b) & mask;
            (
                r,
                (a as u128 + b as u128) > mask as u128,
                (a ^ r) & (b ^ r) & sign != 0,
            )
        }
        Opcode::Sub | Opcode::Cmp => {
            let r = a.wrapping_sub(b) & mask;
            (r, a < b, (a ^ b) & (a ^ r) & sign != 0)
        }
        Opcode::And | Opcode::Test => (a & b, false, false),
        Opcode::Or => (a | b, false, false),
        Opcode::Xor => (a ^ b, false, false),
        Opcode::Shl => {
            let n = (b & 63) as u32;
            (if n >= bits { 0 } else { (a << n) & mask }, false, false)
        }
        Opcode::Shr => {
            let n = (b & 63) as u32;
            (if n >= bits { 0 } else { a >> n }, false, false)
        }
        _ => unreachable!("not an ALU opcode"),
    };
    (
        r,
        Flags {
            zero: r == 0,
            sign: r & sign != 0,
            carry,
            overflow,
        },
    )
}

/// Memory read footprint of an instruction: (vaddr, width) of each load.
pub fn load_footprint(inst: &Instruction, core: &CoreState) -> Vec<(u64, u64)> {
    let d = ExecutionDomain::Architectural;
    let ea = |m: &MemRef| {
        let base = m.base.map_or(0, |r| core.read_reg(r, d).0);
        let index = m.index.map_or(0, |r| core.read_reg(r, d).0 << m.scale);
        base.wrapping_add(index).wrapping_add(m.disp as i64 as u64)
    };
    let sp = core.reg(Reg::SP);
    match (inst.op, &inst.dst, &inst.src) {
        (Opcode::Ret | Opcode::Pop, _, _) => vec![(sp, 8)],
        (Opcode::Iret, _, _) => vec![(sp, 8), (sp.wrapping_add(8), 8), (sp.wrapping_add(16), 8)],
        (Opcode::Jmp | Opcode::Call, Operand::Mem(m), _) => vec![(ea(m), 8)],
        (Opcode::Clflush, _, _) => vec![],
        (_, Operand::Reg(_), Operand::Mem(m)) => vec![(ea(m), inst.width.bytes())],
        _ => vec![],
    }
}
