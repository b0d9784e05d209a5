//! The simulated machine: fetch/decode/retire loop, branch prediction,
//! transient windows, the store buffer and interrupt delivery.

pub mod exec;
pub mod predict;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::error::{Fault, SimError};
use crate::isa::{Instruction, Opcode, Operand, INST_SIZE};
use crate::memory::{Access, MemorySystem};
use crate::state::{CoreState, ExecutionDomain, Reg, NUM_REGS};
use crate::stats::RunStats;
use crate::trace::TraceRecord;

pub use exec::{alu, PendingStore, WindowEnd};
use exec::{Ctx, Effect, ExecError};
pub use predict::{Btb, Pht, Predictors, Rsb};

/// Control registers written by `crctl`.
pub const CR_NT_ENABLE: u64 = 0;
pub const CR_KERNEL_SP: u64 = 1;
pub const CR_SYSCALL_VEC: u64 = 2;
pub const CR_TIMER_VEC: u64 = 3;
pub const CR_NMI_VEC: u64 = 4;
pub const CR_FAULT_VEC: u64 = 5;
pub const CR_TIMER_PERIOD: u64 = 6;
pub const NUM_CRS: usize = 7;

/// Bit of the saved flags word recording that the interrupted context ran
/// in user mode.
pub const MODE_USER: u64 = 1 << 8;

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interrupt {
    Timer,
    Nmi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HaltReason {
    Halt,
    Exit { code: u64 },
    Fault { fault: Fault, ip: u64 },
    DoubleFault { ip: u64 },
    Budget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecKind {
    Conditional,
    Indirect,
    Return,
    StoreBypass,
    DeferredFault,
}

/// Record of one transient window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeculationTrace {
    pub kind: SpecKind,
    pub branch_ip: u64,
    pub start_ip: u64,
    pub uops: u64,
    pub end: WindowEnd,
    pub loads: Vec<(u64, u64, bool)>,
    pub sets_touched: Vec<usize>,
    pub taint_after: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEvent {
    Retired { ip: u64, inst: Instruction },
    Interrupt(u64),
    Fault(Fault),
    Halted(HaltReason),
}

/// Everything except the architectural register state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct System {
    pub config: SimConfig,
    pub mem: MemorySystem,
    pub pred: Predictors,
    pub sb: VecDeque<PendingStore>,
    pub cr: [u64; NUM_CRS],
    /// Per register: retirement count at which its value is available.
    pub slow_until: Vec<u64>,
    pub cycles: u64,
    pub stats: RunStats,
    pub halted: Option<HaltReason>,
    pub pending_timer: bool,
    pub pending_nmi: bool,
    pub nmi_blocked: bool,
    pub next_timer: Option<u64>,
    #[serde(skip)]
    pub trace: Option<Vec<TraceRecord>>,
    #[serde(skip)]
    pub windows: Option<Vec<SpeculationTrace>>,
}

impl System {
    /// Write back every store-buffer entry whose address has resolved.
    pub fn drain(&mut self) -> Result<(), SimError> {
        let now = self.stats.retired_instructions;
        while let Some(e) = self.sb.front() {
            if e.resolve_at > now {
                break;
            }
            let e = self.sb.pop_front().unwrap();
            self.mem.store(e.t, e.width, e.value, e.taint)?;
        }
        Ok(())
    }

    /// Resolve and write back every pending store.
    pub fn drain_all(&mut self) -> Result<(), SimError> {
        while let Some(e) = self.sb.pop_front() {
            self.mem.store(e.t, e.width, e.value, e.taint)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Machine {
    pub core: CoreState,
    pub sys: System,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    version: u32,
    machine: Machine,
}

impl Machine {
    pub fn new(config: SimConfig) -> Result<Machine, SimError> {
        config.validate()?;
        let mem = MemorySystem::new(
            config.phys_size,
            config.cache,
            config.nt_encoding,
            config.latencies.hit,
            config.latencies.miss,
        )?;
        let pred = Predictors::new(config.pht_size, config.btb_size, config.rsb_depth);
        let mut core = CoreState::new();
        core.privileged = true;
        Ok(Machine {
            core,
            sys: System {
                config,
                mem,
                pred,
                sb: VecDeque::new(),
                cr: [0; NUM_CRS],
                slow_until: vec![0; NUM_REGS],
                cycles: 0,
                stats: RunStats::default(),
                halted: None,
                pending_timer: false,
                pending_nmi: false,
                nmi_blocked: false,
                next_timer: None,
                trace: None,
                windows: None,
            },
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.sys.config
    }

    pub fn mem(&self) -> &MemorySystem {
        &self.sys.mem
    }

    pub fn mem_mut(&mut self) -> &mut MemorySystem {
        &mut self.sys.mem
    }

    pub fn stats(&self) -> RunStats {
        RunStats {
            cycles: self.sys.cycles,
            ..self.sys.stats.clone()
        }
    }

    pub fn halted(&self) -> Option<HaltReason> {
        self.sys.halted
    }

    pub fn cycles(&self) -> u64 {
        self.sys.cycles
    }

    pub fn enable_trace(&mut self) {
        self.sys.trace.get_or_insert_with(Vec::new);
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.sys.trace.take().unwrap_or_default()
    }

    pub fn record_windows(&mut self) {
        self.sys.windows.get_or_insert_with(Vec::new);
    }

    pub fn windows(&self) -> &[SpeculationTrace] {
        self.sys.windows.as_deref().unwrap_or(&[])
    }

    pub fn inject(&mut self, irq: Interrupt) {
        match irq {
            Interrupt::Timer => self.sys.pending_timer = true,
            Interrupt::Nmi => self.sys.pending_nmi = true,
        }
    }

    pub fn in_user_mode(&self) -> bool {
        !self.core.privileged
    }

    pub fn snapshot(&self) -> String {
        serde_json::to_string(&Snapshot {
            version: SNAPSHOT_VERSION,
            machine: self.clone(),
        })
        .expect("serializable")
    }

    pub fn from_snapshot(s: &str) -> Result<Machine, SimError> {
        let snap: Snapshot =
            serde_json::from_str(s).map_err(|e| SimError::Snapshot(e.to_string()))?;
        if snap.version != SNAPSHOT_VERSION {
            return Err(SimError::Snapshot(format!(
                "unsupported version {}",
                snap.version
            )));
        }
        Ok(snap.machine)
    }

    /// Flush+Reload probe from the host: timed load of `vaddr`.
    pub fn probe_latency(&mut self, vaddr: u64) -> Result<u64, Fault> {
        let t = self
            .sys
            .mem
            .translate_unchecked(vaddr)
            .ok_or(Fault::NotPresent(vaddr))?;
        let r = self
            .sys
            .mem
            .load(t, 1)
            .map_err(|_| Fault::NotPresent(vaddr))?;
        self.sys.cycles += r.latency;
        Ok(r.latency)
    }

    /// Host-side flush of the line holding `vaddr`.
    pub fn clflush(&mut self, vaddr: u64) -> Result<(), Fault> {
        let t = self
            .sys
            .mem
            .translate_unchecked(vaddr)
            .ok_or(Fault::NotPresent(vaddr))?;
        self.sys.mem.clflush(t.paddr);
        Ok(())
    }

    fn halt(&mut self, reason: HaltReason) -> StepEvent {
        self.sys.halted = Some(reason);
        StepEvent::Halted(reason)
    }

    /// Run until the machine halts or `max_steps` steps have executed.
    pub fn run(&mut self, max_steps: u64) -> Result<Option<HaltReason>, SimError> {
        for _ in 0..max_steps {
            if let Some(h) = self.sys.halted {
                return Ok(Some(h));
            }
            self.step()?;
        }
        Ok(self.sys.halted)
    }

    /// Run until halt or the configured cycle budget.
    pub fn run_to_halt(&mut self) -> Result<HaltReason, SimError> {
        loop {
            if let Some(h) = self.sys.halted {
                return Ok(h);
            }
            self.step()?;
        }
    }

    fn fetch(&mut self, ip: u64) -> Result<Instruction, Fault> {
        if !ip.is_multiple_of(INST_SIZE) {
            return Err(Fault::Unaligned(ip));
        }
        let t = self
            .sys
            .mem
            .translate(ip, Access::Exec, !self.core.privileged)?;
        let mut buf = [0u8; INST_SIZE as usize];
        self.sys
            .mem
            .phys
            .read_bytes(t.paddr, &mut buf)
            .map_err(|_| Fault::NotPresent(ip))?;
        Instruction::decode(&buf)
    }

    /// Deliver an interrupt, fault or syscall through `vector`.
    fn enter(&mut self, vector: u64, ret_ip: u64) -> Result<(), SimError> {
        self.core.taint.interrupt_entry();
        self.sys.drain_all()?;
        let old_sp = self.core.reg(Reg::SP);
        let sp_taint = self.core.taint.is_tainted(Reg::SP);
        let from_user = !self.core.privileged;
        let mode = self.core.rf.flags.to_bits() | if from_user { MODE_USER } else { 0 };
        self.core.privileged = true;
        if from_user {
            self.core
                .set_reg(Reg::SP, self.sys.cr[CR_KERNEL_SP as usize]);
        }
        for (v, t) in [(old_sp, sp_taint), (mode, false), (ret_ip, false)] {
            let sp = self.core.reg(Reg::SP).wrapping_sub(8);
            let tr = match self.sys.mem.translate(sp, Access::Write, false) {
                Ok(tr) if sp.is_multiple_of(8) => tr,
                _ => {
                    self.halt(HaltReason::DoubleFault { ip: ret_ip });
                    return Ok(());
                }
            };
            self.sys.mem.store(tr, 8, v, t)?;
            self.core.set_reg(Reg::SP, sp);
        }
        self.core.rf.ip = vector;
        self.sys.cycles += self.sys.config.interrupt_cost;
        self.sys.stats.interrupts += 1;
        Ok(())
    }

    fn deliver_fault(&mut self, f: Fault, ip: u64) -> Result<StepEvent, SimError> {
        let vec = self.sys.cr[CR_FAULT_VEC as usize];
        if self.core.privileged || vec == 0 {
            return Ok(self.halt(HaltReason::Fault { fault: f, ip }));
        }
        self.enter(vec, ip)?;
        Ok(StepEvent::Fault(f))
    }

    fn pending_interrupt(&mut self) -> Option<u64> {
        let s = &mut self.sys;
        let user = !self.core.privileged;
        if s.pending_nmi && !s.nmi_blocked && s.cr[CR_NMI_VEC as usize] != 0 {
            s.pending_nmi = false;
            s.nmi_blocked = true;
            return Some(s.cr[CR_NMI_VEC as usize]);
        }
        let timer_vec = s.cr[CR_TIMER_VEC as usize];
        if user && timer_vec != 0 {
            let due = s.next_timer.is_some_and(|t| s.cycles >= t);
            if due {
                s.next_timer = Some(s.cycles + s.cr[CR_TIMER_PERIOD as usize]);
            }
            if due || s.pending_timer {
                s.pending_timer = false;
                return Some(timer_vec);
            }
        }
        None
    }

    /// Execute one step: deliver a pending interrupt or retire one instruction.
    pub fn step(&mut self) -> Result<StepEvent, SimError> {
        if self.sys.halted.is_some() {
            return Err(SimError::Halted);
        }
        if self.sys.cycles >= self.sys.config.max_cycles {
            return Ok(self.halt(HaltReason::Budget));
        }
        self.sys.drain()?;
        if let Some(vec) = self.pending_interrupt() {
            let ip = self.core.rf.ip;
            self.enter(vec, ip)?;
            return Ok(StepEvent::Interrupt(vec));
        }
        let ip = self.core.rf.ip;
        let inst = match self.fetch(ip) {
            Ok(i) => i,
            Err(f) => return self.deliver_fault(f, ip),
        };
        let window = self.sys.config.window > 0;

        // A load that overlaps an older store with an unresolved address
        // first runs with the stale value.
        if window && !self.sys.sb.is_empty() {
            let now = self.sys.stats.retired_instructions;
            let hazard = exec::load_footprint(&inst, &self.core)
                .into_iter()
                .any(|(va, w)| {
                    self.sys.mem.translate_unchecked(va).is_some_and(|t| {
                        self.sys
                            .sb
                            .iter()
                            .any(|s| s.resolve_at > now && s.overlaps(t.paddr, w))
                    })
                });
            if hazard {
                self.sys.stats.stl_bypasses += 1;
                let shadow = self.core.clone();
                self.run_window(SpecKind::StoreBypass, ip, ip, shadow)?;
                self.sys.drain_all()?;
            }
        }

        let predicted = match (inst.op, &inst.dst) {
            (Opcode::Jcc(_), Operand::Imm(t)) => Some(if self.sys.pred.pht.predict(ip) {
                *t as u64
            } else {
                ip + INST_SIZE
            }),
            (Opcode::Jmp | Opcode::Call, Operand::Reg(_) | Operand::Mem(_)) => {
                self.sys.pred.btb.predict(ip)
            }
            (Opcode::Ret, _) => self.sys.pred.predict_return(ip),
            _ => None,
        };

        let mut overlay = Vec::new();
        let (result, touched, latency) = {
            let mut ctx = Ctx::new(
                &mut self.core,
                &mut self.sys,
                ExecutionDomain::Architectural,
                &mut overlay,
            );
            let r = ctx.exec(&inst);
            (r, std::mem::take(&mut ctx.touched), ctx.latency)
        };
        let effect = match result {
            Ok(e) => e,
            Err(ExecError::Sim(e)) => return Err(e),
            Err(ExecError::End(_)) => unreachable!("architectural execution never ends a window"),
            Err(ExecError::Fault(f)) => {
                self.core.rf.ip = ip;
                let deferrable = matches!(f, Fault::Protection(_) | Fault::NotPresent(_))
                    && !exec::load_footprint(&inst, &self.core).is_empty();
                if window && deferrable {
                    let shadow = self.core.clone();
                    self.run_window(SpecKind::DeferredFault, ip, ip, shadow)?;
                }
                self.sys.cycles += 1 + latency;
                return self.deliver_fault(f, ip);
            }
        };

        self.sys.cycles += 1 + latency;
        self.sys.stats.retired_instructions += 1;

        // Resolve the branch against its prediction.
        let actual = self.core.rf.ip;
        match inst.op {
            Opcode::Jcc(_) => {
                let taken = actual != ip + INST_SIZE;
                if let Some(p) = predicted.filter(|&p| p != actual) {
                    if window {
                        let shadow = self.core.clone();
                        self.run_window(SpecKind::Conditional, ip, p, shadow)?;
                    }
                    self.mispredict();
                }
                self.sys.pred.pht.update(ip, taken);
            }
            Opcode::Jmp | Opcode::Call | Opcode::Ret
                if !matches!(inst.dst, Operand::Imm(_)) || inst.op == Opcode::Ret =>
            {
                if let Some(p) = predicted.filter(|&p| p != actual) {
                    let kind = if inst.op == Opcode::Ret {
                        SpecKind::Return
                    } else {
                        SpecKind::Indirect
                    };
                    if window {
                        let shadow = self.core.clone();
                        self.run_window(kind, ip, p, shadow)?;
                    }
                    self.mispredict();
                }
                self.sys.pred.btb.update(ip, actual);
            }
            _ => {}
        }
        if inst.op == Opcode::Call {
            self.sys.pred.rsb.push(ip + INST_SIZE);
        }

        self.record(ip, &inst, touched);

        match effect {
            Effect::Continue | Effect::Iret => {
                if effect == Effect::Iret {
                    self.sys.nmi_blocked = false;
                }
            }
            Effect::Halt => {
                self.sys.drain_all()?;
                let reason = match self.sys.mem.device.exit_code {
                    Some(code) => HaltReason::Exit { code },
                    None => HaltReason::Halt,
                };
                return Ok(self.halt(reason));
            }
            Effect::Syscall => {
                self.sys.stats.syscall_count += 1;
                let vec = self.sys.cr[CR_SYSCALL_VEC as usize];
                if vec == 0 {
                    return self.deliver_fault(Fault::IllegalInstruction, ip);
                }
                let ret = self.core.rf.ip;
                self.enter(vec, ret)?;
            }
        }
        if let Some(code) = self.sys.mem.device.exit_code {
            return Ok(self.halt(HaltReason::Exit { code }));
        }
        Ok(StepEvent::Retired { ip, inst })
    }

    fn mispredict(&mut self) {
        self.sys.stats.mispredictions += 1;
        self.sys.cycles += self.sys.config.mispredict_penalty;
    }

    fn record(&mut self, ip: u64, inst: &Instruction, touched: Vec<usize>) {
        if self.sys.trace.is_none() {
            return;
        }
        let rec = TraceRecord {
            ip,
            opcode: inst.op.mnemonic().to_string(),
            domain: ExecutionDomain::Architectural,
            reg_taint_after: self.core.taint.bitmap(),
            cache_set_touched: touched,
            sp: self.core.reg(Reg::SP),
            usp: self.core.reg(Reg::USP),
            user: !self.core.privileged,
            uops: None,
        };
        self.sys.trace.as_mut().unwrap().push(rec);
    }

    /// Execute up to W µops from `start` on a copy of the register state,
    /// then discard everything but the microarchitectural effects.
    fn run_window(
        &mut self,
        kind: SpecKind,
        branch_ip: u64,
        start: u64,
        mut shadow: CoreState,
    ) -> Result<(), SimError> {
        let limit = self.sys.config.window;
        shadow.rf.ip = start;
        let mut overlay = Vec::new();
        let mut uops = 0;
        let mut touched = Vec::new();
        let mut loads = Vec::new();
        let end = loop {
            if uops >= limit {
                break WindowEnd::Budget;
            }
            let ip = shadow.rf.ip;
            if !ip.is_multiple_of(INST_SIZE) {
                break WindowEnd::Fault;
            }
            let inst = match self.sys.mem.translate(ip, Access::Exec, !shadow.privileged) {
                Ok(t) => {
                    let mut buf = [0u8; INST_SIZE as usize];
                    if self.sys.mem.phys.read_bytes(t.paddr, &mut buf).is_err() {
                        break WindowEnd::Fault;
                    }
                    match Instruction::decode(&buf) {
                        Ok(i) => i,
                        Err(_) => break WindowEnd::Fault,
                    }
                }
                Err(_) => break WindowEnd::Fault,
            };
            if inst.op.is_serializing() || inst.op == Opcode::Syscall {
                break WindowEnd::Serializing(inst.op);
            }
            let mut ctx = Ctx::new(
                &mut shadow,
                &mut self.sys,
                ExecutionDomain::Transient,
                &mut overlay,
            );
            let r = ctx.exec(&inst);
            for s in ctx.touched.drain(..) {
                if !touched.contains(&s) {
                    touched.push(s);
                }
            }
            loads.append(&mut ctx.loads);
            match r {
                Ok(_) => uops += 1,
                Err(ExecError::Sim(e)) => return Err(e),
                Err(ExecError::End(e)) => break e,
                Err(ExecError::Fault(_)) => break WindowEnd::Fault,
            }
        };
        self.sys.stats.transient_uops += uops;
        self.sys.stats.transient_windows += 1;
        if let Some(tr) = self.sys.trace.as_mut() {
            tr.push(TraceRecord {
                ip: start,
                opcode: "window".into(),
                domain: ExecutionDomain::Transient,
                reg_taint_after: shadow.taint.bitmap(),
                cache_set_touched: touched.clone(),
                sp: shadow.reg(Reg::SP),
                usp: shadow.reg(Reg::USP),
                user: !shadow.privileged,
                uops: Some(uops),
            });
        }
        if let Some(w) = self.sys.windows.as_mut() {
            w.push(SpeculationTrace {
                kind,
                branch_ip,
                start_ip: start,
                uops,
                end,
                loads,
                sets_touched: touched,
                taint_after: shadow.taint.bitmap(),
            });
        }
        Ok(())
    }
}
