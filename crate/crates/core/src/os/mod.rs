//! Loader and minimal guest runtime.
//!
//! Two modes:
//!
//! - **bare**: the program runs privileged with no kernel; the host sets the
//!   non-transient gate and the PAT directly.
//! - **kernel**: a generated guest kernel boots, installs its vectors and
//!   `iret`s into the user program. Up to two tasks (`_start`, `_start2`)
//!   are time-sliced on the timer.
//!
//! User address space layout:
//!
//! | region                  | address                                   |
//! |-------------------------|-------------------------------------------|
//! | image sections          | as assembled (below `0x2800_0000`)        |
//! | task i main stack       | top `0x3000_0000 - i * 0x100_0000`         |
//! | task i unprotected stack| top `0x3800_0000 - i * 0x100_0000`         |
//! | kernel                  | `0x7000_0000` and up, supervisor only     |

pub mod kernel;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::asm::{assemble, BinaryImage};
use crate::config::SimConfig;
use crate::cpu::{Machine, CR_NT_ENABLE, MODE_USER};
use crate::error::{ImageError, LoadError};
use crate::memory::{
    MemoryType, Pte, DEVICE_PADDR, NS_PAT_INDEX, PAGE_SHIFT, PAGE_SIZE, UC_PAT_INDEX,
};
use crate::state::Reg;
use kernel::KernelParams;

pub const USER_STACK_TOP: u64 = 0x3000_0000;
pub const USER_USTACK_TOP: u64 = 0x3800_0000;
pub const TASK_STRIDE: u64 = 0x0100_0000;
/// Image sections must end below this address.
pub const USER_LIMIT: u64 = 0x2800_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Bare,
    Kernel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub mode: Mode,
    /// Kernel saves and restores `IA32_TAINT` around every entry.
    pub taint_aware: bool,
    /// Contents of the kernel's own secret section.
    pub kernel_secret: Option<Vec<u8>>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            mode: Mode::Bare,
            taint_aware: true,
            kernel_secret: None,
        }
    }
}

impl LoadOptions {
    pub fn kernel() -> LoadOptions {
        LoadOptions {
            mode: Mode::Kernel,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadedSection {
    pub name: String,
    pub vaddr: u64,
    pub len: u64,
    pub exec: bool,
    pub write: bool,
    pub non_transient: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStacks {
    pub nt_stack: Range<u64>,
    pub unprotected_stack: Range<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadedProgram {
    pub sections: Vec<LoadedSection>,
    pub entry: u64,
    pub entry2: Option<u64>,
    /// One entry per task.
    pub stacks: Vec<TaskStacks>,
    pub mode: Mode,
}

impl LoadedProgram {
    pub fn symbol_section(&self, name: &str) -> Option<&LoadedSection> {
        self.sections.iter().find(|s| s.name == name)
    }
}

/// Task state saved on a kernel stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskControlBlock {
    pub task: usize,
    /// Every register except `sp`, in push order, then `sp`.
    pub saved_regs: Vec<(String, u64)>,
    pub ip: u64,
    pub flags: u64,
    pub saved_taint: u64,
    pub kernel_stack: Range<u64>,
}

struct Frames {
    next: u64,
    limit: u64,
}

impl Frames {
    fn alloc(&mut self) -> Result<u64, LoadError> {
        if self.next >= self.limit {
            return Err(LoadError::OutOfMemory);
        }
        self.next += 1;
        Ok(self.next - 1)
    }
}

#[derive(Clone, Copy)]
struct MapFlags {
    user: bool,
    write: bool,
    exec: bool,
    nt: bool,
}

struct Loader<'a> {
    m: &'a mut Machine,
    frames: Frames,
}

impl Loader<'_> {
    fn pte_flags(&self, f: MapFlags, ppn: u64) -> Pte {
        let mut bits = Pte::PRESENT;
        if f.write {
            bits |= Pte::RW;
        }
        if f.user {
            bits |= Pte::USER;
        }
        if !f.exec {
            bits |= Pte::NX;
        }
        let mut pte = Pte::new(ppn, bits);
        let cfg = &self.m.sys.config;
        if f.nt && cfg.context_enabled {
            pte = cfg.nt_encoding.mark(pte);
        } else if f.nt && cfg.light_mode {
            pte = pte.with_pat_index(UC_PAT_INDEX);
        }
        pte
    }

    /// Map `[vaddr, vaddr+len)` to fresh frames and copy `data` in.
    fn map(
        &mut self,
        name: &str,
        vaddr: u64,
        len: u64,
        data: &[u8],
        f: MapFlags,
    ) -> Result<(), LoadError> {
        let first = vaddr >> PAGE_SHIFT;
        let last = (vaddr + len.max(1) - 1) >> PAGE_SHIFT;
        for vpn in first..=last {
            if self.m.sys.mem.pte(vpn).is_some() {
                return Err(LoadError::Reserved(name.to_string()));
            }
            let ppn = self.frames.alloc()?;
            let pte = self.pte_flags(f, ppn);
            self.m.sys.mem.set_pte(vpn, pte);
        }
        self.m
            .sys
            .mem
            .poke(vaddr, data)
            .ok_or(LoadError::OutOfMemory)?;
        if f.nt {
            // fresh secret contents: drop any cached copy
            for vpn in first..=last {
                let paddr = self.m.sys.mem.pte(vpn).unwrap().ppn() << PAGE_SHIFT;
                self.m.sys.mem.flush_range(paddr, PAGE_SIZE);
                self.m.sys.mem.mark_unknown(paddr, PAGE_SIZE);
            }
        }
        Ok(())
    }

    fn map_device(&mut self, vaddr: u64) {
        let pte = Pte::new(DEVICE_PADDR >> PAGE_SHIFT, Pte::PRESENT | Pte::RW | Pte::NX);
        self.m.sys.mem.set_pte(vaddr >> PAGE_SHIFT, pte);
    }
}

fn check_layout(image: &BinaryImage) -> Result<(), LoadError> {
    image.validate()?;
    let mut secs: Vec<_> = image.loadable().collect();
    secs.sort_by_key(|s| s.vaddr);
    for s in &secs {
        if s.end() > USER_LIMIT {
            return Err(LoadError::Reserved(s.name.clone()));
        }
        if s.vaddr < PAGE_SIZE {
            return Err(LoadError::Reserved(s.name.clone()));
        }
    }
    for w in secs.windows(2) {
        let a_end = w[0].end().next_multiple_of(PAGE_SIZE);
        if a_end > w[1].vaddr {
            return Err(LoadError::Overlap(w[0].name.clone(), w[1].name.clone()));
        }
    }
    Ok(())
}

/// PAT value programmed for this configuration.
fn pat_value(cfg: &SimConfig) -> Option<u64> {
    let mut pat = crate::memory::PatTable::default();
    if cfg.context_enabled && cfg.nt_encoding == crate::memory::NtEncoding::PatMemoryType {
        pat.set(NS_PAT_INDEX, MemoryType::NS);
        Some(pat.to_msr())
    } else {
        None
    }
}

/// Create a machine and load `image` into it.
pub fn boot(
    config: SimConfig,
    image: &BinaryImage,
    opts: &LoadOptions,
) -> Result<(Machine, LoadedProgram), LoadError> {
    let mut m = Machine::new(config)?;
    let prog = load_binary(&mut m, image, opts)?;
    Ok((m, prog))
}

/// Load `image` into a freshly created machine.
pub fn load_binary(
    m: &mut Machine,
    image: &BinaryImage,
    opts: &LoadOptions,
) -> Result<LoadedProgram, LoadError> {
    check_layout(image)?;
    let meta = image.meta()?;
    let tasks = if meta.entry2.is_some() { 2 } else { 1 };
    if tasks > 1 && opts.mode == Mode::Bare {
        return Err(LoadError::TooManyTasks);
    }
    let user = opts.mode == Mode::Kernel;
    let limit = m.sys.config.phys_size >> PAGE_SHIFT;
    let mut ld = Loader {
        m,
        frames: Frames { next: 1, limit },
    };

    let mut sections = Vec::new();
    for s in image.loadable() {
        let f = MapFlags {
            user,
            write: s.write(),
            exec: s.exec(),
            nt: s.non_transient(),
        };
        ld.map(&s.name, s.vaddr, s.bytes.len() as u64, &s.bytes, f)?;
        sections.push(LoadedSection {
            name: s.name.clone(),
            vaddr: s.vaddr,
            len: s.bytes.len() as u64,
            exec: s.exec(),
            write: s.write(),
            non_transient: s.non_transient(),
        });
    }

    let mut stacks = Vec::new();
    for t in 0..tasks as u64 {
        let top = USER_STACK_TOP - t * TASK_STRIDE;
        let utop = USER_USTACK_TOP - t * TASK_STRIDE;
        let (n, u) = (
            meta.stack_size.next_multiple_of(PAGE_SIZE),
            meta.ustack_size.next_multiple_of(PAGE_SIZE),
        );
        if n == 0 || n > TASK_STRIDE / 2 || u > TASK_STRIDE / 2 {
            return Err(
                ImageError::Section(".meta".into(), "stack size out of range".into()).into(),
            );
        }
        let rw = MapFlags {
            user,
            write: true,
            exec: false,
            nt: true,
        };
        ld.map("stack", top - n, n, &[], rw)?;
        if u > 0 {
            ld.map("ustack", utop - u, u, &[], MapFlags { nt: false, ..rw })?;
        }
        stacks.push(TaskStacks {
            nt_stack: top - n..top,
            unprotected_stack: utop - u..utop,
        });
    }
    ld.map_device(kernel::DEV_VADDR);

    let cfg = ld.m.sys.config.clone();
    match opts.mode {
        Mode::Bare => {
            if cfg.context_enabled {
                ld.m.sys.cr[CR_NT_ENABLE as usize] = 1;
                ld.m.sys.mem.set_cr_enable(true);
            }
            if let Some(v) = pat_value(&cfg) {
                ld.m.sys.mem.set_pat(crate::memory::PatTable::from_msr(v));
            }
            let core = &mut ld.m.core;
            core.privileged = true;
            core.rf.ip = meta.entry;
            core.set_reg(Reg::SP, stacks[0].nt_stack.end);
            core.set_reg(Reg::USP, stacks[0].unprotected_stack.end);
        }
        Mode::Kernel => {
            let params = KernelParams {
                taint_aware: opts.taint_aware,
                pat: pat_value(&cfg),
                cr_enable: cfg.context_enabled,
                tasks,
                timer_period: cfg.timer_period,
                secret: opts.kernel_secret.clone(),
                user_entry: meta.entry,
                user_sp: stacks[0].nt_stack.end,
                user_usp: stacks[0].unprotected_stack.end,
            };
            let kimg = assemble(&kernel::source(&params))?;
            for s in kimg.loadable() {
                let f = MapFlags {
                    user: false,
                    write: s.write(),
                    exec: s.exec(),
                    nt: s.non_transient(),
                };
                ld.map(
                    &format!("kernel{}", s.name),
                    s.vaddr,
                    s.bytes.len() as u64,
                    &s.bytes,
                    f,
                )?;
            }
            for t in 0..2 {
                let top = kernel::kstack_top(t);
                let f = MapFlags {
                    user: false,
                    write: true,
                    exec: false,
                    nt: true,
                };
                ld.map(
                    "kernel stack",
                    top - kernel::KSTACK_SIZE,
                    kernel::KSTACK_SIZE,
                    &[],
                    f,
                )?;
            }
            if let (Some(e2), Some(st)) = (meta.entry2, stacks.get(1)) {
                let base = kernel::kstack_top(1) - 8 * kernel::FRAME_WORDS as u64;
                let mut frame = vec![0u8; 8 * kernel::FRAME_WORDS];
                let mut put = |off: u64, v: u64| {
                    frame[off as usize..off as usize + 8].copy_from_slice(&v.to_le_bytes())
                };
                put(kernel::slot(Reg::USP), st.unprotected_stack.end);
                put(kernel::RET_IP_SLOT, e2);
                put(kernel::MODE_SLOT, MODE_USER);
                put(kernel::OLD_SP_SLOT, st.nt_stack.end);
                ld.m.sys
                    .mem
                    .poke(base, &frame)
                    .ok_or(LoadError::OutOfMemory)?;
            }
            let core = &mut ld.m.core;
            core.privileged = true;
            core.rf.ip = kimg.meta()?.entry;
        }
    }
    Ok(LoadedProgram {
        sections,
        entry: meta.entry,
        entry2: meta.entry2,
        stacks,
        mode: opts.mode,
    })
}

/// Read the saved state of a descheduled task from its kernel stack.
pub fn read_tcb(m: &Machine, task: usize) -> Option<TaskControlBlock> {
    let ksp = m
        .mem()
        .peek(kernel_symbol(kernel::KSP)? + 8 * task as u64, 8)?;
    let base = u64::from_le_bytes(ksp.try_into().ok()?);
    if base == 0 {
        return None;
    }
    let word = |off: u64| {
        m.mem()
            .peek(base + off, 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    };
    let mut saved_regs = Vec::new();
    for r in kernel::saved_regs() {
        saved_regs.push((r.to_string(), word(kernel::slot(r))?));
    }
    saved_regs.push(("sp".into(), word(kernel::OLD_SP_SLOT)?));
    let top = kernel::kstack_top(task);
    Some(TaskControlBlock {
        task,
        saved_regs,
        ip: word(kernel::RET_IP_SLOT)?,
        flags: word(kernel::MODE_SLOT)?,
        saved_taint: word(kernel::TAINT_SLOT)?,
        kernel_stack: top - kernel::KSTACK_SIZE..top,
    })
}

/// Address of a label in the kernel data section.
pub fn kernel_symbol(name: &str) -> Option<u64> {
    // data layout is fixed by kernel::source
    let off = match name {
        kernel::CUR => 0,
        kernel::ALIVE => 8,
        kernel::KSP => 24,
        kernel::KSTOP => 40,
        kernel::NMI_COUNT => 56,
        _ => return None,
    };
    Some(kernel::KDATA + off)
}

/// Index of the task currently running (kernel mode).
pub fn current_task(m: &Machine) -> Option<usize> {
    let b = m.mem().peek(kernel_symbol(kernel::CUR)?, 8)?;
    Some(u64::from_le_bytes(b.try_into().ok()?) as usize)
}
