//! Guest kernel source, generated per configuration and assembled with the
//! regular toolchain.
//!
//! Every entry point builds the same frame on the kernel stack: the three
//! words pushed by interrupt entry, a taint slot, then all 55 registers
//! other than `sp`. The taint-aware variant saves `IA32_TAINT` into the slot
//! before touching any register and writes it back after `popall`; the
//! unaware variant relies on the shadow copy alone.

use std::fmt::Write;

use crate::cpu::{
    CR_FAULT_VEC, CR_KERNEL_SP, CR_NMI_VEC, CR_NT_ENABLE, CR_SYSCALL_VEC, CR_TIMER_PERIOD,
    CR_TIMER_VEC,
};
use crate::state::{Reg, IA32_PAT, IA32_TAINT, NUM_REGS};

pub const KTEXT: u64 = 0x7000_0000;
pub const KDATA: u64 = 0x7010_0000;
pub const KSECRET: u64 = 0x7020_0000;
pub const KSTACK_SIZE: u64 = 0x4000;
/// Bottom of task `i`'s kernel stack is `KSTACK_BASE + i * KSTACK_STRIDE`.
pub const KSTACK_BASE: u64 = 0x7030_0000;
pub const KSTACK_STRIDE: u64 = 0x1_0000;
pub const DEV_VADDR: u64 = 0x7fff_0000;

pub const SYS_EXIT: u64 = 0;
pub const SYS_LOG: u64 = 1;
pub const SYS_YIELD: u64 = 2;
pub const SYS_TIME: u64 = 3;
/// Exit code of a task killed by a fault.
pub const FAULT_EXIT: u64 = 139;
/// Returned in `r0` for an unknown syscall number.
pub const ENOSYS: i64 = -1;

/// Registers saved by `pushall`, in push order.
pub fn saved_regs() -> Vec<Reg> {
    Reg::all().filter(|&r| r != Reg::SP).collect()
}

pub const SAVED: usize = NUM_REGS - 1;
pub const FRAME_WORDS: usize = SAVED + 4;

/// Offset from the frame base of the saved copy of `r`.
pub fn slot(r: Reg) -> u64 {
    let k = saved_regs()
        .iter()
        .position(|&x| x == r)
        .expect("sp is not saved");
    8 * (SAVED - 1 - k) as u64
}

pub const TAINT_SLOT: u64 = 8 * SAVED as u64;
pub const RET_IP_SLOT: u64 = TAINT_SLOT + 8;
pub const MODE_SLOT: u64 = TAINT_SLOT + 16;
pub const OLD_SP_SLOT: u64 = TAINT_SLOT + 24;

pub fn kstack_top(task: usize) -> u64 {
    KSTACK_BASE + task as u64 * KSTACK_STRIDE + KSTACK_SIZE
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelParams {
    pub taint_aware: bool,
    /// Value written to `IA32_PAT` during boot, if any.
    pub pat: Option<u64>,
    pub cr_enable: bool,
    pub tasks: usize,
    pub timer_period: u64,
    /// Bytes of the kernel secret, warmed into the cache at boot.
    pub secret: Option<Vec<u8>>,
    pub user_entry: u64,
    pub user_sp: u64,
    pub user_usp: u64,
}

/// Labels in the kernel data section.
pub const CUR: &str = "k_cur";
pub const ALIVE: &str = "k_alive";
pub const KSP: &str = "k_ksp";
pub const KSTOP: &str = "k_kstop";
pub const NMI_COUNT: &str = "k_nmi_count";

pub fn source(p: &KernelParams) -> String {
    let mut s = String::new();
    let mut l = |line: &str| {
        s.push_str(line);
        s.push('\n');
    };

    l(&format!(".text {KTEXT:#x}"));
    l("_start:");
    if let Some(pat) = p.pat {
        l(&format!("    mov r0, {pat:#x}"));
        l(&format!("    mov r1, {IA32_PAT:#x}"));
        l("    wrmsr");
    }
    if p.cr_enable {
        l("    mov r2, 1");
        l(&format!("    crctl {CR_NT_ENABLE}, r2"));
    }
    for (cr, label) in [
        (CR_SYSCALL_VEC, "entry_syscall"),
        (CR_TIMER_VEC, "entry_timer"),
        (CR_NMI_VEC, "entry_nmi"),
        (CR_FAULT_VEC, "entry_fault"),
    ] {
        l(&format!("    mov r2, {label}"));
        l(&format!("    crctl {cr}, r2"));
    }
    l(&format!("    mov r2, {:#x}", kstack_top(0)));
    l(&format!("    crctl {CR_KERNEL_SP}, r2"));
    if p.tasks > 1 {
        l(&format!("    mov r2, {:#x}", p.timer_period));
        l(&format!("    crctl {CR_TIMER_PERIOD}, r2"));
    }
    if let Some(secret) = &p.secret {
        for off in (0..secret.len() as u64).step_by(64) {
            l(&format!("    mov.b r2, [{:#x}]", KSECRET + off));
        }
    }
    l(&format!("    mov sp, {:#x}", kstack_top(0)));
    l(&format!("    mov r2, {:#x}", p.user_sp));
    l("    push r2");
    l(&format!("    mov r2, {:#x}", crate::cpu::MODE_USER));
    l("    push r2");
    l(&format!("    mov r2, {:#x}", p.user_entry));
    l("    push r2");
    l(&format!("    mov usp, {:#x}", p.user_usp));
    for r in ["r0", "r1", "r2"] {
        l(&format!("    xor {r}, {r}"));
    }
    l("    iret");

    let entry = |s: &mut String, name: &str| {
        writeln!(s, "{name}:").unwrap();
        writeln!(s, "    sub sp, 8").unwrap();
        for r in saved_regs() {
            writeln!(s, "    push {r}").unwrap();
        }
        if p.taint_aware {
            writeln!(s, "    rep xor r1, r1").unwrap();
            writeln!(s, "    add r1, {IA32_TAINT:#x}").unwrap();
            writeln!(s, "    rdmsr").unwrap();
            writeln!(s, "    mov [sp + {TAINT_SLOT:#x}], r0").unwrap();
        }
    };
    let r0 = slot(Reg::gpr(0));
    let r1 = slot(Reg::gpr(1));

    entry(&mut s, "entry_syscall");
    let mut l = |line: &str| {
        s.push_str(line);
        s.push('\n');
    };
    l(&format!("    mov r0, [sp + {r0:#x}]"));
    l(&format!("    mov r1, [sp + {r1:#x}]"));
    for (n, target) in [
        (SYS_EXIT, "task_exit"),
        (SYS_LOG, "sys_log"),
        (SYS_YIELD, "do_switch"),
        (SYS_TIME, "sys_time"),
    ] {
        l(&format!("    cmp r0, {n}"));
        l(&format!("    je {target}"));
    }
    l(&format!("    mov r2, {ENOSYS}"));
    l(&format!("    mov [sp + {r0:#x}], r2"));
    l("    jmp restore");
    l("sys_log:");
    l(&format!("    mov.b [{DEV_VADDR:#x}], r1"));
    l("    jmp restore");
    l("sys_time:");
    l("    rdtime r2");
    l(&format!("    mov [sp + {r0:#x}], r2"));
    l("    jmp restore");

    entry(&mut s, "entry_fault");
    let mut l = |line: &str| {
        s.push_str(line);
        s.push('\n');
    };
    l(&format!("    mov r1, {FAULT_EXIT}"));
    // r1 holds the exit code
    l("task_exit:");
    l(&format!("    mov r2, [{CUR}]"));
    l("    xor r3, r3");
    l(&format!("    mov [{ALIVE} + r2*8], r3"));
    l("    xor r2, 1");
    l(&format!("    mov r3, [{ALIVE} + r2*8]"));
    l("    test r3, r3");
    l("    jne switch_to");
    l(&format!("    mov [{:#x}], r1", DEV_VADDR + 8));
    l("    halt");

    entry(&mut s, "entry_timer");
    let mut l = |line: &str| {
        s.push_str(line);
        s.push('\n');
    };
    l("do_switch:");
    l(&format!("    mov r2, [{CUR}]"));
    l(&format!("    mov [{KSP} + r2*8], sp"));
    l("    xor r2, 1");
    l(&format!("    mov r3, [{ALIVE} + r2*8]"));
    l("    test r3, r3");
    l("    je restore");
    l("switch_to:");
    l(&format!("    mov [{CUR}], r2"));
    l(&format!("    mov sp, [{KSP} + r2*8]"));
    l(&format!("    mov r3, [{KSTOP} + r2*8]"));
    l(&format!("    crctl {CR_KERNEL_SP}, r3"));
    l("    jmp restore");

    entry(&mut s, "entry_nmi");
    let mut l = |line: &str| {
        s.push_str(line);
        s.push('\n');
    };
    l(&format!("    mov r2, [{NMI_COUNT}]"));
    l("    add r2, 1");
    l(&format!("    mov [{NMI_COUNT}], r2"));

    l("restore:");
    for r in saved_regs().iter().rev() {
        l(&format!("    pop {r}"));
    }
    if p.taint_aware {
        l("    push r0");
        l("    push r1");
        l("    mov r0, [sp + 16]");
        l(&format!("    mov r1, {IA32_TAINT:#x}"));
        l("    wrmsr");
        l("    pop r1");
        l("    pop r0");
    }
    l("    add sp, 8");
    l("    iret");

    l(&format!(".data {KDATA:#x}"));
    l(&format!("{CUR}: .quad 0"));
    l(&format!("{ALIVE}: .quad 1, {}", (p.tasks > 1) as u8));
    l(&format!(
        "{KSP}: .quad 0, {:#x}",
        kstack_top(1) - 8 * FRAME_WORDS as u64
    ));
    l(&format!(
        "{KSTOP}: .quad {:#x}, {:#x}",
        kstack_top(0),
        kstack_top(1)
    ));
    l(&format!("{NMI_COUNT}: .quad 0"));
    if let Some(secret) = &p.secret {
        l(&format!(".secret {KSECRET:#x}"));
        let bytes: Vec<String> = secret.iter().map(|b| b.to_string()).collect();
        l(&format!("    .byte {}", bytes.join(", ")));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::assemble;

    fn params(aware: bool) -> KernelParams {
        KernelParams {
            taint_aware: aware,
            pat: Some(0),
            cr_enable: true,
            tasks: 2,
            timer_period: 10_000,
            secret: Some(b"KEY".to_vec()),
            user_entry: 0x40_0000,
            user_sp: 0x3000_0000,
            user_usp: 0x3800_0000,
        }
    }

    #[test]
    fn frame_layout() {
        assert_eq!(SAVED, 55);
        assert_eq!(slot(Reg::gpr(0)), 8 * 54);
        assert_eq!(slot(Reg::USP), 8 * 40);
        assert_eq!(TAINT_SLOT, 8 * 55);
    }

    #[test]
    fn both_variants_assemble() {
        let aware = assemble(&source(&params(true))).unwrap();
        let unaware = assemble(&source(&params(false))).unwrap();
        let n = |img: &crate::asm::BinaryImage| img.section(".text").unwrap().bytes.len() / 16;
        // four save instructions per entry point, seven restore instructions
        assert_eq!(n(&aware) - n(&unaware), 4 * 4 + 7);
        assert!(aware.section(".secret").unwrap().non_transient());
    }
}
