mod common;

use common::*;
use ntsim::asm::assemble;
use ntsim::attack::{AttackScenario, Variant};
use ntsim::config::SimConfig;
use ntsim::cpu::{Interrupt, Machine, SpecKind, WindowEnd, CR_NMI_VEC};
use ntsim::isa::Opcode;
use ntsim::os::{boot, LoadOptions};
use ntsim::state::{IA32_SHADOW_TAINT, TAINT_MASK};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn off() -> SimConfig {
    SimConfig {
        context_enabled: false,
        ..SimConfig::default()
    }
}

fn word(m: &Machine, addr: u64) -> u64 {
    u64::from_le_bytes(m.mem().peek(addr, 8).unwrap().try_into().unwrap())
}

#[test]
fn taint_rules() {
    let src = "
.text
_start:
    mov r2, [key]
    mov r1, 1
    add r1, r2
    mov r3, [key]
    xor r3, r3
    mov r4, [key]
    rep xor r4, r4
    mov r5, [key]
    mov [buf], r5
    mov r6, 7
    mov [key + 8], r6
    mov r7, [key + 8]
    mov r8, [key]
    mov.d r8, r6
    mov r9, [key]
    mov.b r9, r6
    cmp r2, r1
    halt
.data
buf: .quad 0
nospec key: .byte 0x41, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0
";
    let m = run_bare(src, SimConfig::default());
    let t = |r: &str| m.core.taint.is_tainted(reg(r));
    assert!(t("r2") && t("r1"));
    assert_eq!(m.core.reg(reg("r1")), 0x42);
    assert!(!t("r3"));
    assert!(t("r4"));
    assert_eq!(m.core.reg(reg("r4")), 0);
    assert!(!t("r5"));
    let buf = assemble(src).unwrap();
    let buf = buf.section(".data").unwrap().vaddr;
    assert_eq!(word(&m, buf), 0x41);
    assert!(!t("r6") && !t("r7"));
    assert!(!t("r8"), "32-bit write replaces the register");
    assert!(t("r9"), "8-bit write keeps the old taint");
    assert_eq!(m.core.taint.bitmap() & !TAINT_MASK, 0);
}

#[test]
fn context_off_never_taints() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let prog = gen_program(&mut rng, 40);
        let (mut m, _) = bare(&program_source(&prog, &[0xaa; 128]), off());
        while m.halted().is_none() {
            m.step().unwrap();
            assert_eq!(m.core.taint.bitmap(), 0);
        }
        assert_eq!(m.stats().taint_set_events, 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn taint_matches_dataflow_oracle(seed: u64, secret in proptest::collection::vec(any::<u8>(), 128)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prog = gen_program(&mut rng, 50);
        let m = run_program(&prog, &secret, SimConfig::default(), None);
        prop_assert_eq!(m.core.taint.bitmap(), oracle(&prog, true), "{:#?}", prog);
        let evicted = run_program(&prog, &secret, SimConfig::default(), Some(&mut rng));
        let want = oracle(&prog, true);
        prop_assert_eq!(evicted.core.taint.bitmap() & want, want);
    }

    #[test]
    fn window_bound(w in 0u64..100) {
        let sled = "    nop\n".repeat(80);
        let src = format!(".text\n_start:\n    xor r0, r0\n    je far\n{sled}far:\n    halt\n");
        let cfg = SimConfig { window: w, ..SimConfig::default() };
        let (mut m, _) = bare(&src, cfg);
        m.record_windows();
        m.run_to_halt().unwrap();
        if w == 0 {
            prop_assert!(m.windows().is_empty());
        } else {
            prop_assert_eq!(m.windows().len(), 1);
            let win = &m.windows()[0];
            prop_assert_eq!(win.kind, SpecKind::Conditional);
            prop_assert_eq!(win.uops, w.min(80));
            prop_assert!(m.stats().transient_uops <= w);
        }
    }

    #[test]
    fn transient_non_interference(a: u8, b: u8) {
        let run = |s: u8, cfg: SimConfig| {
            let src = format!("
.text
_start:
    mov r6, 5
train:
    xor r7, r7
    mov r8, public
    call victim
    sub r6, 1
    jne train
    xor r2, r2
    mov.b r2, [secret]
    mov r7, 100
    mov r8, secret + 8
    clflush [probe]
    call victim
    halt
victim:
    cmp r7, 16
    jae out
    mov r4, r2
    shl r4, 12
    mov.b r3, [probe + r4]
    mov.b r5, [r8]
    shl r5, 12
    mov.b r3, [probe + r5]
out:
    ret
.data
probe: .zero 0x100000
public: .quad 0
nospec secret: .byte {s}, 0, 0, 0, 0, 0, 0, 0, {s}
");
            let m = run_bare(&src, cfg);
            m.mem().cache.observable_state()
        };
        prop_assert_eq!(run(a, SimConfig::default()), run(b, SimConfig::default()));
        if a != b {
            prop_assert_ne!(run(a, off()), run(b, off()));
        }
    }
}

/// Run two machines in lockstep, one without speculation, and require
/// identical architectural state after every step.
fn lockstep(src: &str, opts: LoadOptions, cfg: SimConfig) -> Machine {
    let img = assemble(src).unwrap();
    let (mut spec, prog) = boot(cfg.clone(), &img, &opts).unwrap();
    let (mut plain, _) = boot(SimConfig { window: 0, ..cfg }, &img, &opts).unwrap();
    spec.record_windows();
    while spec.halted().is_none() {
        spec.step().unwrap();
        plain.step().unwrap();
        assert_eq!(spec.core, plain.core);
        assert_eq!(spec.halted(), plain.halted());
    }
    for s in &prog.sections {
        assert_eq!(
            spec.mem().peek(s.vaddr, s.len as usize),
            plain.mem().peek(s.vaddr, s.len as usize),
            "{}",
            s.name
        );
    }
    assert_eq!(spec.mem().device, plain.mem().device);
    spec
}

#[test]
fn speculation_is_architecturally_invisible() {
    for cfg in [SimConfig::default(), off()] {
        for v in Variant::ALL {
            let s = AttackScenario::new(v, b"KEY");
            let m = lockstep(&s.source(1), s.load_options(), cfg.clone());
            assert!(!m.windows().is_empty(), "{v}");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..30 {
        let prog = gen_program(&mut rng, 50);
        lockstep(
            &program_source(&prog, &[9; 128]),
            LoadOptions::default(),
            SimConfig::default(),
        );
    }
}

#[test]
fn lfence_ends_window_and_costs_stall() {
    let src = ".text\n_start:\n    xor r0, r0\n    je far\n    nop\n    nop\n    lfence\n    nop\nfar:\n    lfence\n    halt\n";
    let (mut m, _) = bare(src, SimConfig::default());
    m.record_windows();
    m.step().unwrap();
    m.step().unwrap();
    let before = (m.core.clone(), m.cycles());
    m.step().unwrap();
    assert_eq!(m.cycles() - before.1, 1 + m.config().lfence_stall);
    let mut after = m.core.clone();
    after.rf.ip = before.0.rf.ip;
    assert_eq!(after, before.0);
    let w = &m.windows()[0];
    assert_eq!((w.uops, w.end), (2, WindowEnd::Serializing(Opcode::Lfence)));
}

fn nested_calls(n: u64) -> Machine {
    let src = format!(
        ".text\n_start:\n    mov r1, {n}\n    call f\n    halt\nf:\n    sub r1, 1\n    je leaf\n    call f\nleaf:\n    ret\n"
    );
    let (mut m, _) = bare(&src, SimConfig::default());
    m.record_windows();
    m.run_to_halt().unwrap();
    m
}

#[test]
fn rsb_overflow() {
    let returns = |m: &Machine| {
        m.windows()
            .iter()
            .filter(|w| w.kind == SpecKind::Return)
            .count()
    };
    assert_eq!(returns(&nested_calls(16)), 0);
    let m = nested_calls(17);
    assert_eq!(returns(&m), 1);
    let w = m
        .windows()
        .iter()
        .find(|w| w.kind == SpecKind::Return)
        .unwrap();
    // the unmatched return falls back to the BTB, which predicts the inner site
    assert_eq!(w.start_ip, w.branch_ip);
}

#[test]
fn rsb_predicts_original_return_site() {
    let s = AttackScenario::new(Variant::Rsb, b"K");
    let img = assemble(&s.source(0)).unwrap();
    let (mut m, _) = boot(SimConfig::default(), &img, &LoadOptions::default()).unwrap();
    m.record_windows();
    m.run_to_halt().unwrap();
    let w = m
        .windows()
        .iter()
        .find(|w| w.kind == SpecKind::Return)
        .unwrap();
    let text = img.section(".text").unwrap();
    let call = ntsim::asm::disassemble(&text.bytes, text.vaddr)
        .into_iter()
        .find(|(_, i)| i.as_ref().is_ok_and(|i| i.op == Opcode::Call))
        .unwrap()
        .0;
    assert_eq!(w.start_ip, call + 16);
}

#[test]
fn cold_btb_does_not_speculate() {
    let src = "
.text
_start:
    mov r8, a
    call r8
    mov r8, b
    call r8
    halt
a:
    ret
b:
    ret
";
    let (mut m, _) = bare(src, SimConfig::default());
    m.record_windows();
    m.run_to_halt().unwrap();
    let indirect: Vec<_> = m
        .windows()
        .iter()
        .filter(|w| w.kind == SpecKind::Indirect)
        .collect();
    // first call: cold, second call from another site: also cold
    assert!(indirect.is_empty());

    let src = ".text\n_start:\n    mov r9, 2\nloop:\n    call [fptr]\n    mov r8, b\n    mov [fptr], r8\n    sub r9, 1\n    jne loop\n    halt\na:\n    ret\nb:\n    ret\n.data\nfptr: .quad a\n";
    let (mut m, _) = bare(src, SimConfig::default());
    m.record_windows();
    m.run_to_halt().unwrap();
    let w: Vec<_> = m
        .windows()
        .iter()
        .filter(|w| w.kind == SpecKind::Indirect)
        .collect();
    assert_eq!(w.len(), 1);
    let a = assemble(src).unwrap().section(".text").unwrap().vaddr + 7 * 16;
    assert_eq!(w[0].start_ip, a);
}

#[test]
fn store_bypass_reads_stale_value() {
    let src = "
.text
_start:
    mov r1, 'O'
    mov [x], r1
    mov r8, x
    mov [ptr], r8
    clflush [ptr]
    mov r8, [ptr]
    mov r9, 'N'
    mov [r8], r9
    mov r2, [x]
    halt
.data
x: .quad 0
ptr: .quad 0
";
    let (mut m, prog) = bare(src, SimConfig::default());
    m.record_windows();
    m.run_to_halt().unwrap();
    let x = prog.symbol_section(".data").unwrap().vaddr;
    let w = m
        .windows()
        .iter()
        .find(|w| w.kind == SpecKind::StoreBypass)
        .expect("bypass window");
    assert_eq!(w.loads[0], (x, 'O' as u64, false));
    assert_eq!(m.core.reg(reg("r2")), 'N' as u64);
    assert_eq!(m.stats().stl_bypasses, 1);
}

#[test]
fn shadow_copy_on_interrupt_entry() {
    let src = "
.text
_start:
    mov r2, handler
    crctl 4, r2
    xor r2, r2
    mov r1, [key]
spin:
    jmp spin
handler:
    mov r1, 0x10a1
    rdmsr
    halt
nospec key: 8
";
    let (mut m, _) = bare(src, SimConfig::default());
    m.run(6).unwrap();
    assert_eq!(m.core.taint.bitmap(), 0b10);
    assert_ne!(m.sys.cr[CR_NMI_VEC as usize], 0);
    m.inject(Interrupt::Nmi);
    m.run_to_halt().unwrap();
    assert_eq!(m.core.reg(reg("r0")), 0b10);
    assert_eq!(m.core.rdmsr(IA32_SHADOW_TAINT).unwrap(), 0b10);
}
