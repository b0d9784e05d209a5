use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ntsim::attack::{AttackScenario, Variant};
use ntsim::config::SimConfig;
use ntsim::memory::NtEncoding;
use ntsim::trace::read_jsonl;
use serde_json::Value;

const HELLO: &str = "
.text
_start:
    mov r0, 1
    mov r1, 104
    syscall
    mov r1, 105
    syscall
    mov r0, 0
    mov r1, 0
    syscall
";

const SECRET_SUM: &str = "
.text
_start:
    xor r0, r0
    mov.b r0, [secret]
    mov.b r1, [secret + 1]
    add r0, r1
    halt
.data
nospec secret: .byte 3, 4
";

fn ntsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ntsim"))
        .args(args)
        .output()
        .unwrap()
}

fn json(args: &[&str]) -> (i32, Value) {
    let mut a = args.to_vec();
    a.push("--format=json");
    let out = ntsim(&a);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let v = serde_json::from_str(&stdout).unwrap_or_else(|e| panic!("{e}: {stdout}"));
    (out.status.code().unwrap(), v)
}

fn write(dir: &Path, name: &str, src: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, src).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn run_hello_log() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "hello.s", HELLO);
    let (code, v) = json(&["run", &p, "--kernel"]);
    assert_eq!(code, 0);
    assert_eq!(v["log"], "hi");
    assert_eq!(v["halt"]["kind"], "exit");
    assert!(v["stats"]["syscall_count"].as_u64().unwrap() >= 1);
}

#[test]
fn context_off_sets_no_taint() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "sum.s", SECRET_SUM);
    let (code, v) = json(&["run", &p, "--context", "off"]);
    assert_eq!(code, 0);
    assert_eq!(v["stats"]["taint_set_events"], 0);
    let (_, v) = json(&["run", &p, "--context", "on"]);
    assert!(v["stats"]["taint_set_events"].as_u64().unwrap() > 0);
}

#[test]
fn pht_victim_run_reports_nt_loads() {
    let dir = tempfile::tempdir().unwrap();
    let src = AttackScenario::new(Variant::Pht, b"SECRET").source(0);
    let p = write(dir.path(), "pht.s", &src);
    let (code, v) = json(&["run", &p]);
    assert_eq!(code, 0);
    let stats = &v["stats"];
    assert!(stats["nt_loads"].as_u64().unwrap() > 0);
    let over = stats["overapprox_events"].as_u64().unwrap();
    assert!(over <= stats["taint_set_events"].as_u64().unwrap());
}

#[test]
fn attack_reports() {
    let (code, on) = json(&["attack", "pht", "--context=on"]);
    assert_eq!(code, 0);
    assert_eq!(on["accuracy"], 0.0);
    assert_eq!(on["recovered"], serde_json::json!([0, 0, 0, 0, 0, 0]));
    let (_, off) = json(&["attack", "pht", "--context=off"]);
    assert_eq!(off["accuracy"], 1.0);
    assert_eq!(off["recovered"], serde_json::json!(b"SECRET".to_vec()));
    let out = ntsim(&["attack", "spectre9"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn matrix_exit_codes() {
    let (code, v) = json(&["matrix", "--rounds", "1"]);
    assert_eq!(code, 0);
    assert_eq!(v["pass"], true);
    assert_eq!(v["cells"].as_array().unwrap().len(), 20);
    let out = ntsim(&["matrix", "--rounds", "1", "--sabotage-taint"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("pht/on/reserved"), "{err}");
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("FAIL"));
}

#[test]
fn reports_are_reproducible_and_echo_config() {
    let args = [
        "attack",
        "stl",
        "--nt-encoding",
        "pat",
        "--window",
        "40",
        "--hit",
        "5",
        "--miss",
        "120",
        "--threshold",
        "50",
    ];
    let a = ntsim(&[&args[..], &["--format", "json"]].concat());
    let b = ntsim(&[&args[..], &["--format", "json"]].concat());
    assert_eq!(a.stdout, b.stdout);
    let v: Value = serde_json::from_slice(&a.stdout).unwrap();
    let config: SimConfig = serde_json::from_value(v["config"].clone()).unwrap();
    let mut expect = SimConfig {
        nt_encoding: NtEncoding::PatMemoryType,
        window: 40,
        ..Default::default()
    };
    expect.latencies.hit = 5;
    expect.latencies.miss = 120;
    expect.latencies.threshold = 50;
    assert_eq!(config, expect);
}

#[test]
fn config_file_is_the_base() {
    let dir = tempfile::tempdir().unwrap();
    let base = SimConfig {
        window: 12,
        context_enabled: false,
        ..Default::default()
    };
    let p = write(dir.path(), "c.json", &serde_json::to_string(&base).unwrap());
    let (_, v) = json(&["attack", "btb", "--rounds", "1", "--config", &p]);
    let got: SimConfig = serde_json::from_value(v["config"].clone()).unwrap();
    assert_eq!(got, base);
    let (_, v) = json(&[
        "attack",
        "btb",
        "--rounds",
        "1",
        "--config",
        &p,
        "--context",
        "on",
    ]);
    assert_eq!(v["config"]["context_enabled"], true);
    assert_eq!(v["config"]["window"], 12);
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let hello = write(dir.path(), "hello.s", HELLO);
    let bad = write(dir.path(), "bad.s", ".text\n_start:\n    frobnicate r1\n");
    for args in [
        vec!["run", &hello, "--hit", "200", "--miss", "100"],
        vec!["run", "/nonexistent/x.s"],
        vec!["run", &bad],
        vec!["asm", &bad],
        vec!["run", &hello, "--light", "--context", "on"],
        vec!["run", &hello, "--taint-unaware"],
        vec!["attack", "pht", "--rounds", "0"],
    ] {
        let out = ntsim(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn asm_dump_run_image() {
    let dir = tempfile::tempdir().unwrap();
    let src = write(dir.path(), "sum.s", SECRET_SUM);
    let img = dir.path().join("sum.ctxb");
    assert_eq!(
        ntsim(&["asm", &src, "-o", img.to_str().unwrap()])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(&fs::read(&img).unwrap()[..4], b"CTXB");
    let dump = String::from_utf8(ntsim(&["dump", img.to_str().unwrap()]).stdout).unwrap();
    assert!(dump.contains("mov.b r0, [0x"), "{dump}");
    assert!(dump.contains(".secret"));
    let (code, from_img) = json(&["run", img.to_str().unwrap()]);
    assert_eq!(code, 0);
    let (_, from_src) = json(&["run", &src]);
    assert_eq!(from_img, from_src);
    // images cannot be split
    assert_eq!(
        ntsim(&["run", img.to_str().unwrap(), "--split"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn guest_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "f.s",
        ".text\n_start:\n    mov r1, [0x10]\n    halt\n",
    );
    let (code, v) = json(&["run", &p]);
    assert_eq!(code, 1);
    assert_eq!(v["halt"]["kind"], "fault");
    let p = write(
        dir.path(),
        "e.s",
        ".text\n_start:\n    mov r0, 0\n    mov r1, 3\n    syscall\n",
    );
    let (code, v) = json(&["run", &p, "--kernel"]);
    assert_eq!(code, 1);
    assert_eq!(v["halt"]["code"], 3);
}

const FRAMES: &str = "
.text
_start:
    mov r0, 5
    call work
    halt
.func work
    local buf, 200
    mov [%buf], r0
    mov [%buf + 192], r0
    mov r0, [%buf]
    add r0, [%buf + 192]
    ret
.endfunc
";

#[test]
fn split_and_stack_report() {
    let dir = tempfile::tempdir().unwrap();
    let src = write(dir.path(), "frames.s", FRAMES);
    let out = ntsim(&["split", &src]);
    assert_eq!(out.status.code(), Some(0));
    let split = String::from_utf8(out.stdout).unwrap();
    assert!(split.contains("usp"), "{split}");
    let split_path = write(dir.path(), "frames_split.s", &split);
    let (_, a) = json(&["run", &src]);
    let (_, b) = json(&["run", &split_path]);
    let (_, c) = json(&["run", &src, "--split"]);
    assert_eq!(a["halt"], b["halt"]);
    assert_eq!(b["stats"], c["stats"]);

    let trace = dir.path().join("t.jsonl");
    let (code, r) = json(&["stack-report", &src, "--trace", trace.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(r["equivalent"], true);
    assert!(r["split"]["nt_peak"].as_u64() < r["plain"]["nt_peak"].as_u64());
    assert_eq!(r["plain"]["unprotected_peak"], 0);
    assert!(r["split"]["unprotected_peak"].as_u64().unwrap() >= 200);
    let records = read_jsonl(std::io::BufReader::new(fs::File::open(&trace).unwrap())).unwrap();
    assert!(!records.is_empty());
}

#[test]
fn run_trace_matches_retired_count() {
    let dir = tempfile::tempdir().unwrap();
    let src = write(dir.path(), "sum.s", SECRET_SUM);
    let trace = dir.path().join("t.jsonl");
    let (_, v) = json(&["run", &src, "--trace", trace.to_str().unwrap()]);
    let records = read_jsonl(std::io::BufReader::new(fs::File::open(&trace).unwrap())).unwrap();
    let arch = records.iter().filter(|r| r.uops.is_none()).count() as u64;
    assert_eq!(arch, v["stats"]["retired_instructions"].as_u64().unwrap());
}

#[test]
fn compare_text_table() {
    let out = ntsim(&["compare", "--rounds", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let s = String::from_utf8(out.stdout).unwrap();
    for col in [
        "unprotected",
        "serializing-barrier",
        "non-transient",
        "uncacheable",
    ] {
        assert!(s.contains(col), "{s}");
    }
}
