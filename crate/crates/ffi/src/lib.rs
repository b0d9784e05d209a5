//! C interface to the simulator.
//!
//! Handles are opaque. Every fallible call returns an `NtsimStatus`; on
//! failure `ntsim_last_error()` describes what went wrong on the calling
//! thread. Strings returned through `char **` out-parameters are owned by
//! the caller and must be released with `ntsim_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use ntsim::asm::{assemble, BinaryImage};
use ntsim::attack::{run_attack, AttackScenario, Variant};
use ntsim::config::SimConfig;
use ntsim::cpu::{HaltReason, Machine};
use ntsim::os::{boot, LoadOptions, Mode};
use ntsim::state::Reg;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NtsimStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    AssemblyError = 4,
    ImageError = 5,
    LoadError = 6,
    SimulationError = 7,
    NotLoaded = 8,
    InvalidArgument = 9,
    AttackError = 10,
    Panic = 11,
}

/// Simulator instance. Create with `ntsim_machine_new`.
pub struct NtsimMachine {
    config: SimConfig,
    machine: Option<Machine>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(NtsimStatus, String);

impl Failure {
    fn new(status: NtsimStatus, msg: impl ToString) -> Failure {
        Failure(status, msg.to_string())
    }
}

type FfiResult<T = ()> = Result<T, Failure>;

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> FfiResult) -> NtsimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            NtsimStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            NtsimStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure::new(
            NtsimStatus::NullArgument,
            format!("{what} is null"),
        ));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(NtsimStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a>(m: *mut NtsimMachine) -> FfiResult<&'a mut NtsimMachine> {
    m.as_mut()
        .ok_or_else(|| Failure::new(NtsimStatus::NullArgument, "machine is null"))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> FfiResult {
    if out.is_null() {
        return Err(Failure::new(
            NtsimStatus::NullArgument,
            "output pointer is null",
        ));
    }
    let c = CString::new(s)
        .map_err(|_| Failure::new(NtsimStatus::InvalidArgument, "string contains NUL"))?;
    *out = c.into_raw();
    Ok(())
}

fn parse_config(json: Option<&str>) -> FfiResult<SimConfig> {
    let c = match json {
        Some(s) => {
            serde_json::from_str(s).map_err(|e| Failure::new(NtsimStatus::InvalidConfig, e))?
        }
        None => SimConfig::default(),
    };
    c.validate()
        .map_err(|e| Failure::new(NtsimStatus::InvalidConfig, e))?;
    Ok(c)
}

fn load(m: &mut NtsimMachine, img: &BinaryImage, kernel: bool, taint_aware: bool) -> FfiResult {
    let opts = LoadOptions {
        mode: if kernel { Mode::Kernel } else { Mode::Bare },
        taint_aware,
        kernel_secret: None,
    };
    let (machine, _) =
        boot(m.config.clone(), img, &opts).map_err(|e| Failure::new(NtsimStatus::LoadError, e))?;
    m.machine = Some(machine);
    Ok(())
}

fn loaded(m: &mut NtsimMachine) -> FfiResult<&mut Machine> {
    m.machine
        .as_mut()
        .ok_or_else(|| Failure::new(NtsimStatus::NotLoaded, "no program loaded"))
}

/// Static version string.
#[no_mangle]
pub extern "C" fn ntsim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread. Empty after a
/// successful call. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn ntsim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn ntsim_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Create a machine. `config_json` may be null for the defaults.
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ntsim_machine_new(
    config_json: *const c_char,
    out: *mut *mut NtsimMachine,
) -> NtsimStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::new(
                NtsimStatus::NullArgument,
                "output pointer is null",
            ));
        }
        let json = if config_json.is_null() {
            None
        } else {
            Some(str_arg(config_json, "config")?)
        };
        let config = parse_config(json)?;
        *out = Box::into_raw(Box::new(NtsimMachine {
            config,
            machine: None,
        }));
        Ok(())
    })
}

/// # Safety
/// `m` must come from `ntsim_machine_new` or be null; it is invalid
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn ntsim_machine_free(m: *mut NtsimMachine) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Assemble `source` and load it, replacing any previous program.
///
/// # Safety
/// `m` must be a live handle and `source` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ntsim_machine_load_asm(
    m: *mut NtsimMachine,
    source: *const c_char,
    kernel: bool,
    taint_aware: bool,
) -> NtsimStatus {
    guard(|| {
        let m = handle(m)?;
        let img = assemble(str_arg(source, "source")?)
            .map_err(|e| Failure::new(NtsimStatus::AssemblyError, e))?;
        load(m, &img, kernel, taint_aware)
    })
}

/// Load a CTXB image, replacing any previous program.
///
/// # Safety
/// `m` must be a live handle and `bytes` must point to `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn ntsim_machine_load_image(
    m: *mut NtsimMachine,
    bytes: *const u8,
    len: usize,
    kernel: bool,
    taint_aware: bool,
) -> NtsimStatus {
    guard(|| {
        let m = handle(m)?;
        if bytes.is_null() {
            return Err(Failure::new(NtsimStatus::NullArgument, "image is null"));
        }
        let data = std::slice::from_raw_parts(bytes, len);
        let img =
            BinaryImage::from_bytes(data).map_err(|e| Failure::new(NtsimStatus::ImageError, e))?;
        img.validate()
            .map_err(|e| Failure::new(NtsimStatus::ImageError, e))?;
        load(m, &img, kernel, taint_aware)
    })
}

/// Run at most `max_steps` steps (0 for no limit besides the cycle budget).
/// `halted` receives whether the machine has stopped.
///
/// # Safety
/// `m` must be a live handle; `halted` must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn ntsim_machine_run(
    m: *mut NtsimMachine,
    max_steps: u64,
    halted: *mut bool,
) -> NtsimStatus {
    guard(|| {
        let machine = loaded(handle(m)?)?;
        let sim = |e| Failure::new(NtsimStatus::SimulationError, e);
        let done = if max_steps == 0 {
            machine.run_to_halt().map_err(sim)?;
            true
        } else {
            machine.run(max_steps).map_err(sim)?.is_some()
        };
        if !halted.is_null() {
            *halted = done;
        }
        Ok(())
    })
}

/// Run statistics as JSON.
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ntsim_machine_stats_json(
    m: *mut NtsimMachine,
    out: *mut *mut c_char,
) -> NtsimStatus {
    guard(|| {
        let machine = loaded(handle(m)?)?;
        let s = serde_json::to_string(&machine.stats())
            .map_err(|e| Failure::new(NtsimStatus::SimulationError, e))?;
        put_string(out, s)
    })
}

/// Halt reason as JSON, or `null` while running.
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ntsim_machine_halt_json(
    m: *mut NtsimMachine,
    out: *mut *mut c_char,
) -> NtsimStatus {
    guard(|| {
        let machine = loaded(handle(m)?)?;
        let halt: Option<HaltReason> = machine.halted();
        let s = serde_json::to_string(&halt)
            .map_err(|e| Failure::new(NtsimStatus::SimulationError, e))?;
        put_string(out, s)
    })
}

/// Bytes the guest wrote to the host log, lossily decoded.
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ntsim_machine_log(
    m: *mut NtsimMachine,
    out: *mut *mut c_char,
) -> NtsimStatus {
    guard(|| {
        let machine = loaded(handle(m)?)?;
        let log = String::from_utf8_lossy(&machine.mem().device.log).replace('\0', "\u{fffd}");
        put_string(out, log)
    })
}

/// Architectural value and taint of register `name` (`r0`, `sp`, `v3`, ...).
///
/// # Safety
/// `m` must be a live handle, `name` a NUL-terminated string; `value` and
/// `tainted` must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn ntsim_machine_reg(
    m: *mut NtsimMachine,
    name: *const c_char,
    value: *mut u64,
    tainted: *mut bool,
) -> NtsimStatus {
    guard(|| {
        let machine = loaded(handle(m)?)?;
        let name = str_arg(name, "register name")?;
        let r: Reg = name.parse().map_err(|_| {
            Failure::new(
                NtsimStatus::InvalidArgument,
                format!("unknown register `{name}`"),
            )
        })?;
        if !value.is_null() {
            *value = machine.core.reg(r);
        }
        if !tainted.is_null() {
            *tainted = machine.core.taint.is_tainted(r);
        }
        Ok(())
    })
}

/// Run an attack scenario and return its leak report as JSON.
///
/// # Safety
/// `variant` must be a NUL-terminated string, `config_json` null or one,
/// `secret` must point to `secret_len` bytes, `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ntsim_attack_json(
    variant: *const c_char,
    config_json: *const c_char,
    secret: *const u8,
    secret_len: usize,
    rounds: usize,
    out: *mut *mut c_char,
) -> NtsimStatus {
    guard(|| {
        let v: Variant = str_arg(variant, "variant")?
            .parse()
            .map_err(|e: String| Failure::new(NtsimStatus::InvalidArgument, e))?;
        let json = if config_json.is_null() {
            None
        } else {
            Some(str_arg(config_json, "config")?)
        };
        let config = parse_config(json)?;
        let secret = if secret.is_null() {
            &[][..]
        } else {
            std::slice::from_raw_parts(secret, secret_len)
        };
        let report = run_attack(&AttackScenario::new(v, secret), &config, rounds)
            .map_err(|e| Failure::new(NtsimStatus::AttackError, e))?;
        let s = serde_json::to_string(&report)
            .map_err(|e| Failure::new(NtsimStatus::AttackError, e))?;
        put_string(out, s)
    })
}
