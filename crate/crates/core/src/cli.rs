//! Command-line front end.

use std::error::Error;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ntsim::asm::image::MAGIC;
use ntsim::asm::{
    assemble_unit, listing, split_stacks, stack_report, AsmUnit, BinaryImage, StackReport,
};
use ntsim::attack::{self, AttackScenario, Barrier, Variant, DEFAULT_ROUNDS, REPORT_VERSION};
use ntsim::config::SimConfig;
use ntsim::cpu::HaltReason;
use ntsim::memory::NtEncoding;
use ntsim::os::{boot, LoadOptions, Mode};
use ntsim::stats::RunStats;
use ntsim::trace::write_jsonl;

pub const EXIT_OK: u8 = 0;
pub const EXIT_VIOLATED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

type Result<T> = std::result::Result<T, Box<dyn Error>>;

#[derive(Debug, Parser)]
#[command(
    name = "ntsim",
    version,
    about = "Speculative-execution simulator with non-transient memory"
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Command,
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Encoding {
    Reserved,
    Ignored,
    Pat,
}

impl From<Encoding> for NtEncoding {
    fn from(e: Encoding) -> Self {
        match e {
            Encoding::Reserved => NtEncoding::ReservedBit51,
            Encoding::Ignored => NtEncoding::IgnoredBit11WithCR,
            Encoding::Pat => NtEncoding::PatMemoryType,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BarrierArg {
    None,
    Lfence,
    Misplaced,
}

#[derive(Debug, Args)]
struct SimArgs {
    /// JSON configuration to start from.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    context: Option<OnOff>,
    #[arg(long, global = true, value_enum)]
    nt_encoding: Option<Encoding>,
    /// Map secrets uncacheable instead of non-transient (implies --context off).
    #[arg(long, global = true)]
    light: bool,
    /// Speculation window in µops.
    #[arg(long, global = true)]
    window: Option<u64>,
    #[arg(long, global = true)]
    hit: Option<u64>,
    #[arg(long, global = true)]
    miss: Option<u64>,
    #[arg(long, global = true)]
    threshold: Option<u64>,
    #[arg(long, global = true)]
    max_cycles: Option<u64>,
    #[arg(long, global = true, hide = true)]
    sabotage_taint: bool,
}

impl SimArgs {
    fn config(&self) -> Result<SimConfig> {
        let mut c = match &self.config {
            Some(p) => serde_json::from_str(
                &fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?,
            )?,
            None => SimConfig::default(),
        };
        if self.light {
            c.light_mode = true;
            c.context_enabled = false;
        }
        if let Some(v) = self.context {
            c.context_enabled = v == OnOff::On;
        }
        if let Some(e) = self.nt_encoding {
            c.nt_encoding = e.into();
        }
        if let Some(w) = self.window {
            c.window = w;
        }
        if let Some(v) = self.hit {
            c.latencies.hit = v;
        }
        if let Some(v) = self.miss {
            c.latencies.miss = v;
        }
        if let Some(v) = self.threshold {
            c.latencies.threshold = v;
        }
        if let Some(v) = self.max_cycles {
            c.max_cycles = v;
        }
        if self.sabotage_taint {
            c.taint_propagation = false;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Assemble a source file into a CTXB image.
    Asm {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Move stack locals to the unprotected stack and print the result.
    Split {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// List the sections and code of a CTXB image.
    Dump { input: PathBuf },
    /// Run a source file or image.
    Run {
        input: PathBuf,
        #[command(flatten)]
        load: LoadArgs,
        /// Apply stack splitting before assembling (source input only).
        #[arg(long)]
        split: bool,
        /// Write the execution trace as JSON lines.
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
    },
    /// Run one attack scenario and report what the receiver recovered.
    Attack {
        variant: Variant,
        #[arg(long, value_enum, default_value_t = BarrierArg::None)]
        barrier: BarrierArg,
        #[arg(long, default_value = "SECRET")]
        secret: String,
        #[arg(long, default_value_t = DEFAULT_ROUNDS)]
        rounds: usize,
    },
    /// Every attack with the defense off and on under each encoding.
    Matrix {
        #[arg(long, default_value = "SECRET")]
        secret: String,
        #[arg(long, default_value_t = DEFAULT_ROUNDS)]
        rounds: usize,
    },
    /// Stack peaks of a program with and without stack splitting.
    StackReport {
        input: PathBuf,
        #[command(flatten)]
        load: LoadArgs,
        /// Trace of the split run, as JSON lines.
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
    },
    /// Bounds-check bypass against no defense, a barrier, the
    /// non-transient mapping and the uncacheable mode.
    Compare {
        #[arg(long, default_value = "SECRET")]
        secret: String,
        #[arg(long, default_value_t = DEFAULT_ROUNDS)]
        rounds: usize,
    },
}

#[derive(Debug, Args)]
struct LoadArgs {
    /// Boot the guest kernel and run the program in user mode.
    #[arg(long)]
    kernel: bool,
    /// Kernel that does not save and restore the taint register.
    #[arg(long, requires = "kernel")]
    taint_unaware: bool,
}

impl LoadArgs {
    fn options(&self) -> LoadOptions {
        LoadOptions {
            mode: if self.kernel {
                Mode::Kernel
            } else {
                Mode::Bare
            },
            taint_aware: !self.taint_unaware,
            kernel_secret: None,
        }
    }
}

#[derive(Debug, Serialize)]
struct RunReport {
    version: u32,
    mode: Mode,
    taint_aware: bool,
    halt: HaltReason,
    log: String,
    stats: RunStats,
    config: SimConfig,
}

#[derive(Debug, Serialize)]
struct StackComparison {
    version: u32,
    plain: StackReport,
    split: StackReport,
    /// Same halt reason and host log with and without splitting.
    equivalent: bool,
    config: SimConfig,
}

pub fn run(cli: Cli) -> Result<u8> {
    let json = cli.format == Format::Json;
    match cli.cmd {
        Command::Asm { input, output } => {
            let img = assemble_unit(&parse_source(&input)?)?;
            let dest = output.unwrap_or_else(|| input.with_extension("ctxb"));
            fs::write(&dest, img.to_bytes()).map_err(|e| format!("{}: {e}", dest.display()))?;
            if json {
                out(&format!(
                    "{}\n",
                    serde_json::json!({ "output": dest, "sections": img.sections.len() })
                ))?;
            }
            Ok(EXIT_OK)
        }
        Command::Split { input, output } => {
            let text = split_stacks(&parse_source(&input)?)?.to_source();
            match output {
                Some(p) => fs::write(&p, text).map_err(|e| format!("{}: {e}", p.display()))?,
                None => out(&text)?,
            }
            Ok(EXIT_OK)
        }
        Command::Dump { input } => {
            let img = load_image(&input, false)?;
            emit(json, &img, listing)?;
            Ok(EXIT_OK)
        }
        Command::Run {
            input,
            load,
            split,
            trace,
        } => {
            let config = cli.sim.config()?;
            let img = load_image(&input, split)?;
            let opts = load.options();
            let (mut m, _) = boot(config.clone(), &img, &opts)?;
            if trace.is_some() {
                m.enable_trace();
            }
            let halt = m.run_to_halt()?;
            if let Some(p) = trace {
                write_trace(&p, &m.take_trace())?;
            }
            let report = RunReport {
                version: REPORT_VERSION,
                mode: opts.mode,
                taint_aware: opts.taint_aware,
                halt,
                log: String::from_utf8_lossy(&m.mem().device.log).into_owned(),
                stats: m.stats(),
                config,
            };
            emit(json, &report, run_text)?;
            Ok(
                if matches!(halt, HaltReason::Halt | HaltReason::Exit { code: 0 }) {
                    EXIT_OK
                } else {
                    EXIT_VIOLATED
                },
            )
        }
        Command::Attack {
            variant,
            barrier,
            secret,
            rounds,
        } => {
            let config = cli.sim.config()?;
            let barrier = match barrier {
                BarrierArg::None => Barrier::None,
                BarrierArg::Lfence => Barrier::Lfence,
                BarrierArg::Misplaced => Barrier::Misplaced,
            };
            let s = AttackScenario::new(variant, secret.as_bytes()).with_barrier(barrier);
            let report = attack::run_attack(&s, &config, rounds)?;
            emit(json, &report, |r| {
                let hex = |b: &[u8]| b.iter().map(|v| format!("{v:02x}")).collect::<String>();
                format!(
                    "variant    {}\ncontext    {}\nencoding   {}\nsecret     {}\nrecovered  {}\naccuracy   {:.3}\n",
                    r.variant,
                    if r.config.context_enabled { "on" } else if r.config.light_mode { "light" } else { "off" },
                    r.config.nt_encoding,
                    hex(&r.secret),
                    hex(&r.recovered),
                    r.accuracy
                )
            })?;
            Ok(EXIT_OK)
        }
        Command::Matrix { secret, rounds } => {
            let config = cli.sim.config()?;
            let m = attack::sweep_matrix(&config, secret.as_bytes(), rounds)?;
            emit(json, &m, |m| m.table())?;
            let failing: Vec<String> = m.failing().map(|c| c.key()).collect();
            if !failing.is_empty() {
                eprintln!("failing cells: {}", failing.join(", "));
            }
            Ok(if m.pass { EXIT_OK } else { EXIT_VIOLATED })
        }
        Command::StackReport { input, load, trace } => {
            let config = cli.sim.config()?;
            let unit = parse_source(&input)?;
            let opts = load.options();
            let plain = traced_run(&config, &assemble_unit(&unit)?, &opts, None)?;
            let split = traced_run(
                &config,
                &assemble_unit(&split_stacks(&unit)?)?,
                &opts,
                trace.as_deref(),
            )?;
            let report = StackComparison {
                version: REPORT_VERSION,
                plain: plain.1,
                split: split.1,
                equivalent: plain.0 == split.0,
                config,
            };
            emit(json, &report, |r| {
                let mut s = format!("{:<8} {:>10} {:>12}\n", "", "nt_peak", "unprotected");
                for (name, x) in [("plain", &r.plain), ("split", &r.split)] {
                    let _ = writeln!(s, "{name:<8} {:>10} {:>12}", x.nt_peak, x.unprotected_peak);
                }
                let _ = writeln!(s, "equivalent: {}", if r.equivalent { "yes" } else { "NO" });
                s
            })?;
            Ok(if report.equivalent {
                EXIT_OK
            } else {
                EXIT_VIOLATED
            })
        }
        Command::Compare { secret, rounds } => {
            let config = cli.sim.config()?;
            let f = attack::compare_defenses(&config, secret.as_bytes(), rounds)?;
            emit(json, &f, |f| {
                let mut s = format!("{:<20} {:>6} {:>7}\n", "column", "expect", "leaked");
                for c in &f.columns {
                    let yn = |b| if b { "yes" } else { "no" };
                    let _ = writeln!(
                        s,
                        "{:<20} {:>6} {:>7}",
                        c.name,
                        yn(c.expect_leak),
                        yn(c.leaked)
                    );
                }
                let _ = writeln!(
                    s,
                    "uncacheable mode register gap: {}",
                    if f.light_register_gap {
                        "leaks"
                    } else {
                        "none"
                    }
                );
                s
            })?;
            Ok(if f.pass { EXIT_OK } else { EXIT_VIOLATED })
        }
    }
}

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce(&T) -> String) -> Result<()> {
    if json {
        out(&(serde_json::to_string_pretty(value)? + "\n"))
    } else {
        out(&text(value))
    }
}

/// A reader that went away (`| head`) is not an error.
fn out(s: &str) -> Result<()> {
    let mut w = std::io::stdout().lock();
    match w.write_all(s.as_bytes()).and_then(|_| w.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn run_text(r: &RunReport) -> String {
    let mut s = format!("halt: {:?}\n", r.halt);
    if !r.log.is_empty() {
        let _ = writeln!(s, "log: {}", r.log.escape_debug());
    }
    if let Ok(serde_json::Value::Object(stats)) = serde_json::to_value(&r.stats) {
        for (k, v) in stats {
            let _ = writeln!(s, "{k:<22} {v}");
        }
    }
    s
}

fn parse_source(path: &Path) -> Result<AsmUnit> {
    let src = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(AsmUnit::parse(&src)?)
}

/// Images are recognized by their magic; anything else is assembled.
fn load_image(path: &Path, split: bool) -> Result<BinaryImage> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if bytes.starts_with(MAGIC) {
        if split {
            return Err("--split needs assembly source, not an image".into());
        }
        let img = BinaryImage::from_bytes(&bytes)?;
        img.validate()?;
        return Ok(img);
    }
    let src = String::from_utf8(bytes)
        .map_err(|_| format!("{}: neither an image nor UTF-8 source", path.display()))?;
    let unit = AsmUnit::parse(&src)?;
    let unit = if split { split_stacks(&unit)? } else { unit };
    Ok(assemble_unit(&unit)?)
}

fn traced_run(
    config: &SimConfig,
    img: &BinaryImage,
    opts: &LoadOptions,
    trace_out: Option<&Path>,
) -> Result<((HaltReason, Vec<u8>), StackReport)> {
    let (mut m, prog) = boot(config.clone(), img, opts)?;
    m.enable_trace();
    let halt = m.run_to_halt()?;
    let trace = m.take_trace();
    if let Some(p) = trace_out {
        write_trace(p, &trace)?;
    }
    Ok((
        (halt, m.mem().device.log.clone()),
        stack_report(&trace, &prog),
    ))
}

fn write_trace(path: &Path, records: &[ntsim::trace::TraceRecord]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut w = BufWriter::new(f);
    write_jsonl(&mut w, records)?;
    w.flush()?;
    Ok(())
}
