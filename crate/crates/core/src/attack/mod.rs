//! Transient-execution attack scenarios and a Flush+Reload receiver.

mod programs;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asm::{assemble, DATA_BASE};
use crate::config::SimConfig;
use crate::cpu::{HaltReason, Machine};
use crate::error::{AsmError, LoadError, SimError};
use crate::memory::NtEncoding;
use crate::os::{boot, kernel::FAULT_EXIT, LoadOptions, Mode};

pub const REPORT_VERSION: u32 = 1;
pub const PROBE_BASE: u64 = DATA_BASE;
pub const PROBE_STRIDE: u64 = 4096;
pub const PROBE_LINES: usize = 256;
pub const DEFAULT_SECRET: &[u8] = b"SECRET";
pub const DEFAULT_ROUNDS: usize = 3;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Asm(#[from] AsmError),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("victim ended unexpectedly: {0:?}")]
    Guest(HaltReason),
    #[error("receiver threshold cannot separate hits from misses")]
    ReceiverMisconfigured,
    #[error("secret must not be empty")]
    EmptySecret,
    #[error("rounds must be at least 1")]
    NoRounds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Pht,
    Btb,
    Rsb,
    Stl,
    Md,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Pht,
        Variant::Btb,
        Variant::Rsb,
        Variant::Stl,
        Variant::Md,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Pht => "pht",
            Variant::Btb => "btb",
            Variant::Rsb => "rsb",
            Variant::Stl => "stl",
            Variant::Md => "md",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown variant `{s}` (expected pht, btb, rsb, stl or md)"))
    }
}

/// Placement of a serializing barrier in the PHT gadget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Barrier {
    #[default]
    None,
    /// Right after the bounds check.
    Lfence,
    /// After the probe access, where it no longer helps.
    Misplaced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackScenario {
    pub variant: Variant,
    pub secret: Vec<u8>,
    pub barrier: Barrier,
}

impl AttackScenario {
    pub fn new(variant: Variant, secret: &[u8]) -> AttackScenario {
        AttackScenario {
            variant,
            secret: secret.to_vec(),
            barrier: Barrier::None,
        }
    }

    pub fn with_barrier(mut self, barrier: Barrier) -> AttackScenario {
        self.barrier = barrier;
        self
    }

    /// Victim program targeting secret byte `i`.
    pub fn source(&self, i: usize) -> String {
        programs::source(self.variant, self.barrier, &self.secret, i)
    }

    pub fn load_options(&self) -> LoadOptions {
        match self.variant {
            Variant::Md => LoadOptions {
                kernel_secret: Some(self.secret.clone()),
                ..LoadOptions::kernel()
            },
            _ => LoadOptions::default(),
        }
    }

    fn expected_end(&self) -> HaltReason {
        match self.load_options().mode {
            Mode::Kernel => HaltReason::Exit { code: FAULT_EXIT },
            Mode::Bare => HaltReason::Halt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Receiver {
    pub threshold: u64,
}

impl Receiver {
    pub fn new(config: &SimConfig) -> Receiver {
        Receiver {
            threshold: config.latencies.threshold,
        }
    }

    /// Reload every probe line and return its latency.
    pub fn probe(&self, m: &mut Machine) -> Result<Vec<u64>, SimError> {
        (0..PROBE_LINES as u64)
            .map(|k| {
                m.probe_latency(PROBE_BASE + k * PROBE_STRIDE)
                    .map_err(|f| SimError::Config(format!("probe array not mapped: {f}")))
            })
            .collect()
    }

    pub fn hits(&self, latencies: &[u64]) -> Vec<u8> {
        latencies
            .iter()
            .enumerate()
            .filter(|(_, &l)| l < self.threshold)
            .map(|(k, _)| k as u8)
            .collect()
    }

    /// A single hit wins; otherwise the single nonzero hit, since line 0
    /// is also the dummy value's line.
    pub fn decide(hits: &[u8]) -> Option<u8> {
        if let [only] = hits {
            return Some(*only);
        }
        match hits.iter().filter(|&&h| h != 0).collect::<Vec<_>>()[..] {
            [only] => Some(*only),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakReport {
    pub version: u32,
    pub variant: Variant,
    pub barrier: Barrier,
    pub secret: Vec<u8>,
    pub recovered: Vec<u8>,
    pub accuracy: f64,
    pub rounds: usize,
    /// `[byte][round]` → 256 probe latencies.
    pub per_byte_latencies: Vec<Vec<Vec<u64>>>,
    /// `[byte][round]` → probe lines classified as hits.
    pub hit_lines: Vec<Vec<Vec<u8>>>,
    /// Rounds where the receiver saw more than one hit.
    pub multi_hit_rounds: usize,
    pub receiver_misconfigured: bool,
    pub config: SimConfig,
}

impl LeakReport {
    /// Every hit in every round was line 0.
    pub fn only_dummy_line(&self) -> bool {
        self.hit_lines.iter().flatten().flatten().all(|&l| l == 0)
    }

    pub fn leaked(&self) -> bool {
        self.accuracy > 0.0
    }

    /// Fields that must agree between runs differing only in encoding.
    pub fn observation(&self) -> (&[u8], &[Vec<Vec<u64>>]) {
        (&self.recovered, &self.per_byte_latencies)
    }
}

/// One transmission round for byte `i` on a fresh machine.
pub fn run_round(
    s: &AttackScenario,
    config: &SimConfig,
    i: usize,
) -> Result<Vec<u64>, AttackError> {
    let img = assemble(&s.source(i))?;
    let (mut m, _) = boot(config.clone(), &img, &s.load_options())?;
    let end = m.run_to_halt()?;
    if end != s.expected_end() {
        return Err(AttackError::Guest(end));
    }
    Ok(Receiver::new(config).probe(&mut m)?)
}

pub fn run_attack(
    s: &AttackScenario,
    config: &SimConfig,
    rounds: usize,
) -> Result<LeakReport, AttackError> {
    if s.secret.is_empty() {
        return Err(AttackError::EmptySecret);
    }
    if rounds == 0 {
        return Err(AttackError::NoRounds);
    }
    config.validate()?;
    let rx = Receiver::new(config);
    let mut recovered = Vec::with_capacity(s.secret.len());
    let mut lat_all = Vec::new();
    let mut hits_all = Vec::new();
    let mut multi = 0;
    for i in 0..s.secret.len() {
        let mut votes = [0usize; 256];
        let mut lats = Vec::new();
        let mut hits = Vec::new();
        for _ in 0..rounds {
            let lat = run_round(s, config, i)?;
            let h = rx.hits(&lat);
            if h.len() > 1 {
                multi += 1;
            }
            if let Some(b) = Receiver::decide(&h) {
                votes[b as usize] += 1;
            }
            lats.push(lat);
            hits.push(h);
        }
        // ties go to the smaller byte value
        let best = (0..256)
            .max_by_key(|&b| (votes[b], std::cmp::Reverse(b)))
            .unwrap();
        recovered.push(if votes[best] > 0 { best as u8 } else { 0 });
        lat_all.push(lats);
        hits_all.push(hits);
    }
    let correct = recovered
        .iter()
        .zip(&s.secret)
        .filter(|(a, b)| a == b)
        .count();
    Ok(LeakReport {
        version: REPORT_VERSION,
        variant: s.variant,
        barrier: s.barrier,
        secret: s.secret.clone(),
        recovered,
        accuracy: correct as f64 / s.secret.len() as f64,
        rounds,
        per_byte_latencies: lat_all,
        hit_lines: hits_all,
        multi_hit_rounds: multi,
        receiver_misconfigured: config.receiver_misconfigured(),
        config: config.clone(),
    })
}

/// PHT gadget with the barrier right after the bounds check.
pub fn run_serialized_baseline(
    secret: &[u8],
    config: &SimConfig,
    rounds: usize,
) -> Result<LeakReport, AttackError> {
    run_attack(
        &AttackScenario::new(Variant::Pht, secret).with_barrier(Barrier::Lfence),
        config,
        rounds,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub variant: Variant,
    pub context: bool,
    /// Set for cells with the defense on.
    pub encoding: Option<NtEncoding>,
    pub expect_leak: bool,
    pub accuracy: f64,
    pub recovered: Vec<u8>,
    pub only_dummy_line: bool,
    pub pass: bool,
}

impl MatrixCell {
    pub fn key(&self) -> String {
        match self.encoding {
            Some(e) => format!("{}/on/{e}", self.variant),
            None => format!("{}/off", self.variant),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub version: u32,
    pub secret: Vec<u8>,
    pub rounds: usize,
    pub cells: Vec<MatrixCell>,
    /// Per variant: defended reports agree across all encodings.
    pub encoding_equivalent: bool,
    pub pass: bool,
    pub config: SimConfig,
}

impl Matrix {
    pub fn failing(&self) -> impl Iterator<Item = &MatrixCell> {
        self.cells.iter().filter(|c| !c.pass)
    }

    pub fn table(&self) -> String {
        use std::fmt::Write;
        let mut s = format!(
            "{:<16} {:>6} {:>9} {:<14} {}\n",
            "cell", "expect", "accuracy", "recovered", "result"
        );
        for c in &self.cells {
            let expect = if c.expect_leak { "leak" } else { "none" };
            let rec: String = c.recovered.iter().map(|b| format!("{b:02x}")).collect();
            let res = if c.pass { "pass" } else { "FAIL" };
            let _ = writeln!(
                s,
                "{:<16} {expect:>6} {:>9.3} {rec:<14} {res}",
                c.key(),
                c.accuracy
            );
        }
        let _ = writeln!(
            s,
            "encoding equivalence: {}",
            if self.encoding_equivalent {
                "yes"
            } else {
                "NO"
            }
        );
        s
    }
}

/// Every variant with the defense off, then on under each encoding.
pub fn sweep_matrix(base: &SimConfig, secret: &[u8], rounds: usize) -> Result<Matrix, AttackError> {
    if base.receiver_misconfigured() {
        return Err(AttackError::ReceiverMisconfigured);
    }
    let speculation = base.window > 0;
    let mut cells = Vec::new();
    let mut equivalent = true;
    for v in Variant::ALL {
        let s = AttackScenario::new(v, secret);
        let off = SimConfig {
            context_enabled: false,
            light_mode: false,
            ..base.clone()
        };
        let r = run_attack(&s, &off, rounds)?;
        let pass = if speculation {
            r.accuracy == 1.0
        } else {
            r.accuracy == 0.0
        };
        cells.push(MatrixCell {
            variant: v,
            context: false,
            encoding: None,
            expect_leak: speculation,
            accuracy: r.accuracy,
            recovered: r.recovered.clone(),
            only_dummy_line: r.only_dummy_line(),
            pass,
        });
        let mut first: Option<LeakReport> = None;
        for enc in NtEncoding::ALL {
            let on = SimConfig {
                context_enabled: true,
                light_mode: false,
                nt_encoding: enc,
                ..base.clone()
            };
            let r = run_attack(&s, &on, rounds)?;
            let same = first
                .as_ref()
                .is_none_or(|f| f.observation() == r.observation());
            equivalent &= same;
            let zeros = r.recovered.iter().all(|&b| b == 0);
            let correct = secret
                .iter()
                .zip(&r.recovered)
                .filter(|(a, b)| a == b)
                .count();
            // a zero byte in the secret collides with the dummy value
            let nonzero_hits = secret
                .iter()
                .zip(&r.recovered)
                .filter(|(a, b)| a == b && **a != 0)
                .count();
            cells.push(MatrixCell {
                variant: v,
                context: true,
                encoding: Some(enc),
                expect_leak: false,
                accuracy: correct as f64 / secret.len() as f64,
                recovered: r.recovered.clone(),
                only_dummy_line: r.only_dummy_line(),
                pass: zeros && nonzero_hits == 0 && r.only_dummy_line() && same,
            });
            first.get_or_insert(r);
        }
    }
    let pass = cells.iter().all(|c| c.pass) && equivalent;
    Ok(Matrix {
        version: REPORT_VERSION,
        secret: secret.to_vec(),
        rounds,
        cells,
        encoding_equivalent: equivalent,
        pass,
        config: base.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseColumn {
    pub name: String,
    pub expect_leak: bool,
    pub leaked: bool,
    pub report: LeakReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseComparison {
    pub columns: Vec<DefenseColumn>,
    /// The uncacheable mode still leaks a secret that is already in a
    /// register (BTB gadget); the cache channel is closed but registers
    /// are not tracked.
    pub light_register_gap: bool,
    pub pass: bool,
}

/// Unprotected, serializing barrier, non-transient mapping and the
/// uncacheable-secret mode on the bounds-check bypass gadget.
pub fn compare_defenses(
    base: &SimConfig,
    secret: &[u8],
    rounds: usize,
) -> Result<DefenseComparison, AttackError> {
    let off = SimConfig {
        context_enabled: false,
        light_mode: false,
        ..base.clone()
    };
    let on = SimConfig {
        context_enabled: true,
        ..off.clone()
    };
    let light = SimConfig {
        light_mode: true,
        ..off.clone()
    };
    let pht = AttackScenario::new(Variant::Pht, secret);
    let runs = [
        ("unprotected", true, pht.clone(), &off),
        (
            "serializing-barrier",
            false,
            pht.clone().with_barrier(Barrier::Lfence),
            &off,
        ),
        ("non-transient", false, pht.clone(), &on),
        ("uncacheable", false, pht.clone(), &light),
    ];
    let mut columns = Vec::new();
    for (name, expect_leak, s, cfg) in runs {
        let report = run_attack(&s, cfg, rounds)?;
        columns.push(DefenseColumn {
            name: name.into(),
            expect_leak,
            leaked: report.leaked(),
            report,
        });
    }
    let gap = run_attack(&AttackScenario::new(Variant::Btb, secret), &light, 1)?.leaked();
    let pass = columns.iter().all(|c| c.leaked == c.expect_leak);
    Ok(DefenseComparison {
        columns,
        light_register_gap: gap,
        pass,
    })
}
