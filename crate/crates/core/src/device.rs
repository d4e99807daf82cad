//! Tensile tester emulator and its line protocol.
//!
//! The emulator is clock-agnostic: every call takes the current time in
//! microseconds, so the same command sequence replays identically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::Path;

pub const DEFAULT_TEST_DURATION_US: u64 = 8_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Running,
    Complete,
    Fault,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Idle, Phase::Running, Phase::Complete, Phase::Fault];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Idle => "IDLE",
            Phase::Running => "RUNNING",
            Phase::Complete => "COMPLETE",
            Phase::Fault => "FAULT",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultReason {
    NoSpecimen,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub peak_load: f64,
    pub yield_load: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TesterState {
    pub phase: Phase,
    pub specimen_loaded: bool,
    pub result: Option<TestResult>,
    pub progress: f64,
    pub fault: Option<FaultReason>,
}

impl Default for TesterState {
    fn default() -> Self {
        Self {
            phase: Phase::Idle,
            specimen_loaded: false,
            result: None,
            progress: 0.0,
            fault: None,
        }
    }
}

/// Synthetic specimen: linear up to yield, yield drawn with Gaussian noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecimenModel {
    /// N/mm
    pub stiffness: f64,
    /// N
    pub yield_load: f64,
    /// N
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SpecimenModel {
    fn default() -> Self {
        Self {
            stiffness: 1200.0,
            yield_load: 500.0,
            noise_sigma: 12.0,
            seed: 7,
        }
    }
}

impl SpecimenModel {
    pub fn validate(&self) -> Result<(), DeviceError> {
        let ok = self.stiffness.is_finite()
            && self.stiffness > 0.0
            && self.yield_load.is_finite()
            && self.yield_load > 0.0
            && self.noise_sigma.is_finite()
            && self.noise_sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(DeviceError::InvalidModel(format!("{self:?}")))
        }
    }

    /// Crosshead displacement at yield, mm.
    pub fn yield_displacement(&self) -> f64 {
        self.yield_load / self.stiffness
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DeviceError {
    #[error("specimen model invalid: {0}")]
    InvalidModel(String),
    #[error("test duration must be positive")]
    InvalidDuration,
    #[error("no specimen loaded")]
    NoSpecimen,
    #[error("command not allowed in phase {0}")]
    WrongPhase(Phase),
    #[error("clock moved backwards")]
    ClockBackwards,
}

/// One completed test as written to `results.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub iteration: u32,
    pub yield_load: f64,
    pub peak_load: f64,
    /// Emulator clock at completion, µs.
    pub timestamp: u64,
}

#[derive(Clone, Debug)]
pub struct Tester {
    state: TesterState,
    model: SpecimenModel,
    duration_us: u64,
    started_at: u64,
    noise: Normal<f64>,
    rng: ChaCha8Rng,
    results: Vec<ResultRow>,
}

impl Tester {
    pub fn new(model: SpecimenModel, duration_us: u64) -> Result<Self, DeviceError> {
        model.validate()?;
        if duration_us == 0 {
            return Err(DeviceError::InvalidDuration);
        }
        let noise = Normal::new(0.0, model.noise_sigma)
            .map_err(|e| DeviceError::InvalidModel(e.to_string()))?;
        Ok(Self {
            state: TesterState::default(),
            model,
            duration_us,
            started_at: 0,
            noise,
            rng: ChaCha8Rng::seed_from_u64(model.seed),
            results: Vec::new(),
        })
    }

    pub fn state(&self) -> &TesterState {
        &self.state
    }

    pub fn model(&self) -> &SpecimenModel {
        &self.model
    }

    pub fn results(&self) -> &[ResultRow] {
        &self.results
    }

    /// Advances a running test to `now_us`, completing it once the
    /// configured duration has elapsed.
    pub fn advance_to(&mut self, now_us: u64) {
        if self.state.phase != Phase::Running {
            return;
        }
        let elapsed = now_us.saturating_sub(self.started_at);
        if elapsed >= self.duration_us {
            let yield_load = self.model.yield_load + self.noise.sample(&mut self.rng);
            let result = TestResult {
                yield_load,
                peak_load: 1.1 * yield_load,
            };
            self.state.phase = Phase::Complete;
            self.state.progress = 1.0;
            self.state.result = Some(result);
            self.results.push(ResultRow {
                iteration: self.results.len() as u32 + 1,
                yield_load,
                peak_load: result.peak_load,
                timestamp: self.started_at + self.duration_us,
            });
        } else {
            self.state.progress = elapsed as f64 / self.duration_us as f64;
        }
    }

    pub fn start_test(&mut self, now_us: u64) -> Result<(), DeviceError> {
        self.advance_to(now_us);
        match self.state.phase {
            Phase::Idle if self.state.specimen_loaded => {
                self.state.phase = Phase::Running;
                self.state.progress = 0.0;
                self.started_at = now_us;
                Ok(())
            }
            Phase::Idle => {
                self.state.phase = Phase::Fault;
                self.state.fault = Some(FaultReason::NoSpecimen);
                Err(DeviceError::NoSpecimen)
            }
            other => Err(DeviceError::WrongPhase(other)),
        }
    }

    /// Returns to Idle and ejects the specimen. Idempotent.
    pub fn reset(&mut self) {
        self.state = TesterState::default();
    }

    /// Load-cell event from the server: a specimen was placed.
    pub fn load_specimen(&mut self) -> Result<(), DeviceError> {
        match self.state.phase {
            Phase::Idle => {
                self.state.specimen_loaded = true;
                Ok(())
            }
            other => Err(DeviceError::WrongPhase(other)),
        }
    }

    pub fn status_line(&self) -> String {
        let y = match self.state.result {
            Some(r) => format!("{:.2}", r.yield_load),
            None => "NA".to_string(),
        };
        format!(
            "PHASE={} LOADED={} PROGRESS={:.2} YIELD={}",
            self.state.phase,
            u8::from(self.state.specimen_loaded),
            self.state.progress,
            y
        )
    }
}

/// A parsed line-protocol command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Start,
    Reset,
    Status,
    Load,
    Time(u64),
}

impl Command {
    pub fn parse(line: &str) -> Option<Self> {
        let mut parts = line.split_whitespace();
        let cmd = match (parts.next()?, parts.next()) {
            ("START", None) => Command::Start,
            ("RESET", None) => Command::Reset,
            ("STATUS", None) => Command::Status,
            ("LOAD", None) => Command::Load,
            ("TIME", Some(t)) => Command::Time(t.parse().ok()?),
            _ => return None,
        };
        parts.next().is_none().then_some(cmd)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Command::Start => f.write_str("START"),
            Command::Reset => f.write_str("RESET"),
            Command::Status => f.write_str("STATUS"),
            Command::Load => f.write_str("LOAD"),
            Command::Time(t) => write!(f, "TIME {t}"),
        }
    }
}

/// Line-protocol front end holding the emulator clock.
///
/// The clock follows `TIME` commands once one has been received; before
/// that the caller's clock is used.
#[derive(Clone, Debug)]
pub struct LineSession {
    pub tester: Tester,
    external_clock: Option<u64>,
}

impl LineSession {
    pub fn new(tester: Tester) -> Self {
        Self {
            tester,
            external_clock: None,
        }
    }

    pub fn now(&self, host_now_us: u64) -> u64 {
        self.external_clock.unwrap_or(host_now_us)
    }

    /// Handles one line and returns the reply (without newline).
    pub fn handle(&mut self, line: &str, host_now_us: u64) -> String {
        let Some(cmd) = Command::parse(line.trim()) else {
            return "ERR UNKNOWN".to_string();
        };
        if let Command::Time(t) = cmd {
            if self.external_clock.is_some_and(|c| t < c) {
                return "ERR TIME".to_string();
            }
            self.external_clock = Some(t);
        }
        let now = self.now(host_now_us);
        self.tester.advance_to(now);
        match cmd {
            Command::Time(_) => "OK".to_string(),
            Command::Status => self.tester.status_line(),
            Command::Reset => {
                self.tester.reset();
                "OK".to_string()
            }
            Command::Load => match self.tester.load_specimen() {
                Ok(()) => "OK".to_string(),
                Err(_) => "ERR STATE".to_string(),
            },
            Command::Start => match self.tester.start_test(now) {
                Ok(()) => "OK".to_string(),
                Err(DeviceError::NoSpecimen) => "ERR NO_SPECIMEN".to_string(),
                Err(DeviceError::WrongPhase(Phase::Running)) => "ERR BUSY".to_string(),
                Err(_) => "ERR STATE".to_string(),
            },
        }
    }
}

/// Parsed `STATUS` reply.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Status {
    pub phase: Phase,
    pub loaded: bool,
    pub progress: f64,
    pub yield_load: Option<f64>,
}

impl Status {
    pub fn parse(line: &str) -> Option<Self> {
        let mut phase = None;
        let mut loaded = None;
        let mut progress = None;
        let mut yield_load = None;
        for kv in line.split_whitespace() {
            let (k, v) = kv.split_once('=')?;
            match k {
                "PHASE" => phase = Phase::parse(v),
                "LOADED" => loaded = Some(v == "1"),
                "PROGRESS" => progress = v.parse().ok(),
                "YIELD" => yield_load = Some(if v == "NA" { None } else { Some(v.parse().ok()?) }),
                _ => return None,
            }
        }
        Some(Self {
            phase: phase?,
            loaded: loaded?,
            progress: progress?,
            yield_load: yield_load?,
        })
    }
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
}

/// Appends one row, writing the header if the file is new or empty.
pub fn append_result_csv(path: &Path, row: &ResultRow) -> std::io::Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(row)?;
    w.flush()?;
    w.into_inner()
        .map_err(|e| std::io::Error::other(e.to_string()))?
        .flush()
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}
