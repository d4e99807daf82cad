//! Host core: configuration, the motion pipeline, session bookkeeping,
//! lab-task detection and metrics.
//!
//! Everything here is synchronous and clock-free; the network runtime and
//! the lockstep harness both drive [`ServerCore`] with explicit times.

use crate::device::{Command, Phase, Status};
use crate::geometry::Pose;
use crate::ik::{self, IkRequest, IkSolution, SelectParams};
use crate::kinematics::{forward, ArmModel, JointState, KinematicsError};
use crate::motion::{
    admissible, apply_fences, clutch_target, filter_step, rate_limit_within, BoxMode,
    ClutchState, Fence, FilterState, FrameMapping, MotionError,
};
use crate::protocol::{
    FeedbackMsg, Gripper, HandshakeRequest, MotionCmd, SeqGate, SessionDecision, SessionTable,
    StateMsg, Token, WaypointMsg, DEFAULT_SESSION_TIMEOUT_US,
};
use crate::task::{CycleEntry, TaskEvent, TaskStep, TaskTracker};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

/// Tolerance for the emitted-command fence check, meters.
pub const GATE_TOL: f64 = 1e-6;
/// Halvings tried before a command step is held.
const GATE_BISECTIONS: u32 = 8;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing server config: {0}")]
    Parse(String),
    #[error("arm model: {0}")]
    Arm(#[from] KinematicsError),
    #[error("{0}")]
    Motion(#[from] MotionError),
    #[error("invalid server config: {0}")]
    Invalid(String),
}

/// Axis-aligned zone used for task detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Zone {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Zone {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::from(self.min).lerp(&Vector3::from(self.max), 0.5)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Zones {
    pub reload: Zone,
    pub tester: Zone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ports {
    pub host: String,
    pub stream: u16,
    pub command: u16,
    pub feedback: u16,
    pub device: u16,
    pub gateway: u16,
}

impl Default for Ports {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            stream: 6040,
            command: 6041,
            feedback: 6042,
            device: 6050,
            gateway: 6080,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IkSettings {
    pub pos_tol: f64,
    pub rot_tol: f64,
    pub budget: Duration,
    pub max_iterations: u32,
    pub select: SelectParams,
}

impl Default for IkSettings {
    fn default() -> Self {
        Self {
            pos_tol: ik::DEFAULT_POS_TOL,
            rot_tol: ik::DEFAULT_ROT_TOL,
            budget: ik::DEFAULT_BUDGET,
            max_iterations: ik::DEFAULT_MAX_ITERATIONS,
            select: SelectParams::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub arm: ArmModel,
    pub arm_path: Option<PathBuf>,
    pub fences: Vec<Fence>,
    pub zones: Zones,
    pub mapping: FrameMapping,
    pub filter: FilterState,
    pub ik: IkSettings,
    pub ports: Ports,
    pub command_hz: f64,
    pub waypoint_hz: f64,
    pub state_hz: f64,
    pub session_timeout_us: u64,
    pub seed: u64,
}

mod raw {
    use super::{Ports, Zones};
    use serde::Deserialize;

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct File {
        pub arm: String,
        #[serde(default)]
        pub seed: u64,
        #[serde(default)]
        pub ports: Ports,
        #[serde(default)]
        pub rates: Rates,
        #[serde(default)]
        pub mapping: Mapping,
        #[serde(default)]
        pub filter: Filter,
        #[serde(default)]
        pub ik: Ik,
        #[serde(default)]
        pub session: Session,
        #[serde(default)]
        pub fences: Vec<Fence>,
        pub zones: Zones,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields, default)]
    pub struct Rates {
        pub command_hz: f64,
        pub waypoint_hz: f64,
        pub state_hz: f64,
    }

    impl Default for Rates {
        fn default() -> Self {
            Self {
                command_hz: 250.0,
                waypoint_hz: 60.0,
                state_hz: 30.0,
            }
        }
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields, default)]
    pub struct Mapping {
        pub rotation_rpy_deg: [f64; 3],
        pub translation_scale: f64,
    }

    impl Default for Mapping {
        fn default() -> Self {
            Self {
                rotation_rpy_deg: [0.0; 3],
                translation_scale: 1.0,
            }
        }
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields, default)]
    pub struct Filter {
        pub alpha_pos: f64,
        pub alpha_rot: f64,
    }

    impl Default for Filter {
        fn default() -> Self {
            Self {
                alpha_pos: crate::motion::DEFAULT_FILTER_ALPHA,
                alpha_rot: crate::motion::DEFAULT_FILTER_ALPHA,
            }
        }
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields, default)]
    pub struct Ik {
        pub pos_tol: f64,
        pub rot_tol: f64,
        pub budget_us: u64,
        pub max_iterations: u32,
        pub min_manipulability: f64,
        pub limit_margin_deg: f64,
    }

    impl Default for Ik {
        fn default() -> Self {
            Self {
                pos_tol: crate::ik::DEFAULT_POS_TOL,
                rot_tol: crate::ik::DEFAULT_ROT_TOL,
                budget_us: crate::ik::DEFAULT_BUDGET.as_micros() as u64,
                max_iterations: crate::ik::DEFAULT_MAX_ITERATIONS,
                min_manipulability: crate::ik::DEFAULT_MIN_MANIPULABILITY,
                limit_margin_deg: crate::ik::DEFAULT_LIMIT_MARGIN_DEG,
            }
        }
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields, default)]
    pub struct Session {
        pub timeout_s: f64,
    }

    impl Default for Session {
        fn default() -> Self {
            Self {
                timeout_s: crate::protocol::DEFAULT_SESSION_TIMEOUT_US as f64 / 1e6,
            }
        }
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Fence {
        pub name: String,
        pub kind: String,
        pub normal: Option<[f64; 3]>,
        pub offset: Option<f64>,
        pub min: Option<[f64; 3]>,
        pub max: Option<[f64; 3]>,
        #[serde(default)]
        pub lock_orientation: bool,
    }
}

impl ServerConfig {
    /// Parses a config; relative arm paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let raw: raw::File = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let arm_path = base_dir.join(&raw.arm);
        let arm = ArmModel::from_file(&arm_path)?;
        Self::from_raw(raw, arm, Some(arm_path))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses a config against an already loaded arm; the `arm` key is
    /// ignored.
    pub fn from_toml_with_arm(text: &str, arm: ArmModel) -> Result<Self, ConfigError> {
        let raw: raw::File = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::from_raw(raw, arm, None)
    }

    fn from_raw(raw: raw::File, arm: ArmModel, arm_path: Option<PathBuf>) -> Result<Self, ConfigError> {
        if arm.dof() != 6 {
            return Err(ConfigError::Invalid(format!(
                "the motion protocol carries 6 joints, arm has {}",
                arm.dof()
            )));
        }
        let fences = raw
            .fences
            .into_iter()
            .map(|f| -> Result<Fence, ConfigError> {
                let need3 = |v: Option<[f64; 3]>, what: &str| {
                    v.map(Vector3::from).ok_or_else(|| {
                        ConfigError::Invalid(format!("fence `{}` needs `{what}`", f.name))
                    })
                };
                let fence = match f.kind.as_str() {
                    "half_space" => Fence::half_space(
                        f.name.clone(),
                        need3(f.normal, "normal")?,
                        f.offset.ok_or_else(|| {
                            ConfigError::Invalid(format!("fence `{}` needs `offset`", f.name))
                        })?,
                    )?,
                    "keep_in" | "keep_out" => Fence::aabb(
                        f.name.clone(),
                        need3(f.min, "min")?,
                        need3(f.max, "max")?,
                        if f.kind == "keep_in" {
                            BoxMode::KeepIn
                        } else {
                            BoxMode::KeepOut
                        },
                    )?,
                    other => {
                        return Err(ConfigError::Invalid(format!(
                            "fence `{}` has unknown kind `{other}`",
                            f.name
                        )))
                    }
                };
                Ok(fence.locking_orientation(f.lock_orientation))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let [r, p, y] = raw.mapping.rotation_rpy_deg.map(f64::to_radians);
        let mapping = FrameMapping::new(
            Pose::from_rpy(Vector3::zeros(), r, p, y).orientation(),
            raw.mapping.translation_scale,
        )?;
        let filter = FilterState::new(raw.filter.alpha_pos, raw.filter.alpha_rot)?;
        let ikr = raw.ik;
        if !(ikr.pos_tol > 0.0 && ikr.rot_tol > 0.0 && ikr.budget_us > 0 && ikr.max_iterations > 0)
        {
            return Err(ConfigError::Invalid("ik tolerances and budget must be positive".into()));
        }
        let rates = raw.rates;
        for (name, v) in [
            ("command_hz", rates.command_hz),
            ("waypoint_hz", rates.waypoint_hz),
            ("state_hz", rates.state_hz),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError::Invalid(format!("rates.{name} must be positive")));
            }
        }
        if !(raw.session.timeout_s > 0.0) {
            return Err(ConfigError::Invalid("session.timeout_s must be positive".into()));
        }
        let cfg = Self {
            arm,
            arm_path,
            fences,
            zones: raw.zones,
            mapping,
            filter,
            ik: IkSettings {
                pos_tol: ikr.pos_tol,
                rot_tol: ikr.rot_tol,
                budget: Duration::from_micros(ikr.budget_us),
                max_iterations: ikr.max_iterations,
                select: SelectParams {
                    min_manipulability: ikr.min_manipulability,
                    limit_margin: ikr.limit_margin_deg.to_radians(),
                },
            },
            ports: raw.ports,
            command_hz: rates.command_hz,
            waypoint_hz: rates.waypoint_hz,
            state_hz: rates.state_hz,
            session_timeout_us: (raw.session.timeout_s * 1e6).round() as u64,
            seed: raw.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Default layout around the given arm, without fences.
    pub fn bare(arm: ArmModel) -> Self {
        let home_tcp = forward(&arm, arm.home()).expect("home has the model's length");
        let p = home_tcp.position();
        let zone = Zone {
            min: (p - Vector3::repeat(0.05)).into(),
            max: (p + Vector3::repeat(0.05)).into(),
        };
        Self {
            arm,
            arm_path: None,
            fences: Vec::new(),
            zones: Zones {
                reload: zone,
                tester: zone,
            },
            mapping: FrameMapping::default(),
            filter: FilterState::default(),
            ik: IkSettings::default(),
            ports: Ports::default(),
            command_hz: 250.0,
            waypoint_hz: 60.0,
            state_hz: 30.0,
            session_timeout_us: DEFAULT_SESSION_TIMEOUT_US,
            seed: 0,
        }
    }

    /// The fenced region must contain the home TCP, which also proves it is
    /// not empty.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let home = forward(&self.arm, self.arm.home())?.position();
        if let Some(f) = self.fences.iter().find(|f| f.violation(&home) > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "home TCP {:?} violates fence `{}`; the fences may be contradictory",
                home.as_slice(),
                f.name
            )));
        }
        Ok(())
    }

    pub fn command_dt(&self) -> f64 {
        1.0 / self.command_hz
    }
}

/// Arm, fence and zone description served to the console at `/model`.
pub fn model_document(cfg: &ServerConfig) -> serde_json::Value {
    use crate::motion::FenceKind;
    use serde_json::json;
    let arm = &cfg.arm;
    let tool = arm.tool_offset();
    let fences: Vec<_> = cfg
        .fences
        .iter()
        .map(|f| match f.kind() {
            FenceKind::HalfSpace { normal, offset } => json!({
                "name": f.name,
                "kind": "half_space",
                "normal": [normal.x, normal.y, normal.z],
                "offset": offset,
                "lock_orientation": f.locks_orientation(),
            }),
            FenceKind::Box { min, max, mode } => json!({
                "name": f.name,
                "kind": if *mode == BoxMode::KeepIn { "keep_in" } else { "keep_out" },
                "min": [min.x, min.y, min.z],
                "max": [max.x, max.y, max.z],
                "lock_orientation": f.locks_orientation(),
            }),
        })
        .collect();
    json!({
        "name": arm.name,
        "joints": arm.joints().iter().map(|j| json!({
            "a": j.a, "alpha": j.alpha, "d": j.d, "theta_offset": j.theta_offset,
        })).collect::<Vec<_>>(),
        "limits": arm.limits().iter().map(|l| json!({"min": l.min, "max": l.max})).collect::<Vec<_>>(),
        "velocity_cap": arm.velocity_cap(),
        "tool_offset": {"position": tool.xyz(), "orientation": tool.wxyz()},
        "home": arm.home(),
        "fences": fences,
        "zones": cfg.zones,
    })
}

/// Line-protocol access to the tester; `None` means unreachable.
pub trait DeviceLink {
    fn request(&mut self, cmd: Command) -> Option<String>;
}

/// A device that never answers.
pub struct NoDevice;

impl DeviceLink for NoDevice {
    fn request(&mut self, _: Command) -> Option<String> {
        None
    }
}

impl DeviceLink for crate::device::LineSession {
    fn request(&mut self, cmd: Command) -> Option<String> {
        Some(self.handle(&cmd.to_string(), 0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Ik,
    Emit,
    Execute,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Ingest, Stage::Ik, Stage::Emit, Stage::Execute];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Ik => "ik",
            Stage::Emit => "emit",
            Stage::Execute => "execute",
        }
    }
}

/// Per-stage latency samples in µs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatencyLog {
    samples: BTreeMap<Stage, Vec<u64>>,
}

impl LatencyLog {
    pub fn record(&mut self, stage: Stage, us: u64) {
        self.samples.entry(stage).or_default().push(us);
    }

    pub fn samples(&self, stage: Stage) -> &[u64] {
        self.samples.get(&stage).map_or(&[], Vec::as_slice)
    }
}

/// Nearest-rank percentile of unsorted samples; `None` when empty.
pub fn percentile(samples: &[u64], p: f64) -> Option<u64> {
    if samples.is_empty() {
        return None;
    }
    let mut s = samples.to_vec();
    s.sort_unstable();
    let rank = ((p / 100.0) * s.len() as f64).ceil().max(1.0) as usize;
    Some(s[rank.min(s.len()) - 1])
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionRecord {
    pub token: Token,
    pub operator_id: String,
    pub clutch: ClutchState,
    pub task: TaskTracker,
    pub latency: LatencyLog,
    pub degraded_events: u64,
    pub seq: SeqGate,
    /// TCP displacement over the first command tick after each engage.
    pub engage_jumps: Vec<f64>,
    pub clamped_waypoints: u64,
    pub gated_commands: u64,
    pub commands_emitted: u64,
    pub waypoints: u64,
    pub motion_outside_clutch: u64,
    pub last_yield: Option<f64>,
}

impl SessionRecord {
    pub fn new(token: Token, operator_id: impl Into<String>) -> Self {
        Self {
            token,
            operator_id: operator_id.into(),
            clutch: ClutchState::released(),
            task: TaskTracker::default(),
            latency: LatencyLog::default(),
            degraded_events: 0,
            seq: SeqGate::default(),
            engage_jumps: Vec::new(),
            clamped_waypoints: 0,
            gated_commands: 0,
            commands_emitted: 0,
            waypoints: 0,
            motion_outside_clutch: 0,
            last_yield: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub count: usize,
    pub p50: Option<u64>,
    pub p95: Option<u64>,
    pub p99: Option<u64>,
    pub max: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub operator_id: String,
    /// µs, keyed by stage name
    pub latency_us: BTreeMap<String, StageStats>,
    pub cycles: Vec<CycleEntry>,
    pub degraded_events: u64,
    pub dropped_waypoints: u64,
    pub waypoints: u64,
    pub clamped_waypoints: u64,
    pub gated_commands: u64,
    pub commands_emitted: u64,
    pub task_warnings: u64,
    pub engage_jumps_m: Vec<f64>,
    pub motion_outside_clutch: u64,
}

pub fn metrics_report(session: Option<&SessionRecord>) -> MetricsReport {
    let mut report = MetricsReport::default();
    for stage in Stage::ALL {
        let s = session.map_or(&[][..], |s| s.latency.samples(stage));
        report.latency_us.insert(
            stage.as_str().to_string(),
            StageStats {
                count: s.len(),
                p50: percentile(s, 50.0),
                p95: percentile(s, 95.0),
                p99: percentile(s, 99.0),
                max: s.iter().copied().max(),
            },
        );
    }
    if let Some(s) = session {
        report.operator_id = s.operator_id.clone();
        report.cycles = s.task.cycle_log().to_vec();
        report.degraded_events = s.degraded_events;
        report.dropped_waypoints = s.seq.dropped();
        report.waypoints = s.waypoints;
        report.clamped_waypoints = s.clamped_waypoints;
        report.gated_commands = s.gated_commands;
        report.commands_emitted = s.commands_emitted;
        report.task_warnings = s.task.warnings();
        report.engage_jumps_m = s.engage_jumps.clone();
        report.motion_outside_clutch = s.motion_outside_clutch;
    }
    report
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `latency.csv`, `cycles.csv` and `report.json` into `dir`.
    pub fn write_files(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("latency.csv"))?;
        w.write_record(["stage", "count", "p50_us", "p95_us", "p99_us", "max_us"])?;
        for (stage, s) in &self.latency_us {
            let f = |v: Option<u64>| v.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([
                stage.clone(),
                s.count.to_string(),
                f(s.p50),
                f(s.p95),
                f(s.p99),
                f(s.max),
            ])?;
        }
        w.flush()?;
        write_cycles_csv(&dir.join("cycles.csv"), &self.cycles)?;
        std::fs::write(dir.join("report.json"), self.to_json())
    }
}

pub fn write_cycles_csv(path: &Path, cycles: &[CycleEntry]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in cycles {
        w.serialize(c)?;
    }
    w.flush()
}

pub fn read_cycles_csv(path: &Path) -> Result<Vec<CycleEntry>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

/// What processing one waypoint produced.
#[derive(Clone, Debug, PartialEq)]
pub struct WaypointOutcome {
    pub state: StateMsg,
    pub event: Option<TaskEvent>,
    /// IK solve plus selection time, when IK ran.
    pub ik_us: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct EngageProbe {
    tcp: Vector3<f64>,
    /// Seq of the first command emitted after the engage.
    first_seq: Option<u32>,
}

/// Motion authority, kinematic state and session bookkeeping.
pub struct ServerCore {
    cfg: ServerConfig,
    sessions: SessionTable,
    session: Option<SessionRecord>,
    filter: FilterState,
    /// Pose the clutch latches as robot origin.
    held: Pose,
    /// Last fenced target pose.
    target_pose: Pose,
    target_q: Vec<f64>,
    last_cmd: Vec<f64>,
    q_actual: Vec<f64>,
    cmd_seq: u32,
    gate_held: bool,
    gripper_closed: bool,
    last_buttons: u8,
    estop: bool,
    clamped: bool,
    lock_orientation: bool,
    degraded: bool,
    tester_phase: Phase,
    probe: Option<EngageProbe>,
    ack_seq: u32,
    token_counter: u64,
}

impl ServerCore {
    pub fn new(cfg: ServerConfig) -> Self {
        let home = cfg.arm.home().to_vec();
        let held = forward(&cfg.arm, &home).expect("home has the model's length");
        Self {
            sessions: SessionTable::new(cfg.session_timeout_us),
            session: None,
            filter: cfg.filter,
            held,
            target_pose: held,
            target_q: home.clone(),
            last_cmd: home.clone(),
            q_actual: home,
            cmd_seq: 0,
            gate_held: false,
            gripper_closed: false,
            last_buttons: 0,
            estop: false,
            clamped: false,
            lock_orientation: false,
            degraded: false,
            tester_phase: Phase::Idle,
            probe: None,
            ack_seq: 0,
            token_counter: 0,
            cfg,
        }
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn session(&self) -> Option<&SessionRecord> {
        self.session.as_ref()
    }

    pub fn session_mut(&mut self) -> Option<&mut SessionRecord> {
        self.session.as_mut()
    }

    pub fn sessions(&self) -> &SessionTable {
        &self.sessions
    }

    pub fn last_command(&self) -> &[f64] {
        &self.last_cmd
    }

    pub fn target_q(&self) -> &[f64] {
        &self.target_q
    }

    pub fn target_pose(&self) -> &Pose {
        &self.target_pose
    }

    pub fn metrics(&self) -> MetricsReport {
        metrics_report(self.session.as_ref())
    }

    fn fresh_token(&mut self) -> Token {
        use rand::{RngCore, SeedableRng};
        self.token_counter += 1;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
            self.cfg.seed ^ self.token_counter.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let mut t = [0u8; 16];
        rng.fill_bytes(&mut t);
        Token(t)
    }

    pub fn handshake(&mut self, req: &HandshakeRequest, now_us: u64) -> SessionDecision {
        let token = self.fresh_token();
        let decision = self.sessions.handshake(req, now_us, || token);
        match &decision {
            SessionDecision::Created(_) => {
                let id = self.sessions.active().map(|s| s.operator_id.clone()).unwrap_or_default();
                self.session = Some(SessionRecord::new(token, id));
                self.release_clutch();
                self.gripper_closed = false;
                self.last_buttons = 0;
            }
            SessionDecision::Reattached(_) => self.release_clutch(),
            SessionDecision::Rejected(_) => {}
        }
        decision
    }

    /// The operator's connection dropped; the session stays resumable.
    pub fn disconnect(&mut self, token: &Token, now_us: u64) {
        if self.session.as_ref().is_some_and(|s| s.token == *token) {
            self.release_clutch();
        }
        self.sessions.detach(token, now_us);
    }

    /// Ends the session; its record stays readable until the next Hello.
    pub fn bye(&mut self, token: &Token) {
        if self.session.as_ref().is_some_and(|s| s.token == *token) {
            self.release_clutch();
        }
        self.sessions.end(token);
    }

    pub fn is_engaged(&self) -> bool {
        self.session.as_ref().is_some_and(|s| s.clutch.is_engaged())
    }

    fn release_clutch(&mut self) {
        if let Some(s) = self.session.as_mut() {
            s.clutch.release();
        }
        // Hold where the command stream stopped so the next engage latches
        // the arm's actual target.
        self.target_q = self.last_cmd.clone();
        self.held = self.fk(&self.last_cmd);
        self.target_pose = self.held;
        self.filter.reset();
        self.probe = None;
    }

    fn fk(&self, q: &[f64]) -> Pose {
        forward(&self.cfg.arm, q).expect("joint vectors have the model's length")
    }

    fn admissible_q(&self, q: &[f64]) -> bool {
        admissible(&self.cfg.fences, &self.fk(q).position(), GATE_TOL)
    }

    /// Runs the pipeline for one waypoint of the session `token`. Returns
    /// `None` for unknown tokens and stale sequence numbers.
    pub fn on_waypoint(
        &mut self,
        token: &Token,
        wp: &WaypointMsg,
        device: &mut dyn DeviceLink,
    ) -> Option<WaypointOutcome> {
        let session = self.session.as_mut().filter(|s| s.token == *token)?;
        if !session.seq.accept(wp.seq) {
            return None;
        }
        session.waypoints += 1;
        self.sessions.touch(token, wp.send_time);
        self.ack_seq = wp.seq;
        let mut event = None;
        if session.task.step() == TaskStep::Connect {
            session.task.advance(TaskEvent::Connected, wp.send_time);
            event = Some(TaskEvent::Connected);
        }

        self.estop = wp.buttons.estop();
        let want_engaged = wp.clutch && !self.estop;
        let engaged = self.is_engaged();
        if engaged && !want_engaged {
            self.release_clutch();
        }
        let mut ik_us = None;
        if want_engaged {
            if !engaged {
                let held = self.held;
                let s = self.session.as_mut().expect("checked above");
                s.clutch.engage(wp.pose, held);
                self.filter.reset();
                self.probe = Some(EngageProbe {
                    tcp: self.fk(&self.q_actual).position(),
                    first_seq: None,
                });
            }
            ik_us = Some(self.track(wp));
        }

        if let Some(e) = self.detect_task_event(wp, device) {
            event = Some(e);
        }
        self.handle_buttons(wp, device);
        Some(WaypointOutcome {
            state: self.state_msg(wp.send_time),
            event,
            ik_us,
        })
    }

    /// clutch → map → filter → fences → IK → select. Returns the IK time.
    fn track(&mut self, wp: &WaypointMsg) -> u64 {
        let s = self.session.as_ref().expect("engaged implies a session");
        let raw = clutch_target(&s.clutch, &self.cfg.mapping, &wp.pose)
            .expect("clutch engaged above");
        let filtered = filter_step(&mut self.filter, &raw);
        let current = self.fk(&self.last_cmd);
        let fenced = apply_fences(&self.cfg.fences, &filtered, &current);
        let target = if fenced.lock_orientation {
            fenced.pose.with_orientation(current.orientation())
        } else {
            fenced.pose
        };
        self.clamped = fenced.clamped;
        self.lock_orientation = fenced.lock_orientation;

        let started = Instant::now();
        let chosen = self.solve(&target, wp.seq);
        let ik_us = started.elapsed().as_micros() as u64;

        let s = self.session.as_mut().expect("engaged implies a session");
        if fenced.clamped {
            s.clamped_waypoints += 1;
        }
        match chosen {
            Some(q) => {
                self.degraded = false;
                self.target_q = q;
                self.target_pose = target;
            }
            None => {
                // Hold the last target.
                self.degraded = true;
                s.degraded_events += 1;
            }
        }
        ik_us
    }

    fn ik_request(&self, target: &Pose, seed: &[f64], rng: u64) -> IkRequest {
        let ik = &self.cfg.ik;
        IkRequest::new(*target, seed.to_vec())
            .with_tolerances(ik.pos_tol, ik.rot_tol)
            .with_budget(ik.budget)
            .with_max_iterations(ik.max_iterations)
            .with_rng_seed(rng)
    }

    fn solve(&self, target: &Pose, seq: u32) -> Option<Vec<f64>> {
        let model = &self.cfg.arm;
        let rng = self.cfg.seed ^ (seq as u64).wrapping_mul(0x2545_F491_4F6C_DD1D);
        let mut candidates: Vec<IkSolution> = Vec::new();
        let seeds = [self.target_q.clone(), self.last_cmd.clone(), model.home().to_vec()];
        for (k, seed) in seeds.iter().enumerate() {
            if k > 0 && (!candidates.is_empty() || seeds[..k].contains(seed)) {
                continue;
            }
            if let Ok(sol) = ik::solve(model, &self.ik_request(target, seed, rng.wrapping_add(k as u64))) {
                if sol.converged() {
                    candidates.push(sol);
                }
            }
        }
        if candidates.is_empty() {
            return None;
        }
        let sel = ik::select_solution(&candidates, &self.target_q, model, &self.cfg.ik.select).ok()?;
        let q = sel.solution.q.q;
        if self.admissible_q(&q) {
            return Some(q);
        }
        // A converged solution can sit up to the IK tolerance outside a
        // fence; tighten it onto the (admissible) target.
        let polished = ik::solve(
            model,
            &self
                .ik_request(target, &q, rng)
                .with_tolerances(GATE_TOL * 0.1, self.cfg.ik.rot_tol),
        );
        match polished {
            Ok(p) if p.converged() && self.admissible_q(&p.q.q) => Some(p.q.q),
            _ => Some(q),
        }
    }

    fn detect_task_event(&mut self, wp: &WaypointMsg, device: &mut dyn DeviceLink) -> Option<TaskEvent> {
        let closing = wp.gripper == Gripper::Close && !self.gripper_closed;
        let opening = wp.gripper == Gripper::Open && self.gripper_closed;
        match wp.gripper {
            Gripper::Close => self.gripper_closed = true,
            Gripper::Open => self.gripper_closed = false,
            Gripper::Hold => {}
        }
        let p = self.target_pose.position();
        let zones = self.cfg.zones;
        let step = self.session.as_ref()?.task.step();
        let event = match step {
            TaskStep::Pick if closing && zones.reload.contains(&p) => Some(TaskEvent::PickDetected),
            TaskStep::Place if opening && zones.tester.contains(&p) => {
                device.request(Command::Time(wp.send_time));
                device.request(Command::Load);
                Some(TaskEvent::PlaceDetected)
            }
            TaskStep::Test => {
                device.request(Command::Time(wp.send_time));
                let status = device.request(Command::Status).and_then(|l| Status::parse(&l));
                if let Some(st) = status {
                    self.tester_phase = st.phase;
                    if st.phase == Phase::Complete {
                        if let Some(s) = self.session.as_mut() {
                            s.last_yield = st.yield_load;
                        }
                        Some(TaskEvent::TestComplete)
                    } else {
                        None
                    }
                } else {
                    None
                }
            }
            TaskStep::Return if zones.reload.contains(&p) => Some(TaskEvent::Returned),
            _ => None,
        }?;
        let s = self.session.as_mut()?;
        s.task.advance(event, wp.send_time).then_some(event)
    }

    fn handle_buttons(&mut self, wp: &WaypointMsg, device: &mut dyn DeviceLink) {
        let rising = wp.buttons.0 & !self.last_buttons;
        self.last_buttons = wp.buttons.0;
        for (bit, cmd) in [
            (crate::protocol::Buttons::DEVICE_START, Command::Start),
            (crate::protocol::Buttons::DEVICE_RESET, Command::Reset),
        ] {
            if rising & bit != 0 {
                device.request(Command::Time(wp.send_time));
                device.request(cmd);
                if let Some(st) = device.request(Command::Status).and_then(|l| Status::parse(&l)) {
                    self.tester_phase = st.phase;
                }
            }
        }
    }

    /// One command period. Emits only while the clutch is engaged; the
    /// step is rate limited and then cut back until its TCP is admissible.
    pub fn command_tick(&mut self, dt: f64, now_us: u64) -> Option<MotionCmd> {
        if !self.is_engaged() {
            return None;
        }
        let model = &self.cfg.arm;
        let prev = JointState::new(self.last_cmd.clone());
        let next = rate_limit_within(model, &prev, &JointState::new(self.target_q.clone()), dt)
            .expect("lengths match the model")
            .q;
        let mut chosen = None;
        let mut gated = false;
        if next == self.last_cmd {
            chosen = Some(next);
        } else {
            let mut scale = 1.0;
            for _ in 0..=GATE_BISECTIONS {
                let cand: Vec<f64> = self
                    .last_cmd
                    .iter()
                    .zip(&next)
                    .map(|(a, b)| if scale == 1.0 { *b } else { a + (b - a) * scale })
                    .collect();
                if self.admissible_q(&cand) {
                    chosen = Some(cand);
                    break;
                }
                gated = true;
                scale *= 0.5;
            }
        }
        self.gate_held = chosen.is_none();
        let q = chosen.unwrap_or_else(|| self.last_cmd.clone());
        debug_assert!(self.cfg.arm.within_limits(&q));
        self.last_cmd = q.clone();
        self.cmd_seq = self.cmd_seq.wrapping_add(1);
        if let Some(p) = self.probe.as_mut() {
            p.first_seq.get_or_insert(self.cmd_seq);
        }
        let s = self.session.as_mut().expect("engaged implies a session");
        s.commands_emitted += 1;
        if gated {
            s.gated_commands += 1;
        }
        Some(MotionCmd {
            seq: self.cmd_seq,
            send_time: now_us,
            q_target: q.try_into().expect("6 joints"),
        })
    }

    /// Arm feedback arrived.
    pub fn on_feedback(&mut self, fb: &FeedbackMsg) {
        self.q_actual = fb.q_actual.to_vec();
        if let Some(p) = self.probe {
            // Feedback from before the engage's first command says nothing
            // about the engage.
            if p.first_seq.is_some_and(|s| fb.seq_echo >= s) {
                let d = (self.fk(&self.q_actual).position() - p.tcp).norm();
                eprintln!("PROBE fb seq_echo {} cmd_seq now {} d {}", fb.seq_echo, self.cmd_seq, d);
                eprintln!("PROBE fb seq_echo {} cmd_seq now {} d {}", fb.seq_echo, self.cmd_seq, d);
                if let Some(s) = self.session.as_mut() {
                    s.engage_jumps.push(d);
                }
                self.probe = None;
            }
        }
    }

    pub fn record_latency(&mut self, stage: Stage, us: u64) {
        if let Some(s) = self.session.as_mut() {
            s.latency.record(stage, us);
        }
    }

    /// Command stream has stopped, the arm has reached it, and the arm has
    /// reported back since the last engage.
    pub fn settled(&self) -> bool {
        let stream_idle = self.last_cmd == self.target_q || self.gate_held;
        let arm_there = self
            .q_actual
            .iter()
            .zip(&self.last_cmd)
            .all(|(a, b)| (a - b).abs() <= 1e-9);
        stream_idle && arm_there && self.probe.is_none()
    }

    pub fn state_msg(&self, server_time: u64) -> StateMsg {
        let s = self.session.as_ref();
        StateMsg {
            server_time,
            ack_seq: self.ack_seq,
            q: self.q_actual.clone().try_into().expect("6 joints"),
            tcp: self.fk(&self.q_actual),
            clutch_engaged: self.is_engaged(),
            clamped: self.clamped,
            lock_orientation: self.lock_orientation,
            degraded: self.degraded,
            estop: self.estop,
            settled: self.settled(),
            task_step: s.map_or(TaskStep::Connect, |s| s.task.step()),
            tester_phase: self.tester_phase,
            last_yield: s.and_then(|s| s.last_yield),
            cycles: s.map_or(0, |s| s.task.cycle_log().len() as u32),
            degraded_events: s.map_or(0, |s| s.degraded_events.min(u32::MAX as u64) as u32),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{LineSession, SpecimenModel, Tester};
    use crate::kinematics::reference;
    use crate::protocol::{Buttons, SessionHello, SessionReply, PROTOCOL_VERSION};

    fn core() -> (ServerCore, Token) {
        let mut c = ServerCore::new(ServerConfig::bare(reference::ur5e()));
        let d = c.handshake(
            &HandshakeRequest::Hello(SessionHello {
                protocol_version: PROTOCOL_VERSION,
                operator_id: "t".into(),
            }),
            0,
        );
        let SessionReply::Accept { token, .. } = d.reply().clone() else {
            panic!("{d:?}")
        };
        (c, token)
    }

    fn wp(seq: u32, pose: Pose, clutch: bool) -> WaypointMsg {
        WaypointMsg {
            seq,
            send_time: seq as u64 * 16_667,
            pose,
            clutch,
            gripper: Gripper::Hold,
            buttons: Buttons(0),
        }
    }

    /// Feedback echoing the latest command.
    fn feed_back(c: &mut ServerCore, q: &[f64]) {
        c.on_feedback(&FeedbackMsg {
            seq_echo: c.cmd_seq,
            q_actual: q.try_into().unwrap(),
            arm_time: 0,
        });
    }

    #[test]
    fn percentile_nearest_rank() {
        assert_eq!(percentile(&[3, 1, 2], 50.0), Some(2));
        assert_eq!(percentile(&[], 50.0), None);
        assert_eq!(percentile(&[5], 99.0), Some(5));
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 95.0), Some(95));
    }

    #[test]
    fn empty_report_is_valid() {
        let r = metrics_report(None);
        assert_eq!(r.latency_us.len(), 4);
        assert!(r.latency_us.values().all(|s| s.count == 0 && s.p50.is_none()));
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn disengaged_emits_nothing() {
        let (mut c, t) = core();
        c.on_waypoint(&t, &wp(1, Pose::identity(), false), &mut NoDevice).unwrap();
        assert!(c.command_tick(0.004, 0).is_none());
    }

    #[test]
    fn zero_motion_holds_origin_joints() {
        let (mut c, t) = core();
        let home = c.config().arm.home().to_vec();
        for seq in 1..10 {
            c.on_waypoint(&t, &wp(seq, Pose::translation(0.3, 0.2, 0.1), true), &mut NoDevice)
                .unwrap();
            let cmd = c.command_tick(0.004, 0).unwrap();
            assert_eq!(cmd.q_target.to_vec(), home);
        }
    }

    #[test]
    fn stale_waypoints_dropped() {
        let (mut c, t) = core();
        assert!(c.on_waypoint(&t, &wp(2, Pose::identity(), false), &mut NoDevice).is_some());
        assert!(c.on_waypoint(&t, &wp(2, Pose::identity(), false), &mut NoDevice).is_none());
        assert!(c.on_waypoint(&t, &wp(1, Pose::identity(), false), &mut NoDevice).is_none());
        assert_eq!(c.metrics().dropped_waypoints, 2);
        assert!(c.on_waypoint(&Token([0; 16]), &wp(9, Pose::identity(), false), &mut NoDevice).is_none());
    }

    #[test]
    fn tracks_operator_translation() {
        let (mut c, t) = core();
        let start = *c.target_pose();
        c.on_waypoint(&t, &wp(1, Pose::identity(), true), &mut NoDevice).unwrap();
        // Operator moves 5 cm; hold the pose until the filter settles.
        for seq in 2..200 {
            c.on_waypoint(&t, &wp(seq, Pose::translation(0.0, 0.0, 0.05), true), &mut NoDevice)
                .unwrap();
        }
        for _ in 0..500 {
            let cmd = c.command_tick(0.004, 0).unwrap();
            feed_back(&mut c, &cmd.q_target);
        }
        let tcp = forward(&c.config().arm, c.last_command()).unwrap();
        // The pointing-down tool frame maps operator +z onto base -z.
        let expected = start.position() + start.rotation_matrix() * Vector3::new(0.0, 0.0, 0.05);
        assert!((tcp.position() - expected).norm() < 1e-4, "{:?}", tcp.position() - expected);
        assert!(c.settled());
    }

    #[test]
    fn reengage_does_not_jump() {
        let (mut c, t) = core();
        let mut seq = 0;
        let mut next = || {
            seq += 1;
            seq
        };
        for round in 0..3 {
            let op = Pose::translation(0.1 * round as f64, 0.0, 0.0);
            c.on_waypoint(&t, &wp(next(), op, true), &mut NoDevice).unwrap();
            // The runtime emits one command per waypoint, engage included.
            let cmd = c.command_tick(0.004, 0).unwrap();
            feed_back(&mut c, &cmd.q_target);
            for _ in 0..60 {
                c.on_waypoint(&t, &wp(next(), compose_y(op, 0.03), true), &mut NoDevice)
                    .unwrap();
                for _ in 0..4 {
                    let cmd = c.command_tick(0.004, 0).unwrap();
                    feed_back(&mut c, &cmd.q_target);
                }
            }
            for _ in 0..300 {
                let cmd = c.command_tick(0.004, 0).unwrap();
                feed_back(&mut c, &cmd.q_target);
            }
            c.on_waypoint(&t, &wp(next(), op, false), &mut NoDevice).unwrap();
        }
        let jumps = &c.session().unwrap().engage_jumps;
        assert_eq!(jumps.len(), 3);
        assert!(jumps.iter().all(|j| *j <= 1e-6), "{jumps:?}");
    }

    fn compose_y(p: Pose, dy: f64) -> Pose {
        p.with_position(p.position() + Vector3::new(0.0, dy, 0.0))
    }

    #[test]
    fn resume_forces_clutch_off() {
        let (mut c, t) = core();
        c.on_waypoint(&t, &wp(1, Pose::identity(), true), &mut NoDevice).unwrap();
        assert!(c.is_engaged());
        c.disconnect(&t, 10);
        let d = c.handshake(
            &HandshakeRequest::Resume(crate::protocol::SessionResume {
                protocol_version: PROTOCOL_VERSION,
                token: t,
            }),
            20,
        );
        assert!(matches!(d, SessionDecision::Reattached(_)));
        assert!(!c.is_engaged());
        assert!(c.command_tick(0.004, 0).is_none());
    }

    #[test]
    fn full_event_sequence_logs_a_cycle() {
        let mut cfg = ServerConfig::bare(reference::ur5e());
        let home = forward(&cfg.arm, cfg.arm.home()).unwrap().position();
        // Reload zone around home, tester zone 10 cm along base +y.
        cfg.zones.reload = Zone {
            min: (home - Vector3::repeat(0.02)).into(),
            max: (home + Vector3::repeat(0.02)).into(),
        };
        let tester = home + Vector3::new(0.0, 0.1, 0.0);
        cfg.zones.tester = Zone {
            min: (tester - Vector3::repeat(0.02)).into(),
            max: (tester + Vector3::repeat(0.02)).into(),
        };
        let mut c = ServerCore::new(cfg);
        let mut dev = LineSession::new(Tester::new(SpecimenModel { noise_sigma: 0.0, ..Default::default() }, 1_000_000).unwrap());
        let d = c.handshake(
            &HandshakeRequest::Hello(SessionHello { protocol_version: PROTOCOL_VERSION, operator_id: "x".into() }),
            0,
        );
        let SessionReply::Accept { token, .. } = d.reply().clone() else { panic!() };
        let base = c.target_pose().orientation();
        // Operator offset that moves the robot +10 cm along base y.
        let to_tester = base.inverse() * Vector3::new(0.0, 0.1, 0.0);
        let mut seq = 0u32;
        let mut events = Vec::new();
        let mut send = |c: &mut ServerCore, dev: &mut LineSession, p: Vector3<f64>, g: Gripper, b: u8, t_us: u64| {
            seq += 1;
            let w = WaypointMsg {
                seq,
                send_time: t_us,
                pose: Pose::translation(p.x, p.y, p.z),
                clutch: true,
                gripper: g,
                buttons: Buttons(b),
            };
            let out = c.on_waypoint(&token, &w, dev).unwrap();
            events.extend(out.event);
        };
        let zero = Vector3::zeros();
        send(&mut c, &mut dev, zero, Gripper::Open, 0, 1_000_000);
        send(&mut c, &mut dev, zero, Gripper::Close, 0, 2_000_000);
        for k in 0..80u64 {
            send(&mut c, &mut dev, to_tester, Gripper::Hold, 0, 3_000_000 + k * 16_667);
        }
        send(&mut c, &mut dev, to_tester, Gripper::Open, 0, 5_000_000);
        send(&mut c, &mut dev, to_tester, Gripper::Hold, Buttons::DEVICE_START, 5_100_000);
        send(&mut c, &mut dev, to_tester, Gripper::Hold, 0, 6_200_000);
        send(&mut c, &mut dev, to_tester, Gripper::Hold, Buttons::DEVICE_RESET, 6_300_000);
        for k in 0..80u64 {
            send(&mut c, &mut dev, zero, Gripper::Hold, 0, 7_000_000 + k * 16_667);
        }
        assert_eq!(
            events,
            vec![
                TaskEvent::Connected,
                TaskEvent::PickDetected,
                TaskEvent::PlaceDetected,
                TaskEvent::TestComplete,
                TaskEvent::Returned
            ]
        );
        let cycles = c.metrics().cycles;
        assert_eq!(cycles.len(), 1);
        assert!(cycles[0].seconds > 6.0 && cycles[0].seconds < 8.5, "{cycles:?}");
        assert_eq!(c.session().unwrap().last_yield, Some(500.0));
        assert_eq!(dev.tester.results().len(), 1);
    }

    #[test]
    fn config_rejects_contradictory_fences() {
        let text = r#"
arm = "unused"
[zones.reload]
min = [0, 0, 0]
max = [1, 1, 1]
[zones.tester]
min = [0, 0, 0]
max = [1, 1, 1]
[[fences]]
name = "floor"
kind = "half_space"
normal = [0, 0, 1]
offset = 0.5
[[fences]]
name = "ceiling"
kind = "half_space"
normal = [0, 0, -1]
offset = -0.4
"#;
        let err = ServerConfig::from_toml_with_arm(text, reference::ur5e()).unwrap_err();
        assert!(err.to_string().contains("violates fence"), "{err}");
    }

    #[test]
    fn config_rejects_unknown_keys_and_kinds() {
        let base = "arm = \"x\"\n[zones.reload]\nmin=[0,0,0]\nmax=[1,1,1]\n[zones.tester]\nmin=[0,0,0]\nmax=[1,1,1]\n";
        assert!(ServerConfig::from_toml_with_arm(&format!("{base}bogus = 1\n"), reference::ur5e()).is_err());
        let bad_kind = format!("{base}[[fences]]\nname=\"a\"\nkind=\"sphere\"\n");
        assert!(ServerConfig::from_toml_with_arm(&bad_kind, reference::ur5e()).is_err());
        assert!(ServerConfig::from_toml_with_arm(base, reference::ur5e()).is_ok());
    }
}

#[cfg(test)]
mod shipped_config {
    use super::*;

    #[test]
    fn shipped_server_config_loads() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config");
        let cfg = ServerConfig::from_file(dir.join("server.toml")).unwrap();
        assert_eq!(cfg.fences.len(), 3);
        assert_eq!(cfg.ports.stream, 6040);
        assert_eq!(cfg.arm.name, "ur5e");
    }

    #[test]
    fn model_document_reproduces_fk() {
        use crate::kinematics::DhRow;
        let cfg = ServerConfig::from_file(
            Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/server.toml"),
        )
        .unwrap();
        let doc = model_document(&cfg);
        assert_eq!(doc["fences"].as_array().unwrap().len(), 3);
        assert_eq!(doc["fences"][2]["kind"], "keep_out");
        assert_eq!(doc["zones"]["tester"]["min"][2], 0.19);
        // A client composing the served DH table lands on the server's FK.
        let q = [0.3, -1.2, 1.1, -0.4, 0.7, 0.2];
        let mut pose = Pose::identity();
        for (j, qi) in doc["joints"].as_array().unwrap().iter().zip(q) {
            let f = |k: &str| j[k].as_f64().unwrap();
            let row = DhRow::new(f("a"), f("alpha"), f("d"), f("theta_offset"));
            pose = crate::geometry::compose(&pose, &row.transform(qi));
        }
        let t = &doc["tool_offset"];
        let v = |k: &str, i: usize| t[k][i].as_f64().unwrap();
        let tool = Pose::try_from_raw(
            [v("position", 0), v("position", 1), v("position", 2)],
            [v("orientation", 0), v("orientation", 1), v("orientation", 2), v("orientation", 3)],
        )
        .unwrap();
        pose = crate::geometry::compose(&pose, &tool);
        let fk = forward(&cfg.arm, &q).unwrap();
        assert!(pose.approx_eq(&fk, 1e-12, 1e-12));
    }
}
