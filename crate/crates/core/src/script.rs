//! Replay scripts: timestamped operator waypoints plus the task events they
//! are expected to trigger, and the generator for the golden lab cycle.

use crate::geometry::Pose;
use crate::ik::{self, IkRequest};
use crate::kinematics::forward;
use crate::motion::{admissible, filter_step, operator_pose_for, ClutchState, FilterState};
use crate::protocol::{Buttons, Gripper, WaypointMsg};
use crate::server::ServerConfig;
use crate::task::TaskEvent;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::io;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("script csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("script io: {0}")]
    Io(#[from] io::Error),
    #[error("row {row}: {msg}")]
    Invalid { row: usize, msg: String },
    #[error("golden path: {0}")]
    Unreachable(String),
}

/// One CSV row; column names are the header of the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptRow {
    pub time_us: u64,
    pub seq: u32,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub clutch: u8,
    pub gripper: Gripper,
    pub buttons: u8,
    /// Event this row is expected to trigger, if any.
    #[serde(default, with = "event_column")]
    pub expect: Option<TaskEvent>,
}

mod event_column {
    use crate::task::TaskEvent;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(e: &Option<TaskEvent>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(e.map_or("", |e| e.as_str()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<TaskEvent>, D::Error> {
        let s = String::deserialize(d)?;
        if s.is_empty() {
            return Ok(None);
        }
        TaskEvent::parse(&s)
            .map(Some)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown event `{s}`")))
    }
}

impl ScriptRow {
    pub fn from_waypoint(wp: &WaypointMsg, expect: Option<TaskEvent>) -> Self {
        let [px, py, pz] = wp.pose.xyz();
        let [qw, qx, qy, qz] = wp.pose.wxyz();
        Self {
            time_us: wp.send_time,
            seq: wp.seq,
            px,
            py,
            pz,
            qw,
            qx,
            qy,
            qz,
            clutch: wp.clutch as u8,
            gripper: wp.gripper,
            buttons: wp.buttons.0,
            expect,
        }
    }

    pub fn waypoint(&self) -> Result<WaypointMsg, String> {
        let pose = Pose::try_from_raw([self.px, self.py, self.pz], [self.qw, self.qx, self.qy, self.qz])
            .or_else(|_| {
                // Six printed digits are not exactly unit; renormalize small drift.
                let n = (self.qw.powi(2) + self.qx.powi(2) + self.qy.powi(2) + self.qz.powi(2)).sqrt();
                if (n - 1.0).abs() > 1e-6 {
                    return Err(format!("orientation norm {n} is not unit"));
                }
                Pose::try_from_raw(
                    [self.px, self.py, self.pz],
                    [self.qw / n, self.qx / n, self.qy / n, self.qz / n],
                )
                .map_err(|e| e.to_string())
            })?;
        if self.clutch > 1 {
            return Err("clutch must be 0 or 1".into());
        }
        if self.buttons & !0b111 != 0 {
            return Err("unknown button bits".into());
        }
        Ok(WaypointMsg {
            seq: self.seq,
            send_time: self.time_us,
            pose,
            clutch: self.clutch == 1,
            gripper: self.gripper,
            buttons: Buttons(self.buttons),
        })
    }
}

/// An ordered, validated script.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayScript {
    rows: Vec<ScriptRow>,
}

impl ReplayScript {
    /// Timestamps must be non-decreasing and sequence numbers increasing.
    pub fn new(rows: Vec<ScriptRow>) -> Result<Self, ScriptError> {
        for (i, r) in rows.iter().enumerate() {
            r.waypoint().map_err(|msg| ScriptError::Invalid { row: i + 1, msg })?;
            if let Some(prev) = i.checked_sub(1).map(|j| &rows[j]) {
                if r.time_us < prev.time_us {
                    return Err(ScriptError::Invalid {
                        row: i + 1,
                        msg: "timestamp goes backwards".into(),
                    });
                }
                if r.seq <= prev.seq {
                    return Err(ScriptError::Invalid {
                        row: i + 1,
                        msg: "sequence number does not increase".into(),
                    });
                }
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[ScriptRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn waypoints(&self) -> impl Iterator<Item = WaypointMsg> + '_ {
        self.rows.iter().map(|r| r.waypoint().expect("validated at construction"))
    }

    pub fn expected_events(&self) -> Vec<TaskEvent> {
        self.rows.iter().filter_map(|r| r.expect).collect()
    }

    pub fn duration_us(&self) -> u64 {
        match (self.rows.first(), self.rows.last()) {
            (Some(a), Some(b)) => b.time_us - a.time_us,
            _ => 0,
        }
    }

    pub fn from_reader(r: impl io::Read) -> Result<Self, ScriptError> {
        let rows = csv::Reader::from_reader(r)
            .deserialize()
            .collect::<Result<Vec<ScriptRow>, _>>()?;
        Self::new(rows)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ScriptError> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn write(&self, w: impl io::Write) -> Result<(), ScriptError> {
        let mut w = csv::Writer::from_writer(w);
        if self.rows.is_empty() {
            w.write_record([
                "time_us", "seq", "px", "py", "pz", "qw", "qx", "qy", "qz", "clutch", "gripper",
                "buttons", "expect",
            ])?;
        }
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_file(&self, path: impl AsRef<Path>) -> Result<(), ScriptError> {
        self.write(io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Waypoint locations of the golden cycle, robot base frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellLayout {
    /// Grasp point inside the reload zone.
    pub reload: Vector3<f64>,
    /// Release point inside the tester zone.
    pub tester: Vector3<f64>,
    /// Transit height above both.
    pub clearance_z: f64,
}

impl CellLayout {
    pub fn from_config(cfg: &ServerConfig) -> Self {
        let reload = cfg.zones.reload.center();
        let tester = cfg.zones.tester.center();
        Self {
            reload,
            tester,
            clearance_z: cfg.zones.tester.max[2].max(reload.z) + 0.03,
        }
    }
}

/// Pacing of the golden cycle, seconds and m/s.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pacing {
    pub waypoint_hz: f64,
    pub transit_speed: f64,
    pub approach_speed: f64,
    pub dwell: f64,
    /// Time between pressing START and RESET; longer than the test.
    pub test_wait: f64,
    /// Target cycle length; the released rest after each return absorbs
    /// the remainder.
    pub cycle: f64,
}

impl Default for Pacing {
    fn default() -> Self {
        Self {
            waypoint_hz: 60.0,
            transit_speed: 0.08,
            approach_speed: 0.04,
            dwell: 1.5,
            test_wait: 10.0,
            cycle: 70.0,
        }
    }
}

/// A generated script and the robot target planned for each row.
#[derive(Clone, Debug)]
pub struct GoldenScript {
    pub script: ReplayScript,
    pub robot_targets: Vec<Pose>,
}

struct Builder<'a> {
    cfg: &'a ServerConfig,
    pacing: Pacing,
    rows: Vec<ScriptRow>,
    targets: Vec<Pose>,
    /// Targets after the server's smoothing filter; what zone checks see.
    filtered: Vec<Pose>,
    filter: FilterState,
    frame: u64,
    robot: Pose,
    operator: Pose,
    clutch: Option<ClutchState>,
    gripper: Gripper,
    pending_buttons: u8,
    pending_expect: Option<TaskEvent>,
}

impl Builder<'_> {
    fn now_us(&self) -> u64 {
        (self.frame as f64 * 1e6 / self.pacing.waypoint_hz).round() as u64
    }

    fn emit(&mut self) {
        if let Some(c) = &self.clutch {
            self.operator = operator_pose_for(c, &self.cfg.mapping, &self.robot)
                .expect("engaged clutch");
        }
        let wp = WaypointMsg {
            seq: self.frame as u32 + 1,
            send_time: self.now_us(),
            pose: self.operator,
            clutch: self.clutch.is_some(),
            gripper: self.gripper,
            buttons: Buttons(std::mem::take(&mut self.pending_buttons)),
        };
        self.rows.push(ScriptRow::from_waypoint(&wp, self.pending_expect.take()));
        self.targets.push(self.robot);
        let seen = match self.clutch {
            Some(_) => filter_step(&mut self.filter, &self.robot),
            None => self.filtered.last().copied().unwrap_or(self.robot),
        };
        self.filtered.push(seen);
        self.frame += 1;
    }

    fn frames_for(&self, seconds: f64) -> u64 {
        (seconds * self.pacing.waypoint_hz).round().max(1.0) as u64
    }

    fn hold(&mut self, seconds: f64) {
        for _ in 0..self.frames_for(seconds) {
            self.emit();
        }
    }

    /// Minimum-jerk straight line at the given average speed.
    fn move_to(&mut self, goal: Vector3<f64>, speed: f64) {
        assert!(self.clutch.is_some(), "moves are made with the clutch held");
        let start = self.robot.position();
        let n = self.frames_for((goal - start).norm() / speed);
        for k in 1..=n {
            let s = k as f64 / n as f64;
            let blend = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
            self.robot = self.robot.with_position(start.lerp(&goal, blend));
            self.emit();
        }
    }

    fn engage(&mut self) {
        let mut c = ClutchState::released();
        c.engage(self.operator, self.robot);
        self.clutch = Some(c);
        self.filter.reset();
    }

    /// Lets go of the clutch and brings the hand back to rest over
    /// `seconds`, as an operator re-centering their hand would.
    fn release(&mut self, seconds: f64) {
        self.clutch = None;
        let start = self.operator;
        let n = self.frames_for(seconds);
        for k in 1..=n {
            let s = k as f64 / n as f64;
            self.operator = Pose::from_parts(
                start.position().lerp(&Vector3::zeros(), s),
                crate::geometry::slerp(&start.orientation(), &Pose::identity().orientation(), s),
            );
            self.emit();
        }
    }

    fn set_gripper(&mut self, g: Gripper, expect: Option<TaskEvent>) {
        self.gripper = g;
        self.pending_expect = expect;
        self.emit();
    }

    fn press(&mut self, button: u8, expect: Option<TaskEvent>) {
        self.pending_buttons = button;
        self.pending_expect = expect;
        self.emit();
    }
}

/// Builds the scripted lab cycle: pick at the reload zone, place into the
/// tester from above, run the test with the clutch released, then return.
/// Each cycle has two engage/release pairs. Every planned target is checked
/// for fence admissibility and IK reachability.
pub fn golden_script(cfg: &ServerConfig, cycles: u32, pacing: Pacing) -> Result<GoldenScript, ScriptError> {
    // Cycle content is fixed, so measure it once unpadded and then size the
    // released rest inside each cycle to hit the target length.
    let unpadded = build_cycles(cfg, cycles, pacing, &vec![0.0; cycles as usize])?;
    let returns = event_times(&unpadded.script, TaskEvent::Returned);
    let mut prev = event_times(&unpadded.script, TaskEvent::Connected).first().copied().unwrap_or(0.0);
    let pads: Vec<f64> = returns
        .iter()
        .map(|&r| {
            let pad = (pacing.cycle - (r - prev)).max(0.0);
            prev = r;
            pad
        })
        .collect();
    let golden = build_cycles(cfg, cycles, pacing, &pads)?;
    check_reachable(cfg, &golden.robot_targets)?;
    Ok(golden)
}

fn event_times(script: &ReplayScript, e: TaskEvent) -> Vec<f64> {
    script
        .rows()
        .iter()
        .filter(|r| r.expect == Some(e))
        .map(|r| r.time_us as f64 / 1e6)
        .collect()
}

fn build_cycles(cfg: &ServerConfig, cycles: u32, p: Pacing, pads: &[f64]) -> Result<GoldenScript, ScriptError> {
    let home = forward(&cfg.arm, cfg.arm.home()).map_err(|e| ScriptError::Unreachable(e.to_string()))?;
    let layout = CellLayout::from_config(cfg);
    let mut b = Builder {
        cfg,
        pacing: p,
        rows: Vec::new(),
        targets: Vec::new(),
        filtered: Vec::new(),
        filter: cfg.filter,
        frame: 0,
        robot: home,
        operator: Pose::identity(),
        clutch: None,
        gripper: Gripper::Open,
        pending_buttons: 0,
        pending_expect: Some(TaskEvent::Connected),
    };
    let above = |p: Vector3<f64>| Vector3::new(p.x, p.y, layout.clearance_z);
    b.hold(p.dwell);
    for k in 0..cycles as usize {
        b.hold(pads[k]);
        b.engage();
        b.hold(p.dwell);
        if k == 0 {
            b.move_to(above(layout.reload), p.transit_speed);
            b.move_to(layout.reload, p.approach_speed);
            b.hold(p.dwell);
        }
        b.set_gripper(Gripper::Close, Some(TaskEvent::PickDetected));
        b.hold(p.dwell);
        b.move_to(above(layout.reload), p.approach_speed);
        b.move_to(above(layout.tester), p.transit_speed);
        b.move_to(layout.tester, p.approach_speed);
        b.hold(p.dwell);
        b.set_gripper(Gripper::Open, Some(TaskEvent::PlaceDetected));
        b.hold(p.dwell);
        b.release(p.dwell);
        b.press(Buttons::DEVICE_START, None);
        b.hold(p.test_wait);
        // The completion is observed by polling before this row.
        b.press(Buttons::DEVICE_RESET, Some(TaskEvent::TestComplete));
        b.hold(p.dwell);
        b.engage();
        b.hold(p.dwell);
        b.move_to(above(layout.tester), p.approach_speed);
        b.move_to(above(layout.reload), p.transit_speed);
        let before = b.rows.len();
        b.move_to(layout.reload, p.approach_speed);
        let entry = (before..b.rows.len())
            .find(|&i| cfg.zones.reload.contains(&b.filtered[i].position()))
            .ok_or_else(|| ScriptError::Unreachable("return path never enters the reload zone".into()))?;
        b.rows[entry].expect = Some(TaskEvent::Returned);
        b.hold(p.dwell);
        b.release(p.dwell);
    }
    b.hold(p.dwell);
    Ok(GoldenScript {
        script: ReplayScript::new(b.rows)?,
        robot_targets: b.targets,
    })
}

fn check_reachable(cfg: &ServerConfig, targets: &[Pose]) -> Result<(), ScriptError> {
    let mut seed = cfg.arm.home().to_vec();
    for (i, t) in targets.iter().enumerate() {
        if !admissible(&cfg.fences, &t.position(), 0.0) {
            return Err(ScriptError::Unreachable(format!("row {} target leaves the fenced region", i + 1)));
        }
        if i % 15 != 0 && i + 1 != targets.len() {
            continue;
        }
        let req = IkRequest::new(*t, seed.clone())
            .with_budget(std::time::Duration::from_millis(50))
            .with_rng_seed(i as u64);
        match ik::solve(&cfg.arm, &req) {
            Ok(s) if s.converged() => seed = s.q.q,
            _ => return Err(ScriptError::Unreachable(format!("row {} target has no IK solution", i + 1))),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shipped() -> ServerConfig {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config");
        ServerConfig::from_file(dir.join("server.toml")).unwrap()
    }

    #[test]
    fn csv_round_trip() {
        let g = golden_script(&shipped(), 1, Pacing::default()).unwrap();
        let mut buf = Vec::new();
        g.script.write(&mut buf).unwrap();
        let back = ReplayScript::from_reader(buf.as_slice()).unwrap();
        assert_eq!(back.len(), g.script.len());
        assert_eq!(back.expected_events(), g.script.expected_events());
        for (a, b) in back.waypoints().zip(g.script.waypoints()) {
            assert!(a.pose.approx_eq(&b.pose, 1e-12, 1e-12));
        }
    }

    #[test]
    fn empty_script_has_header_and_round_trips() {
        let mut buf = Vec::new();
        ReplayScript::default().write(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("time_us,seq,"));
        assert!(ReplayScript::from_reader(buf.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn backwards_time_rejected() {
        let g = golden_script(&shipped(), 1, Pacing::default()).unwrap();
        let mut rows = g.script.rows()[..3].to_vec();
        rows[2].time_us = rows[1].time_us - 1;
        assert!(matches!(ReplayScript::new(rows), Err(ScriptError::Invalid { row: 3, .. })));
    }

    #[test]
    fn golden_event_order_and_pacing() {
        let g = golden_script(&shipped(), 2, Pacing::default()).unwrap();
        use TaskEvent::*;
        assert_eq!(
            g.script.expected_events(),
            vec![Connected, PickDetected, PlaceDetected, TestComplete, Returned, PickDetected, PlaceDetected, TestComplete, Returned]
        );
        let at = |e: TaskEvent, n: usize| {
            g.script.rows().iter().filter(|r| r.expect == Some(e)).nth(n).unwrap().time_us as f64 / 1e6
        };
        let first = at(Returned, 0) - at(Connected, 0);
        let second = at(Returned, 1) - at(Returned, 0);
        assert!((first - 70.0).abs() < 0.05, "{first}");
        assert!((second - 70.0).abs() < 0.05, "{second}");
        let engages = g
            .script
            .rows()
            .windows(2)
            .filter(|w| w[0].clutch == 0 && w[1].clutch == 1)
            .count();
        assert_eq!(engages, 4);
    }
}
