//! Single-threaded replay of a script through the server core, the arm
//! simulator and the tester emulator on one simulated clock.

use crate::device::{LineSession, ResultRow, SpecimenModel, Tester, DEFAULT_TEST_DURATION_US};
use crate::geometry::Pose;
use crate::kinematics::forward;
use crate::protocol::{HandshakeRequest, MotionCmd, SessionHello, SessionReply, StateMsg, PROTOCOL_VERSION};
use crate::script::ReplayScript;
use crate::server::{MetricsReport, ServerConfig, ServerCore, Stage};
use crate::sim::{SimConfig, Simulator, TraceRow};
use crate::task::TaskEvent;
use std::collections::VecDeque;

#[derive(Clone, Debug)]
pub struct LockstepOptions {
    pub sim: SimConfig,
    pub specimen: SpecimenModel,
    pub test_duration_us: u64,
    /// Before a clutch release, keep ticking until the arm has settled.
    pub settle_before_release: bool,
    pub max_settle_us: u64,
}

impl Default for LockstepOptions {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            specimen: SpecimenModel::default(),
            test_duration_us: DEFAULT_TEST_DURATION_US,
            settle_before_release: true,
            max_settle_us: 5_000_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LockstepRun {
    /// (session time µs, event)
    pub events: Vec<(u64, TaskEvent)>,
    /// State after each accepted waypoint.
    pub states: Vec<StateMsg>,
    /// (host time µs, command)
    pub commands: Vec<(u64, MotionCmd)>,
    pub trace: Vec<TraceRow>,
    pub metrics: MetricsReport,
    pub results: Vec<ResultRow>,
    pub final_tcp: Pose,
    /// Host time each script row was delivered at.
    pub delivered_at: Vec<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum LockstepError {
    #[error("handshake rejected: {0:?}")]
    Rejected(SessionReply),
    #[error("{0}")]
    Setup(String),
}

pub fn run(cfg: ServerConfig, script: &ReplayScript, opts: &LockstepOptions) -> Result<LockstepRun, LockstepError> {
    let model = cfg.arm.clone();
    let command_hz = cfg.command_hz;
    let mut core = ServerCore::new(cfg);
    let mut sim = Simulator::new(model.clone(), opts.sim.clone()).map_err(|e| LockstepError::Setup(e.to_string()))?;
    let tester = Tester::new(opts.specimen, opts.test_duration_us).map_err(|e| LockstepError::Setup(e.to_string()))?;
    let mut device = LineSession::new(tester);

    let token = match core
        .handshake(
            &HandshakeRequest::Hello(SessionHello {
                protocol_version: PROTOCOL_VERSION,
                operator_id: "lockstep".into(),
            }),
            0,
        )
        .reply()
        .clone()
    {
        SessionReply::Accept { token, .. } => token,
        other => return Err(LockstepError::Rejected(other)),
    };

    let mut h = Harness {
        core: &mut core,
        sim: &mut sim,
        command_hz,
        last_emit: None,
        in_flight: VecDeque::new(),
        commands: Vec::new(),
        trace: Vec::new(),
    };
    let mut events = Vec::new();
    let mut states = Vec::new();
    let mut delivered_at = Vec::with_capacity(script.len());
    let mut offset = 0u64;
    for wp in script.waypoints() {
        h.advance_to(wp.send_time + offset);
        if opts.settle_before_release && !wp.clutch && h.core.is_engaged() {
            let start = h.sim.state().clock;
            while !h.core.settled() && h.sim.state().clock - start < opts.max_settle_us {
                h.tick();
            }
            offset += h.sim.state().clock - start;
        }
        let host_now = h.sim.state().clock;
        delivered_at.push(host_now);
        if let Some(out) = h.core.on_waypoint(&token, &wp, &mut device) {
            if let Some(us) = out.ik_us {
                h.core.record_latency(Stage::Ik, us);
            }
            events.extend(out.event.map(|e| (wp.send_time, e)));
            states.push(out.state);
            h.emit(host_now);
        }
    }
    h.tick();
    let commands = std::mem::take(&mut h.commands);
    let trace = std::mem::take(&mut h.trace);
    let final_tcp = forward(&model, &sim.state().q_actual.q).expect("6 joints");
    Ok(LockstepRun {
        events,
        states,
        commands,
        trace,
        metrics: core.metrics(),
        results: device.tester.results().to_vec(),
        final_tcp,
        delivered_at,
    })
}

struct Harness<'a> {
    core: &'a mut ServerCore,
    sim: &'a mut Simulator,
    command_hz: f64,
    last_emit: Option<u64>,
    /// (seq, emit time) awaiting an echo.
    in_flight: VecDeque<(u32, u64)>,
    commands: Vec<(u64, MotionCmd)>,
    trace: Vec<TraceRow>,
}

impl Harness<'_> {
    fn emit(&mut self, now: u64) {
        let period = 1.0 / self.command_hz;
        let dt = self
            .last_emit
            .map_or(period, |t| (now.saturating_sub(t) as f64 / 1e6).min(2.0 * period));
        if dt <= 0.0 {
            return;
        }
        if let Some(cmd) = self.core.command_tick(dt, now) {
            self.last_emit = Some(now);
            self.in_flight.push_back((cmd.seq, now));
            self.sim.receive(cmd.clone(), now);
            self.commands.push((now, cmd));
        }
    }

    fn tick(&mut self) {
        let now = self.sim.state().clock;
        self.emit(now);
        for fb in self.sim.tick() {
            let arrived = self.sim.state().clock;
            while self.in_flight.front().is_some_and(|(s, _)| *s <= fb.seq_echo) {
                let (_, sent) = self.in_flight.pop_front().expect("checked");
                self.core.record_latency(Stage::Execute, arrived - sent);
            }
            self.core.on_feedback(&fb);
        }
        self.trace.push(self.sim.trace_row());
    }

    /// Ticks until the simulator clock reaches `host_us`.
    fn advance_to(&mut self, host_us: u64) {
        while self.sim.state().clock < host_us {
            self.tick();
        }
    }
}
