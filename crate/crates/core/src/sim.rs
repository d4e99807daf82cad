//! Kinematic arm simulator behind the datagram protocol.

use crate::kinematics::{ArmModel, JointState};
use crate::motion::rate_limit_within;
use crate::protocol::{FeedbackMsg, MotionCmd};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub tick_rate: f64,
    pub delay_ms: f64,
    pub jitter_ms: f64,
    pub loss_pct: f64,
    pub seed: u64,
    /// When set, commands are only picked up at this polling period.
    pub legacy_period_ms: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            tick_rate: 250.0,
            delay_ms: 0.0,
            jitter_ms: 0.0,
            loss_pct: 0.0,
            seed: 0,
            legacy_period_ms: None,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid simulator config: {0}")]
pub struct SimConfigError(pub String);

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimConfigError> {
        let bad = |m: &str| Err(SimConfigError(m.to_string()));
        if !(self.tick_rate.is_finite() && self.tick_rate > 0.0) {
            return bad("tick_rate must be positive");
        }
        if !(self.delay_ms >= 0.0 && self.jitter_ms >= 0.0) {
            return bad("delay and jitter must be non-negative");
        }
        if !(0.0..100.0).contains(&self.loss_pct) {
            return bad("loss_pct must be in [0, 100)");
        }
        if self.legacy_period_ms.is_some_and(|p| !(p > 0.0)) {
            return bad("legacy period must be positive");
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.tick_rate
    }

    pub fn tick_us(&self) -> u64 {
        (1e6 / self.tick_rate).round() as u64
    }

    pub fn impairment(&self, stream: u64) -> Impairment {
        Impairment::new(
            self.delay_ms,
            self.jitter_ms,
            self.loss_pct,
            self.seed.wrapping_add(stream),
        )
    }
}

/// Parses `4hz`, `4Hz` or a bare number of hertz into a period in ms.
pub fn parse_rate_hz(s: &str) -> Option<f64> {
    let t = s.trim().to_ascii_lowercase();
    let hz: f64 = t.strip_suffix("hz").unwrap_or(&t).trim().parse().ok()?;
    (hz > 0.0 && hz.is_finite()).then(|| 1000.0 / hz)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub q_actual: JointState,
    pub last_cmd: Option<MotionCmd>,
    /// µs
    pub clock: u64,
}

impl SimState {
    pub fn at_home(model: &ArmModel) -> Self {
        Self {
            q_actual: JointState::new(model.home().to_vec()),
            last_cmd: None,
            clock: 0,
        }
    }
}

/// One integration step: joints move toward the latched command under the
/// model's speed cap, or hold when none has arrived.
pub fn step(state: &SimState, model: &ArmModel, dt: f64) -> SimState {
    let dt_us = (dt * 1e6).round() as u64;
    let q_actual = match &state.last_cmd {
        None => state.q_actual.clone(),
        Some(cmd) => {
            let target = JointState::new(cmd.q_target.to_vec());
            rate_limit_within(model, &state.q_actual, &target, dt)
                .expect("sim state and command share the model's length")
        }
    };
    SimState {
        q_actual: JointState::at(q_actual.q, state.clock + dt_us),
        last_cmd: state.last_cmd.clone(),
        clock: state.clock + dt_us,
    }
}

/// Per-packet delay, jitter and loss with a seeded generator.
#[derive(Clone, Debug)]
pub struct Impairment {
    delay_us: f64,
    jitter_us: f64,
    loss: f64,
    rng: ChaCha8Rng,
}

impl Impairment {
    pub fn new(delay_ms: f64, jitter_ms: f64, loss_pct: f64, seed: u64) -> Self {
        Self {
            delay_us: delay_ms * 1e3,
            jitter_us: jitter_ms * 1e3,
            loss: loss_pct / 100.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_transparent(&self) -> bool {
        self.delay_us == 0.0 && self.jitter_us == 0.0 && self.loss == 0.0
    }

    /// Delivery time for a packet sent at `send_us`, `None` if dropped.
    pub fn schedule(&mut self, send_us: u64) -> Option<u64> {
        if self.is_transparent() {
            return Some(send_us);
        }
        // Both draws happen for every packet so drop patterns do not shift
        // the delay sequence.
        let drop = self.rng.random::<f64>() < self.loss;
        let j = if self.jitter_us > 0.0 {
            self.rng.random_range(-self.jitter_us..=self.jitter_us)
        } else {
            0.0
        };
        if drop {
            return None;
        }
        Some(send_us + (self.delay_us + j).max(0.0).round() as u64)
    }
}

/// Delivery schedule for packets sent at `send_times`.
pub fn impair(send_times: &[u64], cfg: &SimConfig, stream: u64) -> Vec<Option<u64>> {
    let mut imp = cfg.impairment(stream);
    send_times.iter().map(|t| imp.schedule(*t)).collect()
}

/// Packets in flight, released in delivery-time order.
#[derive(Debug)]
pub struct DelayLine<T> {
    impairment: Impairment,
    heap: BinaryHeap<Reverse<(u64, u64, Slot<T>)>>,
    counter: u64,
    dropped: u64,
}

/// Wrapper so payloads need no ordering of their own.
#[derive(Debug)]
struct Slot<T>(T);

impl<T> PartialEq for Slot<T> {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}
impl<T> Eq for Slot<T> {}
impl<T> PartialOrd for Slot<T> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<T> Ord for Slot<T> {
    fn cmp(&self, _: &Self) -> std::cmp::Ordering {
        std::cmp::Ordering::Equal
    }
}

impl<T> DelayLine<T> {
    pub fn new(impairment: Impairment) -> Self {
        Self {
            impairment,
            heap: BinaryHeap::new(),
            counter: 0,
            dropped: 0,
        }
    }

    pub fn push(&mut self, item: T, now_us: u64) {
        match self.impairment.schedule(now_us) {
            Some(at) => {
                self.heap.push(Reverse((at, self.counter, Slot(item))));
                self.counter += 1;
            }
            None => self.dropped += 1,
        }
    }

    pub fn pop_due(&mut self, now_us: u64) -> Vec<T> {
        let mut out = Vec::new();
        while self.heap.peek().is_some_and(|Reverse((at, _, _))| *at <= now_us) {
            out.push(self.heap.pop().unwrap().0 .2 .0);
        }
        out
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn in_flight(&self) -> usize {
        self.heap.len()
    }
}

/// Simulator with its inbound command path: impairment, latest-wins
/// latching and the optional legacy polling rate.
#[derive(Debug)]
pub struct Simulator {
    model: ArmModel,
    cfg: SimConfig,
    state: SimState,
    inbound: DelayLine<MotionCmd>,
    outbound: DelayLine<FeedbackMsg>,
    pending: Option<MotionCmd>,
    next_poll: u64,
    tick: u64,
    stale: u64,
}

impl Simulator {
    pub fn new(model: ArmModel, cfg: SimConfig) -> Result<Self, SimConfigError> {
        cfg.validate()?;
        if model.dof() != 6 {
            return Err(SimConfigError(format!(
                "the datagram protocol carries 6 joints, model has {}",
                model.dof()
            )));
        }
        Ok(Self {
            state: SimState::at_home(&model),
            inbound: DelayLine::new(cfg.impairment(0)),
            outbound: DelayLine::new(cfg.impairment(1)),
            model,
            cfg,
            pending: None,
            next_poll: 0,
            tick: 0,
            stale: 0,
        })
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn model(&self) -> &ArmModel {
        &self.model
    }

    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    pub fn stale_commands(&self) -> u64 {
        self.stale
    }

    pub fn dropped_commands(&self) -> u64 {
        self.inbound.dropped()
    }

    /// A command datagram arrived at simulator time `now_us`.
    pub fn receive(&mut self, cmd: MotionCmd, now_us: u64) {
        self.inbound.push(cmd, now_us);
    }

    fn offer(&mut self, cmd: MotionCmd) {
        let newest = self
            .pending
            .as_ref()
            .or(self.state.last_cmd.as_ref())
            .map(|c| c.seq);
        if newest.is_some_and(|s| cmd.seq <= s) {
            self.stale += 1;
        } else {
            self.pending = Some(cmd);
        }
    }

    /// Advances one tick and returns the feedback datagrams due now.
    pub fn tick(&mut self) -> Vec<FeedbackMsg> {
        let now = self.state.clock;
        for cmd in self.inbound.pop_due(now) {
            self.offer(cmd);
        }
        let poll = match self.cfg.legacy_period_ms {
            None => true,
            Some(p) if now >= self.next_poll => {
                self.next_poll = now + (p * 1e3).round() as u64;
                true
            }
            Some(_) => false,
        };
        if poll {
            if let Some(cmd) = self.pending.take() {
                self.state.last_cmd = Some(cmd);
            }
        }
        self.state = step(&self.state, &self.model, self.cfg.dt());
        self.tick += 1;
        let fb = FeedbackMsg {
            seq_echo: self.state.last_cmd.as_ref().map_or(0, |c| c.seq),
            q_actual: self.state.q_actual.q.clone().try_into().expect("6 joints"),
            arm_time: self.state.clock,
        };
        self.outbound.push(fb, self.state.clock);
        self.outbound.pop_due(self.state.clock)
    }

    pub fn trace_row(&self) -> TraceRow {
        TraceRow::new(
            self.tick,
            &self.state.q_actual.q,
            self.state.last_cmd.as_ref().map(|c| c.seq),
        )
    }
}

/// One line of the feedback trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub tick: u64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub q4: f64,
    pub q5: f64,
    pub q6: f64,
    pub last_seq: Option<u32>,
}

impl TraceRow {
    pub fn new(tick: u64, q: &[f64], last_seq: Option<u32>) -> Self {
        Self {
            tick,
            q1: q[0],
            q2: q[1],
            q3: q[2],
            q4: q[3],
            q5: q[4],
            q6: q[5],
            last_seq,
        }
    }

    pub fn q(&self) -> [f64; 6] {
        [self.q1, self.q2, self.q3, self.q4, self.q5, self.q6]
    }
}

pub struct TraceWriter<W: std::io::Write>(csv::Writer<W>);

impl TraceWriter<std::fs::File> {
    pub fn create(path: &Path) -> csv::Result<Self> {
        Ok(Self(csv::Writer::from_path(path)?))
    }
}

impl<W: std::io::Write> TraceWriter<W> {
    pub fn from_writer(w: W) -> Self {
        Self(csv::Writer::from_writer(w))
    }

    pub fn write(&mut self, row: &TraceRow) -> csv::Result<()> {
        self.0.serialize(row)
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.0.flush()
    }
}

pub fn read_trace(path: &Path) -> csv::Result<Vec<TraceRow>> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

/// Result of checking a feedback trace against the speed cap and limits.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceCheck {
    pub ticks: usize,
    /// rad/s
    pub max_velocity: f64,
    pub limit_violations: usize,
}

/// Per-tick joint speed over consecutive rows at a fixed tick rate.
pub fn check_trace(rows: &[TraceRow], model: &ArmModel, tick_rate: f64) -> TraceCheck {
    let mut max_velocity = 0.0f64;
    for w in rows.windows(2) {
        let ticks = w[1].tick.saturating_sub(w[0].tick).max(1) as f64;
        for (a, b) in w[0].q().iter().zip(w[1].q()) {
            max_velocity = max_velocity.max((b - a).abs() * tick_rate / ticks);
        }
    }
    TraceCheck {
        ticks: rows.len(),
        max_velocity,
        limit_violations: rows.iter().filter(|r| !model.within_limits(&r.q())).count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::reference;
    use crate::motion::rate_limit;

    fn cmd(seq: u32, q: [f64; 6]) -> MotionCmd {
        MotionCmd {
            seq,
            send_time: 0,
            q_target: q,
        }
    }

    #[test]
    fn no_command_holds() {
        let model = reference::ur5e();
        let mut s = SimState::at_home(&model);
        let home = s.q_actual.q.clone();
        for _ in 0..100 {
            s = step(&s, &model, 0.004);
        }
        assert_eq!(s.q_actual.q, home);
        assert_eq!(s.clock, 400_000);
    }

    #[test]
    fn moves_exactly_cap_times_dt() {
        let model = reference::ur5e();
        let mut s = SimState::at_home(&model);
        let mut target: [f64; 6] = model.home().try_into().unwrap();
        target[0] += 5f64.to_radians();
        s.last_cmd = Some(cmd(1, target));
        let s = step(&s, &model, 0.004);
        let moved = (s.q_actual.q[0] - model.home()[0]).to_degrees();
        assert!((moved - 0.4).abs() < 1e-12, "{moved}");
    }

    #[test]
    fn steps_equal_rate_limit_tick_by_tick() {
        let model = reference::ur5e();
        let mut s = SimState::at_home(&model);
        let mut q = JointState::new(model.home().to_vec());
        let targets = [[0.3, -1.2, 1.0, -1.5, -1.4, 0.2], [-0.2, -1.7, 1.9, -1.2, -1.7, -0.4]];
        for t in targets {
            s.last_cmd = Some(cmd(1, t));
            for _ in 0..200 {
                s = step(&s, &model, 0.004);
                q = rate_limit(&q, &JointState::new(t.to_vec()), 0.004, model.velocity_cap()).unwrap();
                assert_eq!(s.q_actual.q, q.q);
            }
        }
    }

    #[test]
    fn transparent_impairment_is_immediate_and_ordered() {
        let cfg = SimConfig::default();
        let times: Vec<u64> = (0..50).map(|i| i * 1000).collect();
        let sched = impair(&times, &cfg, 0);
        assert_eq!(sched, times.iter().map(|t| Some(*t)).collect::<Vec<_>>());
    }

    #[test]
    fn heavy_loss_is_reproducible() {
        let cfg = SimConfig {
            loss_pct: 99.999,
            seed: 42,
            ..Default::default()
        };
        let times: Vec<u64> = (0..10_000).collect();
        let a = impair(&times, &cfg, 0);
        assert_eq!(a, impair(&times, &cfg, 0));
        assert!(a.iter().filter(|d| d.is_some()).count() < 10);
    }

    #[test]
    fn delay_statistics() {
        let cfg = SimConfig {
            delay_ms: 20.0,
            jitter_ms: 5.0,
            seed: 3,
            ..Default::default()
        };
        let times = vec![0u64; 10_000];
        let d: Vec<u64> = impair(&times, &cfg, 0).into_iter().map(|d| d.unwrap()).collect();
        let mean = d.iter().sum::<u64>() as f64 / d.len() as f64 / 1e3;
        assert!((mean - 20.0).abs() < 0.5, "{mean}");
        assert!(d.iter().all(|v| (15_000..=25_000).contains(v)));
    }

    #[test]
    fn stale_command_never_latched() {
        let model = reference::ur5e();
        let mut sim = Simulator::new(model.clone(), SimConfig::default()).unwrap();
        let home: [f64; 6] = model.home().try_into().unwrap();
        let mut newer = home;
        newer[0] += 0.1;
        sim.receive(cmd(5, newer), 0);
        sim.tick();
        sim.receive(cmd(4, home), 4000);
        for _ in 0..200 {
            sim.tick();
        }
        assert_eq!(sim.state().q_actual.q[0], newer[0]);
        assert_eq!(sim.stale_commands(), 1);
    }

    #[test]
    fn legacy_rate_delays_pickup() {
        let model = reference::ur5e();
        let cfg = SimConfig {
            legacy_period_ms: parse_rate_hz("4hz"),
            ..Default::default()
        };
        let mut sim = Simulator::new(model.clone(), cfg).unwrap();
        sim.tick(); // poll at t=0 with nothing pending
        let home: [f64; 6] = model.home().try_into().unwrap();
        sim.receive(cmd(1, home), sim.state().clock);
        let mut acked_at = None;
        for _ in 0..100 {
            let fb = sim.tick();
            if acked_at.is_none() && fb.iter().any(|f| f.seq_echo >= 1) {
                acked_at = Some(sim.state().clock);
            }
        }
        assert_eq!(acked_at, Some(256_000));
    }

    #[test]
    fn rate_parsing() {
        assert_eq!(parse_rate_hz("4hz"), Some(250.0));
        assert_eq!(parse_rate_hz("4Hz"), Some(250.0));
        assert_eq!(parse_rate_hz("0hz"), None);
        assert_eq!(parse_rate_hz("fast"), None);
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig { tick_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(SimConfig { loss_pct: 100.0, ..Default::default() }.validate().is_err());
        assert!(SimConfig::default().validate().is_ok());
    }

    #[test]
    fn trace_csv_round_trip_and_check() {
        let model = reference::ur5e();
        let mut sim = Simulator::new(model.clone(), SimConfig::default()).unwrap();
        sim.receive(cmd(1, [1.0, -1.0, 1.0, -1.0, -1.0, 1.0]), 0);
        let mut buf = Vec::new();
        {
            let mut w = TraceWriter::from_writer(&mut buf);
            w.write(&sim.trace_row()).unwrap();
            for _ in 0..500 {
                sim.tick();
                w.write(&sim.trace_row()).unwrap();
            }
            w.flush().unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("tick,q1,q2,q3,q4,q5,q6,last_seq\n0,"));
        let rows: Vec<TraceRow> = csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(rows.len(), 501);
        assert_eq!(rows[0].last_seq, None);
        let check = check_trace(&rows, &model, 250.0);
        assert!(check.max_velocity <= model.velocity_cap() + 1e-9);
        assert!(check.max_velocity > model.velocity_cap() - 1e-6);
        assert_eq!(check.limit_violations, 0);
    }
}
