//! Headless scripted operator: replays a [`ReplayScript`] over the stream
//! port and reports which task events the server observed.

use crate::NetError;
use log::{debug, warn};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::mpsc;
use std::time::{Duration, Instant};
use teleoplab::protocol::{self, FrameBuffer, Message, SessionHello, SessionReply, StateMsg, PROTOCOL_VERSION};
use teleoplab::script::ReplayScript;
use teleoplab::task::{TaskEvent, TaskStep};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pace {
    /// Rows are sent at their scripted times.
    RealTime,
    /// Rows are sent as fast as the server acknowledges them.
    Accelerated,
}

#[derive(Clone, Debug)]
pub struct OperateOptions {
    pub server: SocketAddr,
    pub pace: Pace,
    pub operator_id: String,
    /// Longest wait for the arm to settle before a clutch release.
    pub settle_timeout: Duration,
    pub reply_timeout: Duration,
}

impl OperateOptions {
    pub fn new(server: SocketAddr, pace: Pace) -> Self {
        Self {
            server,
            pace,
            operator_id: "scripted".into(),
            settle_timeout: Duration::from_secs(20),
            reply_timeout: Duration::from_secs(5),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OperateReport {
    pub expected: Vec<TaskEvent>,
    pub observed: Vec<TaskEvent>,
    /// Host time of each observed event, from the session accept.
    pub observed_at: Vec<Duration>,
    pub final_state: Option<StateMsg>,
    pub waypoints_sent: u64,
    /// Engages and releases where the arm did not report settled in time.
    pub settle_timeouts: u64,
}

impl OperateReport {
    pub fn events_match(&self) -> bool {
        self.expected == self.observed
    }

    pub fn cycles(&self) -> u32 {
        self.final_state.as_ref().map_or(0, |s| s.cycles)
    }

    /// Host-clock cycle lengths: time between successive cycle boundaries
    /// (connect, then each return).
    pub fn wall_cycles(&self) -> Vec<Duration> {
        let marks: Vec<Duration> = self
            .observed
            .iter()
            .zip(&self.observed_at)
            .filter(|(e, _)| matches!(e, TaskEvent::Connected | TaskEvent::Returned))
            .map(|(_, t)| *t)
            .collect();
        marks.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Line diff of expected against observed events.
    pub fn diff(&self) -> String {
        let n = self.expected.len().max(self.observed.len());
        let name = |e: Option<&TaskEvent>| e.map_or("-", |e| e.as_str());
        (0..n)
            .map(|i| {
                let (a, b) = (self.expected.get(i), self.observed.get(i));
                let mark = if a == b { ' ' } else { '!' };
                format!("{mark} {:>3}  expected {:<14} observed {}\n", i + 1, name(a), name(b))
            })
            .collect()
    }
}

/// Events implied by moving from one task step to another.
pub fn events_between(from: TaskStep, to: TaskStep) -> Vec<TaskEvent> {
    let next = |s: TaskStep| match s {
        TaskStep::Connect => (TaskStep::Pick, TaskEvent::Connected),
        TaskStep::Pick => (TaskStep::Place, TaskEvent::PickDetected),
        TaskStep::Place => (TaskStep::Test, TaskEvent::PlaceDetected),
        TaskStep::Test => (TaskStep::Return, TaskEvent::TestComplete),
        TaskStep::Return => (TaskStep::Pick, TaskEvent::Returned),
    };
    let mut out = Vec::new();
    let mut s = from;
    while s != to && out.len() < 5 {
        let (n, e) = next(s);
        out.push(e);
        s = n;
    }
    out
}

struct Link {
    w: TcpStream,
    rx: mpsc::Receiver<Message>,
    step: TaskStep,
    observed: Vec<TaskEvent>,
    observed_at: Vec<Duration>,
    epoch: Instant,
    last: Option<StateMsg>,
}

impl Link {
    fn send(&mut self, m: &Message) -> Result<(), NetError> {
        self.w.write_all(&protocol::encode(m))?;
        Ok(())
    }

    fn absorb(&mut self, m: Message) -> Option<Message> {
        if let Message::State(s) = &m {
            let events = events_between(self.step, s.task_step);
            let at = self.epoch.elapsed();
            self.observed_at.extend(events.iter().map(|_| at));
            self.observed.extend(events);
            self.step = s.task_step;
            self.last = Some(s.clone());
        }
        Some(m)
    }

    fn drain(&mut self) {
        while let Ok(m) = self.rx.try_recv() {
            self.absorb(m);
        }
    }

    fn recv(&mut self, timeout: Duration) -> Option<Message> {
        let m = self.rx.recv_timeout(timeout).ok()?;
        self.absorb(m)
    }

    /// Waits for a state acknowledging `seq`, optionally settled too.
    fn wait_for_ack(&mut self, seq: u32, settled: bool, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.last.as_ref().is_some_and(|s| s.ack_seq >= seq && (!settled || s.settled)) {
                return true;
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() || self.recv(left).is_none() {
                return false;
            }
        }
    }
}

pub fn operate(script: &ReplayScript, opts: &OperateOptions) -> Result<OperateReport, NetError> {
    let sock = TcpStream::connect_timeout(&opts.server, opts.reply_timeout)?;
    sock.set_nodelay(true)?;
    let mut r = sock.try_clone()?;
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let mut frames = FrameBuffer::default();
        let mut buf = [0u8; 8192];
        loop {
            let n = match r.read(&mut buf) {
                Ok(0) | Err(_) => return,
                Ok(n) => n,
            };
            frames.push(&buf[..n]);
            loop {
                match frames.next_message() {
                    Ok(Some(m)) => {
                        if tx.send(m).is_err() {
                            return;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        warn!("server stream: {e}");
                        return;
                    }
                }
            }
        }
    });
    let mut link = Link {
        w: sock,
        rx,
        step: TaskStep::Connect,
        observed: Vec::new(),
        observed_at: Vec::new(),
        epoch: Instant::now(),
        last: None,
    };
    link.send(&Message::Hello(SessionHello {
        protocol_version: PROTOCOL_VERSION,
        operator_id: opts.operator_id.clone(),
    }))?;
    match link.recv(opts.reply_timeout) {
        Some(Message::SessionReply(SessionReply::Accept { .. })) => link.epoch = Instant::now(),
        Some(Message::SessionReply(other)) => {
            return Err(NetError::Protocol(format!("session refused: {other:?}")))
        }
        other => return Err(NetError::Protocol(format!("no session reply, got {other:?}"))),
    }

    let t0 = script.rows().first().map_or(0, |r| r.time_us);
    let start = Instant::now();
    let mut offset = Duration::ZERO;
    let mut engaged = false;
    let mut last_seq = None;
    let mut sent = 0u64;
    let mut settle_timeouts = 0u64;
    for wp in script.waypoints() {
        if opts.pace == Pace::RealTime {
            let due = start + Duration::from_micros(wp.send_time - t0) + offset;
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        if engaged && !wp.clutch {
            // Let go only once the arm has caught up, so the held pose is the
            // one the script planned against.
            let waited = Instant::now();
            let seq = last_seq.unwrap_or(0);
            if !link.wait_for_ack(seq, true, opts.settle_timeout) {
                settle_timeouts += 1;
                warn!("arm not settled before release at seq {}", wp.seq);
            }
            if opts.pace == Pace::RealTime {
                offset += waited.elapsed();
            }
        }
        let engaging = !engaged && wp.clutch;
        engaged = wp.clutch;
        link.send(&Message::Waypoint(wp.clone()))?;
        last_seq = Some(wp.seq);
        sent += 1;
        if engaging && opts.pace == Pace::Accelerated {
            // Without script pacing the next rows could outrun the arm's
            // first post-engage tick.
            if !link.wait_for_ack(wp.seq, true, opts.settle_timeout) {
                settle_timeouts += 1;
                warn!("arm not settled after engage at seq {}", wp.seq);
            }
        }
        link.drain();
    }
    if let Some(seq) = last_seq {
        if !link.wait_for_ack(seq, false, opts.reply_timeout) {
            return Err(NetError::Protocol(format!("server never acknowledged seq {seq}")));
        }
    }
    link.send(&Message::Bye)?;
    // The reply to Bye is the last state pushed; wait for the stream to close
    // or go quiet.
    let quiet = Duration::from_millis(200);
    let deadline = Instant::now() + opts.reply_timeout;
    while Instant::now() < deadline && link.recv(quiet).is_some() {}
    debug!("operate finished: {sent} waypoints");
    Ok(OperateReport {
        expected: script.expected_events(),
        observed: link.observed,
        observed_at: link.observed_at,
        final_state: link.last,
        waypoints_sent: sent,
        settle_timeouts,
    })
}
