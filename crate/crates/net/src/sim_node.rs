//! Arm simulator process: takes command datagrams, steps the arm at its
//! tick rate against the wall clock and answers with feedback datagrams.

use crate::{bind_udp, NetError};
use log::{debug, info, warn};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};
use teleoplab::kinematics::ArmModel;
use teleoplab::protocol::{self, Message};
use teleoplab::sim::{SimConfig, Simulator, TraceWriter};

#[derive(Clone, Debug)]
pub struct SimNodeOptions {
    pub sim: SimConfig,
    pub listen: SocketAddr,
    /// Feedback destination; defaults to the sender of the latest command.
    pub feedback: Option<SocketAddr>,
    pub trace: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SimSummary {
    pub ticks: u64,
    pub commands: u64,
    pub stale_commands: u64,
    pub dropped_commands: u64,
}

pub struct SimHandle {
    pub listen_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<SimSummary, NetError>>>,
}

impl SimHandle {
    /// Stops the loop, flushes the trace and returns counters.
    pub fn shutdown(mut self) -> Result<SimSummary, NetError> {
        self.stop.store(true, Ordering::SeqCst);
        self.thread
            .take()
            .expect("joined once")
            .join()
            .map_err(|_| NetError::Setup("simulator thread panicked".into()))?
    }
}

impl Drop for SimHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn start(model: ArmModel, opts: SimNodeOptions) -> Result<SimHandle, NetError> {
    let mut sim = Simulator::new(model, opts.sim.clone()).map_err(|e| NetError::Setup(e.to_string()))?;
    let socket = bind_udp("command datagrams", opts.listen)?;
    socket.set_nonblocking(true)?;
    let listen_addr = socket.local_addr()?;
    let mut trace = match &opts.trace {
        Some(p) => Some(TraceWriter::create(p).map_err(|e| NetError::Setup(format!("trace {}: {e}", p.display())))?),
        None => None,
    };
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = stop.clone();
    info!("simulator listening on {listen_addr}");
    let thread = std::thread::spawn(move || -> Result<SimSummary, NetError> {
        let period = Duration::from_micros(sim.config().tick_us());
        let mut next = Instant::now();
        let mut reply_to = opts.feedback;
        let mut commands = 0;
        let mut buf = [0u8; protocol::MAX_FRAME];
        while !stop_flag.load(Ordering::SeqCst) {
            loop {
                match socket.recv_from(&mut buf) {
                    Ok((n, from)) => match protocol::decode(&buf[..n]) {
                        Ok(Message::MotionCmd(cmd)) => {
                            commands += 1;
                            if opts.feedback.is_none() {
                                reply_to = Some(from);
                            }
                            let now = sim.state().clock;
                            sim.receive(cmd, now);
                        }
                        Ok(other) => debug!("ignoring {:?} datagram", other.msg_type()),
                        Err(e) => debug!("bad datagram from {from}: {e}"),
                    },
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => break,
                    Err(e) => {
                        debug!("command socket: {e}");
                        break;
                    }
                }
            }
            for fb in sim.tick() {
                if let Some(to) = reply_to {
                    if let Err(e) = socket.send_to(&protocol::encode(&Message::Feedback(fb)), to) {
                        debug!("feedback to {to}: {e}");
                    }
                }
            }
            if let Some(t) = trace.as_mut() {
                if let Err(e) = t.write(&sim.trace_row()) {
                    warn!("trace write failed, disabling trace: {e}");
                    trace = None;
                }
            }
            next += period;
            let now = Instant::now();
            if next > now {
                std::thread::sleep(next - now);
            } else if now - next > period * 50 {
                // Far behind (suspended process); do not burst-catch-up.
                next = now;
            }
        }
        if let Some(mut t) = trace {
            t.flush()?;
        }
        Ok(SimSummary {
            ticks: sim.tick_count(),
            commands,
            stale_commands: sim.stale_commands(),
            dropped_commands: sim.dropped_commands(),
        })
    });
    Ok(SimHandle {
        listen_addr,
        stop,
        thread: Some(thread),
    })
}
