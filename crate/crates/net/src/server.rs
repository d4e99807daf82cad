//! Host server process.
//!
//! One pipeline thread owns the [`ServerCore`]; socket tasks talk to it only
//! through a channel. Operator connections arrive on the binary stream port
//! or as JSON over `/ws` on the gateway.

use crate::{bind_tcp, bind_udp, socket_addr, NetError};
use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use log::{debug, info, warn};
use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream, UdpSocket};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};
use teleoplab::device::Command;
use teleoplab::protocol::{self, FrameBuffer, HandshakeRequest, Message, SessionDecision, Token};
use teleoplab::server::{model_document, DeviceLink, MetricsReport, ServerConfig, ServerCore, Stage};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::sync::{mpsc as amp, oneshot, watch};

#[derive(Clone, Debug, Default)]
pub struct ServeOptions {
    /// Where `report.json`, `latency.csv` and `cycles.csv` go at session end.
    pub metrics_dir: Option<PathBuf>,
}

type ConnId = u64;
type Outbox = amp::UnboundedSender<Message>;

enum Event {
    Open(ConnId, Outbox),
    Inbound(ConnId, Message, Instant),
    Closed(ConnId),
    Feedback(protocol::FeedbackMsg, Instant),
    Metrics(oneshot::Sender<MetricsReport>),
    Shutdown,
}

pub struct ServerHandle {
    pub stream_addr: SocketAddr,
    pub feedback_addr: SocketAddr,
    pub gateway_addr: SocketAddr,
    events: mpsc::Sender<Event>,
    stop: Arc<AtomicBool>,
    stop_async: watch::Sender<bool>,
    threads: Vec<JoinHandle<()>>,
    runtime: Option<tokio::runtime::Runtime>,
}

impl ServerHandle {
    /// Snapshot of the current session's metrics.
    pub fn metrics(&self) -> Option<MetricsReport> {
        let (tx, rx) = oneshot::channel();
        self.events.send(Event::Metrics(tx)).ok()?;
        rx.blocking_recv().ok()
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.stop_async.send(true);
        let _ = self.events.send(Event::Shutdown);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_timeout(Duration::from_secs(1));
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

/// Binds every port, then starts the pipeline, the feedback reader and the
/// socket tasks. Bind failures are reported before anything runs.
pub fn start(cfg: ServerConfig, opts: ServeOptions) -> Result<ServerHandle, NetError> {
    let p = &cfg.ports;
    let stream = bind_tcp("operator stream", socket_addr(&p.host, p.stream)?)?;
    let gateway = bind_tcp("web gateway", socket_addr(&p.host, p.gateway)?)?;
    let udp = bind_udp("feedback datagrams", socket_addr(&p.host, p.feedback)?)?;
    let command_addr = socket_addr(&p.host, p.command)?;
    let device_addr = socket_addr(&p.host, p.device)?;
    let stream_addr = stream.local_addr()?;
    let gateway_addr = gateway.local_addr()?;
    let feedback_addr = udp.local_addr()?;

    let (events, rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    let (stop_async, stop_rx) = watch::channel(false);
    let model = Arc::new(model_document(&cfg));

    let mut threads = Vec::new();
    {
        let udp = udp.try_clone()?;
        udp.set_read_timeout(Some(Duration::from_millis(50)))?;
        let events = events.clone();
        let stop = stop.clone();
        threads.push(std::thread::spawn(move || feedback_reader(udp, events, stop)));
    }
    {
        let pipeline = Pipeline::new(cfg, opts, udp, command_addr, TcpDevice::new(device_addr));
        threads.push(std::thread::spawn(move || pipeline.run(rx)));
    }

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    let ids = Arc::new(AtomicU64::new(1));
    {
        let _guard = runtime.enter();
        let stream = tokio::net::TcpListener::from_std(stream)?;
        let gateway = tokio::net::TcpListener::from_std(gateway)?;
        runtime.spawn(accept_stream(stream, events.clone(), ids.clone(), stop_rx.clone()));
        let app = Router::new()
            .route("/ws", get(ws_upgrade))
            .route("/metrics", get(metrics))
            .route("/model", get(model_route))
            .with_state(Gateway {
                events: events.clone(),
                ids,
                model,
                stop: stop_rx.clone(),
            });
        let mut stop_rx = stop_rx;
        runtime.spawn(async move {
            let shutdown = async move {
                let _ = stop_rx.wait_for(|s| *s).await;
            };
            if let Err(e) = axum::serve(gateway, app).with_graceful_shutdown(shutdown).await {
                warn!("gateway stopped: {e}");
            }
        });
    }
    info!("serving: stream {stream_addr}, gateway {gateway_addr}, feedback {feedback_addr}, commands to {command_addr}");
    Ok(ServerHandle {
        stream_addr,
        feedback_addr,
        gateway_addr,
        events,
        stop,
        stop_async,
        threads,
        runtime: Some(runtime),
    })
}

fn feedback_reader(udp: UdpSocket, events: mpsc::Sender<Event>, stop: Arc<AtomicBool>) {
    let mut buf = [0u8; protocol::MAX_FRAME];
    while !stop.load(Ordering::SeqCst) {
        match udp.recv_from(&mut buf) {
            Ok((n, _)) => {
                let at = Instant::now();
                match protocol::decode(&buf[..n]) {
                    Ok(Message::Feedback(fb)) => {
                        if events.send(Event::Feedback(fb, at)).is_err() {
                            return;
                        }
                    }
                    Ok(other) => debug!("ignoring {:?} datagram", other.msg_type()),
                    Err(e) => debug!("bad datagram: {e}"),
                }
            }
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            // ICMP port-unreachable from an absent simulator surfaces here.
            Err(e) => debug!("feedback socket: {e}"),
        }
    }
}

/// Line-protocol client for the tester, reconnecting on demand.
pub struct TcpDevice {
    addr: SocketAddr,
    conn: Option<(BufReader<TcpStream>, TcpStream)>,
    retry_after: Option<Instant>,
}

impl TcpDevice {
    pub fn new(addr: SocketAddr) -> Self {
        Self {
            addr,
            conn: None,
            retry_after: None,
        }
    }

    fn connect(&mut self) -> Option<()> {
        if self.conn.is_some() {
            return Some(());
        }
        if self.retry_after.is_some_and(|t| Instant::now() < t) {
            return None;
        }
        match TcpStream::connect_timeout(&self.addr, Duration::from_millis(200)) {
            Ok(s) => {
                let _ = s.set_nodelay(true);
                let _ = s.set_read_timeout(Some(Duration::from_millis(500)));
                let w = s.try_clone().ok()?;
                self.conn = Some((BufReader::new(s), w));
                Some(())
            }
            Err(e) => {
                debug!("device at {} unreachable: {e}", self.addr);
                self.retry_after = Some(Instant::now() + Duration::from_secs(1));
                None
            }
        }
    }
}

impl DeviceLink for TcpDevice {
    fn request(&mut self, cmd: Command) -> Option<String> {
        self.connect()?;
        let (r, w) = self.conn.as_mut()?;
        let mut line = String::new();
        let ok = writeln!(w, "{cmd}").is_ok() && r.read_line(&mut line).map(|n| n > 0).unwrap_or(false);
        if !ok {
            self.conn = None;
            return None;
        }
        Some(line.trim_end().to_string())
    }
}

struct Conn {
    out: Outbox,
    token: Option<Token>,
}

struct Pipeline {
    core: ServerCore,
    opts: ServeOptions,
    udp: UdpSocket,
    command_addr: SocketAddr,
    device: TcpDevice,
    conns: HashMap<ConnId, Conn>,
    started: Instant,
    last_emit: Option<Instant>,
    /// (seq, send instant) awaiting a feedback echo.
    in_flight: VecDeque<(u32, Instant)>,
}

impl Pipeline {
    fn new(cfg: ServerConfig, opts: ServeOptions, udp: UdpSocket, command_addr: SocketAddr, device: TcpDevice) -> Self {
        Self {
            core: ServerCore::new(cfg),
            opts,
            udp,
            command_addr,
            device,
            conns: HashMap::new(),
            started: Instant::now(),
            last_emit: None,
            in_flight: VecDeque::new(),
        }
    }

    fn now_us(&self) -> u64 {
        self.started.elapsed().as_micros() as u64
    }

    fn run(mut self, rx: mpsc::Receiver<Event>) {
        let period = Duration::from_secs_f64(self.core.config().command_dt());
        let state_period = Duration::from_secs_f64(1.0 / self.core.config().state_hz);
        let mut next_tick = Instant::now() + period;
        let mut next_state = Instant::now() + state_period;
        loop {
            let wait = next_tick.saturating_duration_since(Instant::now());
            match rx.recv_timeout(wait) {
                Ok(Event::Shutdown) | Err(mpsc::RecvTimeoutError::Disconnected) => break,
                Ok(ev) => self.handle(ev),
                Err(mpsc::RecvTimeoutError::Timeout) => {}
            }
            let now = Instant::now();
            if now >= next_tick {
                self.emit(None);
                next_tick += period;
                if next_tick < now {
                    next_tick = now + period;
                }
            }
            if now >= next_state {
                self.push_state();
                next_state = now + state_period;
            }
        }
        self.write_metrics();
    }

    fn handle(&mut self, ev: Event) {
        match ev {
            Event::Open(id, out) => {
                self.conns.insert(id, Conn { out, token: None });
            }
            Event::Inbound(id, msg, at) => self.inbound(id, msg, at),
            Event::Closed(id) => {
                if let Some(Conn { token: Some(t), .. }) = self.conns.remove(&id) {
                    let now = self.now_us();
                    self.core.disconnect(&t, now);
                }
            }
            Event::Feedback(fb, at) => {
                while self.in_flight.front().is_some_and(|(s, _)| *s <= fb.seq_echo) {
                    let (_, sent) = self.in_flight.pop_front().expect("checked");
                    self.core.record_latency(Stage::Execute, at.duration_since(sent).as_micros() as u64);
                }
                self.core.on_feedback(&fb);
            }
            Event::Metrics(reply) => {
                let _ = reply.send(self.core.metrics());
            }
            Event::Shutdown => {}
        }
    }

    fn inbound(&mut self, id: ConnId, msg: Message, received: Instant) {
        let Some(conn) = self.conns.get(&id) else { return };
        let token = conn.token;
        match (msg, token) {
            (Message::Hello(h), None) => self.handshake(id, HandshakeRequest::Hello(h)),
            (Message::Resume(r), None) => self.handshake(id, HandshakeRequest::Resume(r)),
            (Message::Waypoint(wp), Some(token)) => {
                let start = Instant::now();
                self.core.record_latency(Stage::Ingest, start.duration_since(received).as_micros() as u64);
                let Some(out) = self.core.on_waypoint(&token, &wp, &mut self.device) else { return };
                if let Some(us) = out.ik_us {
                    self.core.record_latency(Stage::Ik, us);
                }
                self.emit(Some(received));
                let state = self.core.state_msg(wp.send_time);
                self.send(id, Message::State(state));
            }
            (Message::Bye, Some(token)) => {
                self.core.bye(&token);
                let state = self.core.state_msg(self.now_us());
                self.send(id, Message::State(state));
                self.write_metrics();
                if let Some(c) = self.conns.get_mut(&id) {
                    c.token = None;
                }
            }
            (m, _) => debug!("connection {id}: ignoring {:?}", m.msg_type()),
        }
    }

    fn handshake(&mut self, id: ConnId, req: HandshakeRequest) {
        let now = self.now_us();
        let decision = self.core.handshake(&req, now);
        if let SessionDecision::Created(protocol::SessionReply::Accept { token, .. })
        | SessionDecision::Reattached(protocol::SessionReply::Accept { token, .. }) = &decision
        {
            // A resumed session moves to the new connection.
            for c in self.conns.values_mut() {
                if c.token == Some(*token) {
                    c.token = None;
                }
            }
            if let Some(c) = self.conns.get_mut(&id) {
                c.token = Some(*token);
            }
            self.last_emit = None;
        }
        self.send(id, Message::SessionReply(decision.reply().clone()));
    }

    fn send(&mut self, id: ConnId, msg: Message) {
        if let Some(c) = self.conns.get(&id) {
            let _ = c.out.send(msg);
        }
    }

    /// One command to the arm. `after_waypoint` carries the receive time of
    /// the waypoint that triggered it.
    fn emit(&mut self, after_waypoint: Option<Instant>) {
        let now = Instant::now();
        let period = self.core.config().command_dt();
        let dt = self
            .last_emit
            .map_or(period, |t| now.duration_since(t).as_secs_f64().min(2.0 * period));
        if dt <= 0.0 {
            return;
        }
        let now_us = self.now_us();
        let Some(cmd) = self.core.command_tick(dt, now_us) else { return };
        self.last_emit = Some(now);
        let seq = cmd.seq;
        let bytes = protocol::encode(&Message::MotionCmd(cmd));
        if let Err(e) = self.udp.send_to(&bytes, self.command_addr) {
            debug!("command datagram: {e}");
        }
        let sent = Instant::now();
        self.in_flight.push_back((seq, sent));
        // Bound the queue if the simulator is absent.
        if self.in_flight.len() > 4096 {
            self.in_flight.pop_front();
        }
        if let Some(rx) = after_waypoint {
            self.core.record_latency(Stage::Emit, sent.duration_since(rx).as_micros() as u64);
        }
    }

    fn push_state(&mut self) {
        let Some(token) = self.core.sessions().active().filter(|s| s.attached).map(|s| s.token) else {
            return;
        };
        let state = self.core.state_msg(self.now_us());
        if let Some(c) = self.conns.values().find(|c| c.token == Some(token)) {
            let _ = c.out.send(Message::State(state));
        }
    }

    fn write_metrics(&self) {
        let Some(dir) = &self.opts.metrics_dir else { return };
        if self.core.session().is_none() {
            return;
        }
        if let Err(e) = self.core.metrics().write_files(dir) {
            warn!("writing metrics to {}: {e}", dir.display());
        }
    }
}

async fn accept_stream(
    listener: tokio::net::TcpListener,
    events: mpsc::Sender<Event>,
    ids: Arc<AtomicU64>,
    stop: watch::Receiver<bool>,
) {
    let mut stopped = stop.clone();
    loop {
        tokio::select! {
            _ = stopped.wait_for(|s| *s) => return,
            accepted = listener.accept() => match accepted {
                Ok((sock, peer)) => {
                    let _ = sock.set_nodelay(true);
                    let id = ids.fetch_add(1, Ordering::Relaxed);
                    debug!("stream connection {id} from {peer}");
                    tokio::spawn(stream_conn(sock, id, events.clone(), stop.clone()));
                }
                Err(e) => warn!("accept: {e}"),
            }
        }
    }
}

async fn stream_conn(sock: tokio::net::TcpStream, id: ConnId, events: mpsc::Sender<Event>, mut stop: watch::Receiver<bool>) {
    let (mut r, mut w) = sock.into_split();
    let (tx, mut rx) = amp::unbounded_channel::<Message>();
    if events.send(Event::Open(id, tx)).is_err() {
        return;
    }
    let writer = tokio::spawn(async move {
        while let Some(m) = rx.recv().await {
            if w.write_all(&protocol::encode(&m)).await.is_err() {
                break;
            }
        }
    });
    let mut frames = FrameBuffer::default();
    let mut buf = vec![0u8; 8192];
    'read: loop {
        let n = tokio::select! {
            _ = stop.wait_for(|s| *s) => break,
            n = r.read(&mut buf) => match n {
                Ok(0) | Err(_) => break,
                Ok(n) => n,
            },
        };
        let at = Instant::now();
        frames.push(&buf[..n]);
        loop {
            match frames.next_message() {
                Ok(Some(m)) => {
                    if events.send(Event::Inbound(id, m, at)).is_err() {
                        break 'read;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    warn!("connection {id}: {e}; closing");
                    break 'read;
                }
            }
        }
    }
    let _ = events.send(Event::Closed(id));
    writer.abort();
}

#[derive(Clone)]
struct Gateway {
    events: mpsc::Sender<Event>,
    ids: Arc<AtomicU64>,
    model: Arc<serde_json::Value>,
    stop: watch::Receiver<bool>,
}

async fn metrics(State(g): State<Gateway>) -> impl IntoResponse {
    let (tx, rx) = oneshot::channel();
    if g.events.send(Event::Metrics(tx)).is_err() {
        return Json(teleoplab::server::metrics_report(None));
    }
    Json(rx.await.unwrap_or_else(|_| teleoplab::server::metrics_report(None)))
}

async fn model_route(State(g): State<Gateway>) -> impl IntoResponse {
    Json((*g.model).clone())
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(g): State<Gateway>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| ws_conn(socket, g))
}

async fn ws_conn(socket: WebSocket, g: Gateway) {
    let id = g.ids.fetch_add(1, Ordering::Relaxed);
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = amp::unbounded_channel::<Message>();
    if g.events.send(Event::Open(id, tx)).is_err() {
        return;
    }
    let writer = tokio::spawn(async move {
        while let Some(m) = rx.recv().await {
            if sink.send(WsMessage::Text(m.to_json().into())).await.is_err() {
                break;
            }
        }
    });
    let mut stop = g.stop.clone();
    loop {
        let next = tokio::select! {
            _ = stop.wait_for(|s| *s) => break,
            next = stream.next() => next,
        };
        let at = Instant::now();
        match next {
            Some(Ok(WsMessage::Text(text))) => match Message::from_json(&text) {
                Ok(m) => {
                    if g.events.send(Event::Inbound(id, m, at)).is_err() {
                        break;
                    }
                }
                Err(e) => warn!("ws connection {id}: {e}"),
            },
            Some(Ok(WsMessage::Close(_))) | None | Some(Err(_)) => break,
            Some(Ok(_)) => {}
        }
    }
    let _ = g.events.send(Event::Closed(id));
    writer.abort();
}
