//! Tester emulator process: the line protocol on a stream socket, with
//! completed results appended to a CSV file.

use crate::{bind_tcp, NetError};
use log::{debug, info, warn};
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};
use teleoplab::device::{append_result_csv, LineSession, Tester};

#[derive(Clone, Debug)]
pub struct DeviceNodeOptions {
    pub listen: SocketAddr,
    pub results: Option<PathBuf>,
}

struct Shared {
    session: LineSession,
    written: usize,
    results: Option<PathBuf>,
    started: Instant,
}

impl Shared {
    fn handle(&mut self, line: &str) -> String {
        let host_now = self.started.elapsed().as_micros() as u64;
        let reply = self.session.handle(line, host_now);
        let rows = self.session.tester.results();
        if let Some(path) = &self.results {
            for row in &rows[self.written..] {
                if let Err(e) = append_result_csv(path, row) {
                    warn!("appending to {}: {e}", path.display());
                }
            }
        }
        self.written = rows.len();
        reply
    }
}

pub struct DeviceHandle {
    pub listen_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
    shared: Arc<Mutex<Shared>>,
}

impl DeviceHandle {
    pub fn status_line(&self) -> String {
        self.shared.lock().expect("device lock").session.tester.status_line()
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for DeviceHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

pub fn start(tester: Tester, opts: DeviceNodeOptions) -> Result<DeviceHandle, NetError> {
    let listener = bind_tcp("device line protocol", opts.listen)?;
    let listen_addr = listener.local_addr()?;
    let shared = Arc::new(Mutex::new(Shared {
        session: LineSession::new(tester),
        written: 0,
        results: opts.results,
        started: Instant::now(),
    }));
    let stop = Arc::new(AtomicBool::new(false));
    let (stop_flag, accept_shared) = (stop.clone(), shared.clone());
    info!("device emulator listening on {listen_addr}");
    let thread = std::thread::spawn(move || {
        let mut workers = Vec::new();
        while !stop_flag.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((sock, peer)) => {
                    debug!("device client {peer}");
                    let (shared, stop) = (accept_shared.clone(), stop_flag.clone());
                    workers.push(std::thread::spawn(move || serve_client(sock, shared, stop)));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => warn!("device accept: {e}"),
            }
        }
        for w in workers {
            let _ = w.join();
        }
    });
    Ok(DeviceHandle {
        listen_addr,
        stop,
        thread: Some(thread),
        shared,
    })
}

fn serve_client(sock: TcpStream, shared: Arc<Mutex<Shared>>, stop: Arc<AtomicBool>) {
    let _ = sock.set_nodelay(true);
    let _ = sock.set_nonblocking(false);
    let _ = sock.set_read_timeout(Some(Duration::from_millis(100)));
    let Ok(mut w) = sock.try_clone() else { return };
    let mut r = BufReader::new(sock);
    let mut line = String::new();
    while !stop.load(Ordering::SeqCst) {
        match r.read_line(&mut line) {
            Ok(0) => return,
            Ok(_) => {
                let reply = shared.lock().expect("device lock").handle(line.trim());
                line.clear();
                if writeln!(w, "{reply}").is_err() {
                    return;
                }
            }
            // A timeout may leave a partial line in `line`; keep reading.
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(_) => return,
        }
    }
}
