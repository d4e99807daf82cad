//! Spawns `teleoplab` processes on ephemeral ports and tears them down.

#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Output, Stdio};
use std::sync::mpsc;
use std::time::Duration;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_teleoplab"))
}

pub fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn config() -> PathBuf {
    repo().join("config/server.toml")
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn teleoplab")
}

/// A background process; killed on drop unless stopped first.
pub struct Proc {
    child: Child,
    /// `key=value` pairs from the first stdout line.
    pub addrs: Vec<(String, String)>,
    lines: mpsc::Receiver<String>,
}

impl Proc {
    pub fn spawn(args: &[&str]) -> Proc {
        let mut child = bin()
            .args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .expect("spawn teleoplab");
        let (tx, lines) = mpsc::channel();
        let out = child.stdout.take().unwrap();
        std::thread::spawn(move || {
            for line in BufReader::new(out).lines().map_while(Result::ok) {
                if tx.send(line).is_err() {
                    return;
                }
            }
        });
        let first = lines
            .recv_timeout(Duration::from_secs(10))
            .unwrap_or_else(|_| panic!("{args:?} never reported its ports"));
        let addrs = first
            .strip_prefix("listening ")
            .unwrap_or_else(|| panic!("unexpected first line `{first}`"))
            .split_whitespace()
            .filter_map(|kv| kv.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
            .collect();
        Proc { child, addrs, lines }
    }

    pub fn addr(&self, key: &str) -> String {
        self.addrs.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone()).unwrap()
    }

    pub fn port(&self, key: &str) -> String {
        self.addr(key).rsplit_once(':').unwrap().1.to_string()
    }

    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    /// SIGTERM, then wait; returns the exit status and remaining stdout.
    pub fn terminate(mut self) -> (ExitStatus, Vec<String>) {
        let _ = Command::new("kill").args(["-TERM", &self.child.id().to_string()]).status();
        let status = self.child.wait().unwrap();
        let rest = self.lines.try_iter().collect();
        (status, rest)
    }
}

impl Drop for Proc {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Simulator, tester emulator and server wired together on free ports.
pub struct Cell {
    pub sim: Proc,
    pub device: Proc,
    pub server: Proc,
}

#[derive(Default)]
pub struct CellFiles<'a> {
    pub metrics: Option<&'a Path>,
    pub results: Option<&'a Path>,
    pub trace: Option<&'a Path>,
    pub sim_extra: &'a [&'a str],
}

impl Cell {
    pub fn start(files: CellFiles) -> Cell {
        let cfg = config();
        let cfg = cfg.to_str().unwrap();
        let mut sim_args = vec!["sim", "--config", cfg, "--listen", "0"];
        let trace = files.trace.map(|p| p.to_str().unwrap().to_string());
        if let Some(t) = &trace {
            sim_args.extend(["--trace", t.as_str()]);
        }
        sim_args.extend(files.sim_extra);
        let sim = Proc::spawn(&sim_args);
        let mut dev_args = vec!["device-emu", "--config", cfg, "--listen", "0"];
        let results = files.results.map(|p| p.to_str().unwrap().to_string());
        if let Some(r) = &results {
            dev_args.extend(["--results", r.as_str()]);
        }
        let device = Proc::spawn(&dev_args);
        let (sp, dp) = (sim.port("command"), device.port("device"));
        let mut srv_args = vec![
            "serve",
            "--config",
            cfg,
            "--stream-port",
            "0",
            "--feedback-port",
            "0",
            "--gateway-port",
            "0",
            "--command-port",
            sp.as_str(),
            "--device-port",
            dp.as_str(),
        ];
        let metrics = files.metrics.map(|p| p.to_str().unwrap().to_string());
        if let Some(m) = &metrics {
            srv_args.extend(["--metrics-dir", m.as_str()]);
        }
        let server = Proc::spawn(&srv_args);
        Cell { sim, device, server }
    }

    /// Runs `operate` against this cell.
    pub fn operate(&self, script: &Path, extra: &[&str]) -> Output {
        let stream = self.server.addr("stream");
        let mut args = vec!["operate", "--script", script.to_str().unwrap(), "--server", stream.as_str()];
        args.extend(extra);
        run(&args)
    }

    /// Stops all three, server first so metrics are flushed.
    pub fn stop(self) -> [ExitStatus; 3] {
        let (srv, _) = self.server.terminate();
        let (sim, _) = self.sim.terminate();
        let (dev, _) = self.device.terminate();
        [srv, sim, dev]
    }
}

/// Waits up to `limit` for `path` to exist.
pub fn wait_for_file(path: &Path, limit: Duration) -> bool {
    let deadline = std::time::Instant::now() + limit;
    while std::time::Instant::now() < deadline {
        if path.exists() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    path.exists()
}

pub fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}
