use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;
use teleoplab::device::{SpecimenModel, Tester};
use teleoplab::script::{golden_script, Pacing, ReplayScript};
use teleoplab::sim::{check_trace, parse_rate_hz, read_trace, SimConfig};
use teleoplab_cli::bench::{self, BenchMode, BenchOptions};
use teleoplab_cli::{endpoint, exit, load_config, wait_for_shutdown, CliError};
use teleoplab_net::operator::{operate, OperateOptions, Pace};
use teleoplab_net::{device_node, server, sim_node};

/// Teleoperated materials-testing cell: host server, arm simulator, tester
/// emulator and scripted operator.
///
/// Exit codes: 0 success, 1 a checked outcome failed, 2 usage or config error.
#[derive(Parser)]
#[command(name = "teleoplab", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the host server: operator stream, command and feedback
    /// datagrams, tester link and the web gateway.
    Serve(ServeArgs),
    /// Run the arm simulator behind the command datagram port.
    Sim(SimArgs),
    /// Run the tester emulator on the line-protocol port.
    DeviceEmu(DeviceArgs),
    /// Replay a waypoint script against a running server; exits 0 iff every
    /// expected task event fired.
    Operate(OperateArgs),
    /// Benchmark IK over random targets with known solutions.
    BenchIk(BenchArgs),
    /// Write the golden pick-place-test-return script.
    GenScript(GenArgs),
    /// Check a simulator trace against the joint speed cap and limits.
    CheckTrace(CheckTraceArgs),
}

#[derive(Args)]
struct Lifetime {
    /// Exit after this many seconds instead of waiting for a signal.
    #[arg(long, value_name = "SECONDS")]
    run_for: Option<f64>,
}

impl Lifetime {
    fn duration(&self) -> Result<Option<Duration>, CliError> {
        self.run_for
            .map(|s| Duration::try_from_secs_f64(s).map_err(|_| CliError::Config(format!("bad --run-for {s}"))))
            .transpose()
    }
}

#[derive(Args)]
struct ServeArgs {
    /// Server config (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    stream_port: Option<u16>,
    /// Simulator command port the server sends to.
    #[arg(long)]
    command_port: Option<u16>,
    #[arg(long)]
    feedback_port: Option<u16>,
    /// Tester emulator port the server connects to.
    #[arg(long)]
    device_port: Option<u16>,
    #[arg(long)]
    gateway_port: Option<u16>,
    #[arg(long)]
    command_hz: Option<f64>,
    #[arg(long)]
    state_hz: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for report.json, latency.csv and cycles.csv at session end.
    #[arg(long)]
    metrics_dir: Option<PathBuf>,
    #[command(flatten)]
    life: Lifetime,
}

#[derive(Args)]
struct SimArgs {
    /// Server config; supplies the arm and default ports.
    #[arg(long)]
    config: PathBuf,
    /// Command port or address to listen on.
    #[arg(long)]
    listen: Option<String>,
    /// Where feedback goes; defaults to the sender of the latest command.
    #[arg(long)]
    feedback: Option<String>,
    /// Write a per-tick CSV trace (tick, q1..q6, last_seq).
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 250.0)]
    tick_rate: f64,
    /// Only pick up commands at this polling rate, e.g. `4hz`.
    #[arg(long, value_name = "RATE")]
    legacy_rate: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    delay_ms: f64,
    #[arg(long, default_value_t = 0.0)]
    jitter_ms: f64,
    #[arg(long, default_value_t = 0.0)]
    loss_pct: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    life: Lifetime,
}

#[derive(Args)]
struct DeviceArgs {
    /// Server config; supplies the default device port.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    listen: Option<String>,
    /// Append completed test results to this CSV.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Length of one tensile test.
    #[arg(long, default_value_t = 8.0)]
    test_seconds: f64,
    /// Seed of the specimen yield noise.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    life: Lifetime,
}

#[derive(Args)]
struct OperateArgs {
    #[arg(long)]
    script: PathBuf,
    /// Server config; supplies the stream port.
    #[arg(long, conflicts_with = "server")]
    config: Option<PathBuf>,
    /// Operator stream address of the server.
    #[arg(long, default_value = "127.0.0.1:6040")]
    server: String,
    /// Send rows as fast as the server acknowledges them instead of at
    /// their scripted times.
    #[arg(long)]
    accelerated: bool,
    #[arg(long, default_value = "scripted")]
    operator_id: String,
    /// Write the outcome as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Server config; supplies the arm and IK settings.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest per-joint seed perturbation, degrees.
    #[arg(long, default_value_t = 5.0)]
    perturb_deg: f64,
    #[arg(long, value_enum, default_value_t = BenchMode::Random)]
    mode: BenchMode,
    /// Exit 1 unless success, timing and residual thresholds hold.
    #[arg(long)]
    check: bool,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 1)]
    cycles: u32,
    /// Target length of one cycle, seconds.
    #[arg(long, default_value_t = 70.0)]
    cycle_seconds: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckTraceArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value_t = 250.0)]
    tick_rate: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Serve(a) => serve(a),
        Cmd::Sim(a) => sim(a),
        Cmd::DeviceEmu(a) => device_emu(a),
        Cmd::Operate(a) => run_operate(a),
        Cmd::BenchIk(a) => bench_ik(a),
        Cmd::GenScript(a) => gen_script(a),
        Cmd::CheckTrace(a) => check_trace_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::from(exit::SUCCESS),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.config)?;
    let p = &mut cfg.ports;
    if let Some(h) = a.host {
        p.host = h;
    }
    for (slot, v) in [
        (&mut p.stream, a.stream_port),
        (&mut p.command, a.command_port),
        (&mut p.feedback, a.feedback_port),
        (&mut p.device, a.device_port),
        (&mut p.gateway, a.gateway_port),
    ] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    for (slot, v) in [(&mut cfg.command_hz, a.command_hz), (&mut cfg.state_hz, a.state_hz)] {
        if let Some(v) = v {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::Config(format!("rate must be positive, got {v}")));
            }
            *slot = v;
        }
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let life = a.life.duration()?;
    let handle = server::start(cfg, server::ServeOptions { metrics_dir: a.metrics_dir })?;
    println!(
        "listening stream={} feedback={} gateway={}",
        handle.stream_addr, handle.feedback_addr, handle.gateway_addr
    );
    wait_for_shutdown(life)?;
    handle.shutdown();
    Ok(())
}

fn sim(a: SimArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.config)?;
    let host = cfg.ports.host.clone();
    let legacy_period_ms = match &a.legacy_rate {
        Some(r) => Some(parse_rate_hz(r).ok_or_else(|| CliError::Config(format!("bad --legacy-rate `{r}`")))?),
        None => None,
    };
    let sim = SimConfig {
        tick_rate: a.tick_rate,
        delay_ms: a.delay_ms,
        jitter_ms: a.jitter_ms,
        loss_pct: a.loss_pct,
        seed: a.seed,
        legacy_period_ms,
    };
    sim.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let listen = match &a.listen {
        Some(s) => endpoint(s, &host)?,
        None => endpoint(&cfg.ports.command.to_string(), &host)?,
    };
    let feedback = a.feedback.as_deref().map(|s| endpoint(s, &host)).transpose()?;
    let life = a.life.duration()?;
    let handle = sim_node::start(cfg.arm, sim_node::SimNodeOptions { sim, listen, feedback, trace: a.trace })?;
    println!("listening command={}", handle.listen_addr);
    wait_for_shutdown(life)?;
    let s = handle.shutdown()?;
    println!(
        "ticks {} commands {} stale {} dropped {}",
        s.ticks, s.commands, s.stale_commands, s.dropped_commands
    );
    Ok(())
}

fn device_emu(a: DeviceArgs) -> Result<(), CliError> {
    let cfg = a.config.as_deref().map(load_config).transpose()?;
    let (host, port) = cfg
        .as_ref()
        .map_or(("127.0.0.1".to_string(), 6050), |c| (c.ports.host.clone(), c.ports.device));
    let listen = endpoint(a.listen.as_deref().unwrap_or(&port.to_string()), &host)?;
    let mut specimen = SpecimenModel::default();
    if let Some(s) = a.seed {
        specimen.seed = s;
    }
    let duration = Duration::try_from_secs_f64(a.test_seconds)
        .ok()
        .filter(|d| !d.is_zero())
        .ok_or_else(|| CliError::Config(format!("bad --test-seconds {}", a.test_seconds)))?;
    let tester = Tester::new(specimen, duration.as_micros() as u64).map_err(|e| CliError::Config(e.to_string()))?;
    let life = a.life.duration()?;
    let handle = device_node::start(tester, device_node::DeviceNodeOptions { listen, results: a.results })?;
    println!("listening device={}", handle.listen_addr);
    wait_for_shutdown(life)?;
    println!("{}", handle.status_line());
    handle.shutdown();
    Ok(())
}

fn run_operate(a: OperateArgs) -> Result<(), CliError> {
    let script = ReplayScript::from_file(&a.script).map_err(|e| CliError::Config(format!("{}: {e}", a.script.display())))?;
    let server = match &a.config {
        Some(p) => {
            let cfg = load_config(p)?;
            endpoint(&cfg.ports.stream.to_string(), &cfg.ports.host)?
        }
        None => endpoint(&a.server, "127.0.0.1")?,
    };
    let pace = if a.accelerated { Pace::Accelerated } else { Pace::RealTime };
    let mut opts = OperateOptions::new(server, pace);
    opts.operator_id = a.operator_id;
    let report = operate(&script, &opts)?;
    let wall: Vec<f64> = report.wall_cycles().iter().map(Duration::as_secs_f64).collect();
    println!(
        "waypoints {}  cycles {}  events {}/{}  settle timeouts {}",
        report.waypoints_sent,
        report.cycles(),
        report.observed.len(),
        report.expected.len(),
        report.settle_timeouts
    );
    if pace == Pace::RealTime && !wall.is_empty() {
        let shown: Vec<String> = wall.iter().map(|s| format!("{s:.1}")).collect();
        println!("wall-clock cycles (s): {}", shown.join(" "));
    }
    if let Some(path) = &a.report {
        let doc = serde_json::json!({
            "events_match": report.events_match(),
            "expected": report.expected.iter().map(|e| e.as_str()).collect::<Vec<_>>(),
            "observed": report.observed.iter().map(|e| e.as_str()).collect::<Vec<_>>(),
            "cycles": report.cycles(),
            "wall_cycles_s": wall,
            "waypoints_sent": report.waypoints_sent,
            "settle_timeouts": report.settle_timeouts,
        });
        std::fs::write(path, serde_json::to_string_pretty(&doc).expect("plain values"))
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    }
    if report.events_match() {
        Ok(())
    } else {
        Err(CliError::Assertion(format!("task events differ from the script:\n{}", report.diff())))
    }
}

fn bench_ik(a: BenchArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.config)?;
    let opts = BenchOptions { n: a.n, seed: a.seed, perturb_deg: a.perturb_deg, mode: a.mode, ik: cfg.ik };
    let report = bench::run(&cfg.arm, &opts);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("plain values"));
    } else {
        println!("{}", report.summary());
    }
    if a.check {
        let failed: Vec<String> = report
            .checks(&cfg.ik)
            .into_iter()
            .filter(|(_, ok)| !ok)
            .map(|(what, _)| what)
            .collect();
        if !failed.is_empty() {
            return Err(CliError::Assertion(format!("bench thresholds missed: {}", failed.join("; "))));
        }
    }
    Ok(())
}

fn gen_script(a: GenArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.config)?;
    let pacing = Pacing { cycle: a.cycle_seconds, ..Pacing::default() };
    let golden = golden_script(&cfg, a.cycles, pacing).map_err(|e| CliError::Config(e.to_string()))?;
    golden
        .script
        .to_file(&a.out)
        .map_err(|e| CliError::Config(format!("{}: {e}", a.out.display())))?;
    println!(
        "{} rows, {} expected events, {:.1} s",
        golden.script.len(),
        golden.script.expected_events().len(),
        golden.script.duration_us() as f64 / 1e6
    );
    Ok(())
}

fn check_trace_cmd(a: CheckTraceArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.config)?;
    let rows = read_trace(&a.trace).map_err(|e| CliError::Config(format!("{}: {e}", a.trace.display())))?;
    let c = check_trace(&rows, &cfg.arm, a.tick_rate);
    let cap = cfg.arm.velocity_cap();
    println!(
        "ticks {}  max joint speed {:.6} deg/s (cap {:.6})  limit violations {}",
        c.ticks,
        c.max_velocity.to_degrees(),
        cap.to_degrees(),
        c.limit_violations
    );
    if c.max_velocity <= cap + 1e-9 && c.limit_violations == 0 {
        Ok(())
    } else {
        Err(CliError::Assertion("trace exceeds the speed cap or joint limits".into()))
    }
}
