use std::path::Path;
use teleoplab::kinematics::forward;
use teleoplab::lockstep::{self, LockstepOptions, LockstepRun};
use teleoplab::motion::admissible;
use teleoplab::protocol::Gripper;
use teleoplab::script::{golden_script, Pacing, ReplayScript, ScriptRow};
use teleoplab::server::{ServerConfig, GATE_TOL};
use teleoplab::sim::check_trace;
use teleoplab::task::TaskEvent;

fn shipped() -> ServerConfig {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config");
    ServerConfig::from_file(dir.join("server.toml")).unwrap()
}

/// Intervals of host time during which the script held the clutch.
fn engaged_intervals(script: &ReplayScript, run: &LockstepRun) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    let mut open = None;
    for (row, at) in script.rows().iter().zip(&run.delivered_at) {
        match (row.clutch == 1, open) {
            (true, None) => open = Some(*at),
            (false, Some(s)) => {
                out.push((s, *at));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        out.push((s, u64::MAX));
    }
    out
}

fn check_safety(cfg: &ServerConfig, script: &ReplayScript, run: &LockstepRun) {
    let model = &cfg.arm;
    let intervals = engaged_intervals(script, run);
    for (at, cmd) in &run.commands {
        assert!(
            intervals.iter().any(|(a, b)| at >= a && at < b),
            "command {} at {at} outside any engaged interval",
            cmd.seq
        );
        assert!(model.within_limits(&cmd.q_target), "command {} leaves the joint limits", cmd.seq);
        let tcp = forward(model, &cmd.q_target).unwrap().position();
        assert!(admissible(&cfg.fences, &tcp, GATE_TOL), "command {} leaves the fences", cmd.seq);
    }
    let check = check_trace(&run.trace, model, 250.0);
    assert_eq!(check.limit_violations, 0);
    assert!(check.max_velocity <= model.velocity_cap() + 1e-9, "{}", check.max_velocity);
}

#[test]
fn golden_cycle_end_to_end() {
    let cfg = shipped();
    let golden = golden_script(&cfg, 1, Pacing::default()).unwrap();
    let run = lockstep::run(cfg.clone(), &golden.script, &LockstepOptions::default()).unwrap();
    let observed: Vec<TaskEvent> = run.events.iter().map(|e| e.1).collect();
    assert_eq!(observed, golden.script.expected_events());
    assert_eq!(run.metrics.cycles.len(), 1);
    assert_eq!(run.results.len(), 1);
    assert_eq!(run.metrics.degraded_events, 0);

    let terminal = golden.robot_targets.last().unwrap();
    let err = (run.final_tcp.position() - terminal.position()).norm();
    assert!(err < 1e-3, "final TCP is {err} m from the terminal target");

    assert_eq!(run.metrics.engage_jumps_m.len(), 2);
    assert!(run.metrics.engage_jumps_m.iter().all(|j| *j <= 1e-6), "{:?}", run.metrics.engage_jumps_m);
    check_safety(&cfg, &golden.script, &run);
}

#[test]
fn ten_cycles_follow_the_schedule() {
    let cfg = shipped();
    let golden = golden_script(&cfg, 10, Pacing::default()).unwrap();
    let run = lockstep::run(cfg.clone(), &golden.script, &LockstepOptions::default()).unwrap();

    let marks: Vec<u64> = golden
        .script
        .rows()
        .iter()
        .filter(|r| matches!(r.expect, Some(TaskEvent::Connected | TaskEvent::Returned)))
        .map(|r| r.time_us)
        .collect();
    // One waypoint period, rounded up to the microsecond timestamps.
    let frame = (1e6 / cfg.waypoint_hz).ceil() / 1e6;
    assert_eq!(run.metrics.cycles.len(), 10);
    for (c, w) in run.metrics.cycles.iter().zip(marks.windows(2)) {
        let scheduled = (w[1] - w[0]) as f64 / 1e6;
        assert!(
            (c.seconds - scheduled).abs() <= frame + 1e-9,
            "cycle {} took {} s, scheduled {scheduled} s",
            c.iteration,
            c.seconds
        );
        assert!((60.0..=80.0).contains(&c.seconds));
    }
    assert_eq!(run.metrics.engage_jumps_m.len(), 20);
    assert!(run.metrics.engage_jumps_m.iter().all(|j| *j <= 1e-6));
    assert_eq!(run.metrics.task_warnings, 0);
    check_safety(&cfg, &golden.script, &run);
}

#[test]
fn released_clutch_never_moves_the_arm() {
    let cfg = shipped();
    let golden = golden_script(&cfg, 1, Pacing::default()).unwrap();
    let rows: Vec<ScriptRow> = golden
        .script
        .rows()
        .iter()
        .map(|r| ScriptRow { clutch: 0, expect: None, ..r.clone() })
        .collect();
    let script = ReplayScript::new(rows).unwrap();
    let run = lockstep::run(cfg.clone(), &script, &LockstepOptions::default()).unwrap();
    assert!(run.commands.is_empty());
    let home = cfg.arm.home();
    for row in &run.trace {
        assert_eq!(row.q().as_slice(), home);
    }
}

#[test]
fn fence_violating_script_is_clamped_and_safe() {
    let cfg = shipped();
    let golden = golden_script(&cfg, 1, Pacing::default()).unwrap();
    // Triple the hand motion while engaged: the arm is asked through the
    // table, out of the workspace and into the tester body.
    let k = |v: f64, r: &ScriptRow| if r.clutch == 1 { 3.0 * v } else { v };
    let rows: Vec<ScriptRow> = golden
        .script
        .rows()
        .iter()
        .map(|r| ScriptRow {
            px: k(r.px, r),
            py: k(r.py, r),
            pz: k(r.pz, r),
            gripper: Gripper::Hold,
            expect: None,
            ..r.clone()
        })
        .collect();
    let script = ReplayScript::new(rows).unwrap();
    let run = lockstep::run(cfg.clone(), &script, &LockstepOptions::default()).unwrap();
    assert!(run.metrics.clamped_waypoints > 0);
    assert!(run.states.iter().any(|s| s.clamped));
    check_safety(&cfg, &script, &run);
}

#[test]
fn replay_is_deterministic() {
    let cfg = shipped();
    let golden = golden_script(&cfg, 2, Pacing::default()).unwrap();
    let a = lockstep::run(cfg.clone(), &golden.script, &LockstepOptions::default()).unwrap();
    let b = lockstep::run(cfg, &golden.script, &LockstepOptions::default()).unwrap();
    assert_eq!(a.metrics.cycles, b.metrics.cycles);
    assert_eq!(a.results, b.results);
    assert_eq!(a.events, b.events);
}
