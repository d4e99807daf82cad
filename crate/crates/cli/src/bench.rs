//! IK latency benchmark over random targets with known solutions.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::time::Instant;
use teleoplab::geometry::{exp_so3, Pose};
use teleoplab::ik::{fk_residual, solve, IkRequest, IkStatus};
use teleoplab::kinematics::{forward, ArmModel};
use teleoplab::server::{percentile, IkSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum BenchMode {
    /// Targets are FK of random in-limit configurations.
    Random,
    /// The home pose, seeded at home.
    Trivial,
    /// Targets beyond the arm's reach.
    Unreachable,
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub n: usize,
    pub seed: u64,
    /// Largest per-joint seed perturbation from the true configuration.
    pub perturb_deg: f64,
    pub mode: BenchMode,
    pub ik: IkSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub n: usize,
    pub converged: usize,
    pub budget_exhausted: usize,
    pub unreachable: usize,
    pub median_us: f64,
    pub p95_us: f64,
    pub max_us: f64,
    /// Largest FK residual over converged solves, meters and radians.
    pub max_pos_residual: f64,
    pub max_rot_residual: f64,
    pub wall_s: f64,
}

impl BenchReport {
    pub fn success_rate(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        self.converged as f64 / self.n as f64
    }

    /// Named pass/fail checks against the solver budget and tolerances.
    pub fn checks(&self, ik: &IkSettings) -> Vec<(String, bool)> {
        let budget_us = ik.budget.as_secs_f64() * 1e6;
        vec![
            (format!("success {:.2}% >= 99%", 100.0 * self.success_rate()), self.success_rate() >= 0.99),
            (format!("median {:.1} us < {budget_us:.0} us", self.median_us), self.median_us < budget_us),
            (format!("p95 {:.1} us < {:.0} us", self.p95_us, 2.0 * budget_us), self.p95_us < 2.0 * budget_us),
            (
                format!("max position residual {:.2e} m <= {:.0e}", self.max_pos_residual, ik.pos_tol),
                self.max_pos_residual <= ik.pos_tol,
            ),
            (
                format!("max rotation residual {:.2e} rad <= {:.0e}", self.max_rot_residual, ik.rot_tol),
                self.max_rot_residual <= ik.rot_tol,
            ),
        ]
    }

    pub fn summary(&self) -> String {
        format!(
            "targets {}  converged {} ({:.2}%)  budget-exhausted {}  unreachable {}\n\
             solve time  median {:.1} us  p95 {:.1} us  max {:.1} us\n\
             FK residual max {:.3e} m  {:.3e} rad\n\
             wall {:.3} s",
            self.n,
            self.converged,
            100.0 * self.success_rate(),
            self.budget_exhausted,
            self.unreachable,
            self.median_us,
            self.p95_us,
            self.max_us,
            self.max_pos_residual,
            self.max_rot_residual,
            self.wall_s
        )
    }
}

fn random_in_limits(model: &ArmModel, rng: &mut ChaCha8Rng) -> Vec<f64> {
    use std::f64::consts::PI;
    model
        .limits()
        .iter()
        .map(|l| rng.random_range(l.min.max(-PI)..=l.max.min(PI)))
        .collect()
}

/// One target with its seed.
fn draw(model: &ArmModel, opts: &BenchOptions, rng: &mut ChaCha8Rng) -> (Pose, Vec<f64>) {
    match opts.mode {
        BenchMode::Trivial => {
            let home = model.home().to_vec();
            (forward(model, &home).expect("home has the arm's length"), home)
        }
        BenchMode::Random => {
            let truth = random_in_limits(model, rng);
            let target = forward(model, &truth).expect("drawn per joint");
            let max = opts.perturb_deg.to_radians();
            let seed = truth
                .iter()
                .zip(model.limits())
                .map(|(v, l)| l.clamp(v + rng.random_range(-max..=max)))
                .collect();
            (target, seed)
        }
        BenchMode::Unreachable => {
            let dir = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .try_normalize(1e-6)
            .unwrap_or_else(Vector3::z);
            let p = dir * model.reach() * rng.random_range(1.1..3.0);
            let r = exp_so3(&Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ));
            (Pose::from_parts(p, r), random_in_limits(model, rng))
        }
    }
}

pub fn run(model: &ArmModel, opts: &BenchOptions) -> BenchReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut times_ns = Vec::with_capacity(opts.n);
    let (mut converged, mut exhausted, mut unreachable) = (0, 0, 0);
    let (mut max_pos, mut max_rot) = (0.0f64, 0.0f64);
    let wall = Instant::now();
    for i in 0..opts.n {
        let (target, seed) = draw(model, opts, &mut rng);
        let req = IkRequest::new(target, seed)
            .with_tolerances(opts.ik.pos_tol, opts.ik.rot_tol)
            .with_budget(opts.ik.budget)
            .with_max_iterations(opts.ik.max_iterations)
            .with_rng_seed(opts.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let t0 = Instant::now();
        let sol = solve(model, &req).expect("bench requests are well formed");
        times_ns.push(t0.elapsed().as_nanos() as u64);
        match sol.status {
            IkStatus::Converged => {
                converged += 1;
                let (dp, dr) = fk_residual(model, &sol.q.q, &target).expect("solution has the arm's length");
                max_pos = max_pos.max(dp);
                max_rot = max_rot.max(dr);
            }
            IkStatus::BudgetExhausted => exhausted += 1,
            IkStatus::Unreachable => unreachable += 1,
        }
    }
    let us = |p: f64| percentile(&times_ns, p).map_or(0.0, |ns| ns as f64 / 1e3);
    BenchReport {
        n: opts.n,
        converged,
        budget_exhausted: exhausted,
        unreachable,
        median_us: us(50.0),
        p95_us: us(95.0),
        max_us: us(100.0),
        max_pos_residual: max_pos,
        max_rot_residual: max_rot,
        wall_s: wall.elapsed().as_secs_f64(),
    }
}
