//! Budgeted inverse kinematics and configuration-consistent solution
//! selection.
//!
//! [`solve`] runs damped least squares (Levenberg damping with an adaptive
//! λ) from the request seed. Every iterate is projected back into the joint
//! limits. When progress stalls before the budget is spent the solver
//! restarts from a bounded random perturbation of the seed; the perturbation
//! generator is seeded from the request so runs replay exactly.
//!
//! [`select_solution`] picks among converged candidates: it drops
//! near-singular or near-limit solutions, prefers the configuration branch
//! of the previous command, then the closest candidate in joint space.

use crate::geometry::{error_twist, wrap_angle, Pose, Twist};
use crate::kinematics::{
    forward, jacobian_from_frames, manipulability, ArmModel, JointState, KinematicsError,
};
use nalgebra::{Matrix6, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::{Duration, Instant};

pub const DEFAULT_POS_TOL: f64 = 1e-4;
pub const DEFAULT_ROT_TOL: f64 = 1e-3;
pub const DEFAULT_BUDGET: Duration = Duration::from_micros(1000);
pub const DEFAULT_MAX_ITERATIONS: u32 = 2000;

pub const LAMBDA_INIT: f64 = 1e-3;
pub const LAMBDA_MIN: f64 = 1e-6;
pub const LAMBDA_MAX: f64 = 1e-1;
pub const LAMBDA_GROW: f64 = 2.0;
pub const LAMBDA_SHRINK: f64 = 1.5;

/// Largest joint change taken in one iteration, radians.
const MAX_STEP: f64 = 0.4;
/// Consecutive non-improving iterations before a restart.
const STALL_LIMIT: u32 = 6;
/// An accepted step must cut the cost by at least this fraction to reset
/// the stall counter.
const MIN_PROGRESS: f64 = 1e-3;
/// Half-width of the restart perturbation for the first restart, radians;
/// it grows linearly with the restart count up to π.
const RESTART_RADIUS: f64 = 0.35;

/// Default minimum singular value for a healthy solution.
pub const DEFAULT_MIN_MANIPULABILITY: f64 = 1e-3;
/// Default keep-away distance from joint limits, degrees.
pub const DEFAULT_LIMIT_MARGIN_DEG: f64 = 2.0;

#[derive(Debug, thiserror::Error)]
pub enum IkError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("seed is outside the joint limits")]
    SeedOutsideLimits,
    #[error("invalid request: {0}")]
    InvalidRequest(&'static str),
    #[error("no candidates to select from")]
    NoCandidates,
    #[error("candidate {0} is not converged")]
    NotConverged(usize),
}

#[derive(Clone, Debug)]
pub struct IkRequest {
    pub target: Pose,
    pub seed: JointState,
    /// Position tolerance, meters.
    pub pos_tol: f64,
    /// Orientation tolerance, radians.
    pub rot_tol: f64,
    /// Wall-clock budget.
    pub budget: Duration,
    /// Deterministic iteration cap applied alongside the wall-clock budget.
    pub max_iterations: u32,
    /// Seed of the restart perturbation generator.
    pub rng_seed: u64,
}

impl IkRequest {
    pub fn new(target: Pose, seed: impl Into<JointState>) -> Self {
        Self {
            target,
            seed: seed.into(),
            pos_tol: DEFAULT_POS_TOL,
            rot_tol: DEFAULT_ROT_TOL,
            budget: DEFAULT_BUDGET,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            rng_seed: 0,
        }
    }

    pub fn with_budget(mut self, budget: Duration) -> Self {
        self.budget = budget;
        self
    }

    pub fn with_tolerances(mut self, pos_tol: f64, rot_tol: f64) -> Self {
        self.pos_tol = pos_tol;
        self.rot_tol = rot_tol;
        self
    }

    pub fn with_rng_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn with_max_iterations(mut self, n: u32) -> Self {
        self.max_iterations = n;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shoulder {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Elbow {
    Up,
    Down,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Wrist {
    Flip,
    NoFlip,
}

/// Discrete posture branch of a solution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConfigIndicator {
    pub shoulder: Shoulder,
    pub elbow: Elbow,
    pub wrist: Wrist,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IkStatus {
    Converged,
    BudgetExhausted,
    Unreachable,
}

#[derive(Clone, Debug)]
pub struct IkSolution {
    pub q: JointState,
    /// Remaining error from the solution's TCP to the target.
    pub residual: Twist,
    pub iterations: u32,
    pub restarts: u32,
    pub config: ConfigIndicator,
    pub status: IkStatus,
}

impl IkSolution {
    pub fn converged(&self) -> bool {
        self.status == IkStatus::Converged
    }
}

fn within(err: &Twist, pos_tol: f64, rot_tol: f64) -> bool {
    err.linear.norm() <= pos_tol && err.angular.norm() <= rot_tol
}

fn cost(err: &Twist) -> f64 {
    err.linear.norm_squared() + err.angular.norm_squared()
}

fn evaluate(model: &ArmModel, q: &[f64], target: &Pose) -> (Vec<Pose>, Twist) {
    let frames = model.frames(q).expect("length checked by caller");
    let tcp = crate::geometry::compose(&frames[model.dof()], model.tool_offset());
    let err = error_twist(&tcp, target);
    (frames, err)
}

/// Solves for joint angles that place the TCP at `req.target`.
///
/// Returns `Err` only for malformed requests (wrong length, seed outside
/// limits, non-positive tolerances or budget); every other outcome is
/// reported through [`IkSolution::status`].
pub fn solve(model: &ArmModel, req: &IkRequest) -> Result<IkSolution, IkError> {
    let start = Instant::now();
    model.check_len(req.seed.len())?;
    if !(req.pos_tol > 0.0 && req.rot_tol > 0.0) {
        return Err(IkError::InvalidRequest("tolerances must be positive"));
    }
    if req.budget.is_zero() || req.max_iterations == 0 {
        return Err(IkError::InvalidRequest("budget must be positive"));
    }
    if !model.within_limits(&req.seed.q) {
        return Err(IkError::SeedOutsideLimits);
    }
    let seed = &req.seed.q;
    let finish = |q: Vec<f64>, residual: Twist, iterations, restarts, status| -> Result<_, IkError> {
        let config = indicator_unchecked(model, &q);
        Ok(IkSolution {
            q: JointState::at(q, req.seed.timestamp),
            residual,
            iterations,
            restarts,
            config,
            status,
        })
    };

    let (mut frames, mut err) = evaluate(model, seed, &req.target);
    if req.target.position().norm() > model.reach() || !req.target.is_finite() {
        return finish(seed.clone(), err, 0, 0, IkStatus::Unreachable);
    }
    if within(&err, req.pos_tol, req.rot_tol) {
        return finish(seed.clone(), err, 0, 0, IkStatus::Converged);
    }

    let n = model.dof();
    let mut rng = ChaCha8Rng::seed_from_u64(req.rng_seed);
    let mut q = seed.clone();
    let mut c = cost(&err);
    let mut best = (q.clone(), err, c);
    let mut lambda = LAMBDA_INIT;
    let mut stall = 0;
    let mut iterations = 0u32;
    let mut restarts = 0u32;
    let mut candidate = vec![0.0; n];

    loop {
        if iterations >= req.max_iterations || start.elapsed() >= req.budget {
            let (q, err, _) = best;
            return finish(q, err, iterations, restarts, IkStatus::BudgetExhausted);
        }
        iterations += 1;

        let j = jacobian_from_frames(model, &frames);
        let e = Vector6::new(
            err.linear.x,
            err.linear.y,
            err.linear.z,
            err.angular.x,
            err.angular.y,
            err.angular.z,
        );
        let a: Matrix6<f64> = &j * j.transpose() + Matrix6::identity() * lambda;
        let Some(x) = a.cholesky().map(|ch| ch.solve(&e)) else {
            lambda = (lambda * LAMBDA_GROW).min(LAMBDA_MAX);
            stall += 1;
            continue;
        };
        let mut dq = j.transpose() * x;
        let largest = dq.amax();
        if largest > MAX_STEP {
            dq *= MAX_STEP / largest;
        }
        for i in 0..n {
            candidate[i] = model.limits()[i].clamp(q[i] + dq[i]);
        }
        let (cand_frames, cand_err) = evaluate(model, &candidate, &req.target);
        let cand_cost = cost(&cand_err);
        if cand_cost < c {
            lambda = (lambda / LAMBDA_SHRINK).max(LAMBDA_MIN);
            if cand_cost > c * (1.0 - MIN_PROGRESS) {
                stall += 1;
            } else {
                stall = 0;
            }
            q.copy_from_slice(&candidate);
            frames = cand_frames;
            err = cand_err;
            c = cand_cost;
            if c < best.2 {
                best = (q.clone(), err, c);
            }
            if within(&err, req.pos_tol, req.rot_tol) {
                return finish(q, err, iterations, restarts, IkStatus::Converged);
            }
        } else {
            lambda = (lambda * LAMBDA_GROW).min(LAMBDA_MAX);
            stall += 1;
        }

        if stall >= STALL_LIMIT {
            restarts += 1;
            let radius = (RESTART_RADIUS * restarts as f64).min(std::f64::consts::PI);
            for i in 0..n {
                let offset = rng.random_range(-radius..=radius);
                q[i] = model.limits()[i].clamp(seed[i] + offset);
            }
            let (f, e) = evaluate(model, &q, &req.target);
            frames = f;
            err = e;
            c = cost(&err);
            lambda = LAMBDA_INIT;
            stall = 0;
        }
    }
}

fn indicator_unchecked(model: &ArmModel, q: &[f64]) -> ConfigIndicator {
    let spec = model.indicator_joints();
    let rows = model.joints();
    let frames = model.frames(q).expect("length checked by caller");
    let wc = frames[spec.wrist_center_frame].position();
    // Radial coordinate of the wrist center in the base frame turned by the
    // first joint: reaching forward vs reaching back over the shoulder.
    let phi = q[0] + rows[0].theta_offset;
    let radial = phi.cos() * wc.x + phi.sin() * wc.y;
    let shoulder = if radial >= 0.0 {
        Shoulder::Left
    } else {
        Shoulder::Right
    };
    let elbow_angle = wrap_angle(q[spec.elbow] + rows[spec.elbow].theta_offset);
    let elbow = if elbow_angle >= 0.0 {
        Elbow::Up
    } else {
        Elbow::Down
    };
    let wrist = match spec.wrist {
        Some(w) if wrap_angle(q[w] + rows[w].theta_offset) < 0.0 => Wrist::Flip,
        _ => Wrist::NoFlip,
    };
    ConfigIndicator {
        shoulder,
        elbow,
        wrist,
    }
}

/// Posture branch of `q`. Zero-valued signs resolve to
/// `{Left, Up, NoFlip}`.
pub fn configuration_indicator(model: &ArmModel, q: &[f64]) -> Result<ConfigIndicator, IkError> {
    model.check_len(q.len())?;
    Ok(indicator_unchecked(model, q))
}

/// Thresholds used by [`select_solution`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectParams {
    pub min_manipulability: f64,
    /// Radians.
    pub limit_margin: f64,
}

impl Default for SelectParams {
    fn default() -> Self {
        Self {
            min_manipulability: DEFAULT_MIN_MANIPULABILITY,
            limit_margin: DEFAULT_LIMIT_MARGIN_DEG.to_radians(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub solution: IkSolution,
    /// Position of the chosen candidate in the input slice.
    pub index: usize,
    /// Every candidate failed the singularity or limit filter; the most
    /// manipulable one was returned instead.
    pub degraded: bool,
}

/// Chooses one converged candidate relative to the previous command.
pub fn select_solution(
    candidates: &[IkSolution],
    previous: &[f64],
    model: &ArmModel,
    params: &SelectParams,
) -> Result<Selection, IkError> {
    if candidates.is_empty() {
        return Err(IkError::NoCandidates);
    }
    model.check_len(previous.len())?;
    if let Some(i) = candidates.iter().position(|c| !c.converged()) {
        return Err(IkError::NotConverged(i));
    }
    let prev_config = indicator_unchecked(model, previous);

    struct Scored {
        index: usize,
        manip: f64,
        healthy: bool,
        same_branch: bool,
        distance: f64,
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for (index, cand) in candidates.iter().enumerate() {
        model.check_len(cand.q.len())?;
        let manip = manipulability(model, &cand.q.q)?;
        let near_limit = cand
            .q
            .q
            .iter()
            .zip(model.limits())
            .any(|(v, l)| l.margin(*v) < params.limit_margin);
        let distance = cand
            .q
            .q
            .iter()
            .zip(previous)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        scored.push(Scored {
            index,
            manip,
            healthy: manip >= params.min_manipulability && !near_limit,
            same_branch: indicator_unchecked(model, &cand.q.q) == prev_config,
            distance,
        });
    }

    let pick = if scored.iter().any(|s| s.healthy) {
        scored
            .iter()
            .filter(|s| s.healthy)
            .min_by(|a, b| {
                b.same_branch
                    .cmp(&a.same_branch)
                    .then(a.distance.total_cmp(&b.distance))
                    .then(a.index.cmp(&b.index))
            })
            .map(|s| (s.index, false))
    } else {
        scored
            .iter()
            .min_by(|a, b| {
                b.manip
                    .total_cmp(&a.manip)
                    .then(a.index.cmp(&b.index))
            })
            .map(|s| (s.index, true))
    };
    let (index, degraded) = pick.expect("non-empty");
    Ok(Selection {
        solution: candidates[index].clone(),
        index,
        degraded,
    })
}

/// Convenience check used by tests and benchmarks: FK error of a solution.
pub fn fk_residual(model: &ArmModel, q: &[f64], target: &Pose) -> Result<(f64, f64), IkError> {
    let tcp = forward(model, q)?;
    Ok(tcp.distance(target))
}
