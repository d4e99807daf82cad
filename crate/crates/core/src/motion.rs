//! Operator pose → robot target pipeline stages.
//!
//! The stages run in a fixed order for every waypoint:
//! clutch → frame map ([`clutch_target`]) → [`filter_step`] →
//! [`apply_fences`] → IK → selection → [`rate_limit`]. The IK and selection
//! stages live in [`crate::ik`]; the order is wired up in
//! [`crate::server::MotionPipeline`].

use crate::geometry::{compose, delta, slerp, Pose};
use crate::kinematics::{ArmModel, JointState};
use nalgebra::{UnitQuaternion, Vector3};

/// Maximum projection passes before falling back to the current position.
pub const MAX_FENCE_PASSES: usize = 10;

/// Slack used when testing a fence for violation after projection.
const FENCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MotionError {
    #[error("clutch is not engaged")]
    ClutchDisengaged,
    #[error("invalid motion configuration: {0}")]
    InvalidConfig(String),
    #[error("joint vectors differ in length ({0} vs {1})")]
    Dimension(usize, usize),
    #[error("time step must be positive, got {0}")]
    BadTimeStep(f64),
}

/// Clutch latch: origins are captured on engage and held until release.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ClutchState {
    engaged: bool,
    origin_operator: Pose,
    origin_robot: Pose,
}

impl ClutchState {
    pub fn released() -> Self {
        Self::default()
    }

    /// Latches both origins. Has no effect while already engaged.
    pub fn engage(&mut self, operator: Pose, robot: Pose) -> bool {
        if self.engaged {
            return false;
        }
        self.engaged = true;
        self.origin_operator = operator;
        self.origin_robot = robot;
        true
    }

    pub fn release(&mut self) -> bool {
        std::mem::replace(&mut self.engaged, false)
    }

    pub fn is_engaged(&self) -> bool {
        self.engaged
    }

    pub fn origin_operator(&self) -> &Pose {
        &self.origin_operator
    }

    pub fn origin_robot(&self) -> &Pose {
        &self.origin_robot
    }
}

/// Rotation from the operator frame into the robot frame plus a
/// translation gain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMapping {
    rotation: UnitQuaternion<f64>,
    translation_scale: f64,
}

impl Default for FrameMapping {
    fn default() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation_scale: 1.0,
        }
    }
}

impl FrameMapping {
    pub fn new(rotation: UnitQuaternion<f64>, translation_scale: f64) -> Result<Self, MotionError> {
        if !(translation_scale.is_finite() && translation_scale > 0.0) {
            return Err(MotionError::InvalidConfig(format!(
                "translation scale must be finite and positive, got {translation_scale}"
            )));
        }
        let rotation = UnitQuaternion::new_normalize(rotation.into_inner());
        Ok(Self {
            rotation,
            translation_scale,
        })
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation_scale(&self) -> f64 {
        self.translation_scale
    }
}

/// Robot target for the current operator pose while the clutch is held.
///
/// The operator's displacement from the latched origin is rotated into the
/// robot frame (its translation by `R`, its rotation by `R·q·R⁻¹`), scaled,
/// and applied to the latched robot origin.
pub fn clutch_target(
    clutch: &ClutchState,
    mapping: &FrameMapping,
    operator_pose: &Pose,
) -> Result<Pose, MotionError> {
    if !clutch.engaged {
        return Err(MotionError::ClutchDisengaged);
    }
    let d = delta(&clutch.origin_operator, operator_pose);
    let r = mapping.rotation;
    let position = (r * d.position()) * mapping.translation_scale;
    let orientation = r * d.orientation() * r.inverse();
    let remapped = Pose::from_parts(position, orientation);
    Ok(compose(&clutch.origin_robot, &remapped))
}

/// Inverse of [`clutch_target`]: the operator pose that maps onto
/// `robot_target` under the latched origins. Used to author scripts.
pub fn operator_pose_for(
    clutch: &ClutchState,
    mapping: &FrameMapping,
    robot_target: &Pose,
) -> Result<Pose, MotionError> {
    if !clutch.engaged {
        return Err(MotionError::ClutchDisengaged);
    }
    let d = delta(&clutch.origin_robot, robot_target);
    let r_inv = mapping.rotation.inverse();
    let position = (r_inv * d.position()) / mapping.translation_scale;
    let orientation = r_inv * d.orientation() * mapping.rotation;
    Ok(compose(
        &clutch.origin_operator,
        &Pose::from_parts(position, orientation),
    ))
}

/// Exponential moving average over poses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterState {
    alpha_pos: f64,
    alpha_rot: f64,
    last: Option<Pose>,
}

pub const DEFAULT_FILTER_ALPHA: f64 = 0.3;

impl Default for FilterState {
    fn default() -> Self {
        Self {
            alpha_pos: DEFAULT_FILTER_ALPHA,
            alpha_rot: DEFAULT_FILTER_ALPHA,
            last: None,
        }
    }
}

impl FilterState {
    pub fn new(alpha_pos: f64, alpha_rot: f64) -> Result<Self, MotionError> {
        for a in [alpha_pos, alpha_rot] {
            if !(a > 0.0 && a <= 1.0) {
                return Err(MotionError::InvalidConfig(format!(
                    "filter alpha must be in (0, 1], got {a}"
                )));
            }
        }
        Ok(Self {
            alpha_pos,
            alpha_rot,
            last: None,
        })
    }

    /// Forgets the filter history; the next input passes through.
    pub fn reset(&mut self) {
        self.last = None;
    }

    pub fn last(&self) -> Option<&Pose> {
        self.last.as_ref()
    }

    pub fn alphas(&self) -> (f64, f64) {
        (self.alpha_pos, self.alpha_rot)
    }
}

pub fn filter_step(state: &mut FilterState, input: &Pose) -> Pose {
    let out = match state.last {
        None => *input,
        Some(last) => {
            let a = state.alpha_pos;
            let position = if a == 1.0 {
                input.position()
            } else {
                input.position() * a + last.position() * (1.0 - a)
            };
            let orientation = if state.alpha_rot == 1.0 {
                input.orientation()
            } else {
                slerp(&last.orientation(), &input.orientation(), state.alpha_rot)
            };
            Pose::from_parts(position, orientation)
        }
    };
    state.last = Some(out);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoxMode {
    KeepIn,
    KeepOut,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FenceKind {
    /// Admissible side is `normal · p >= offset`.
    HalfSpace { normal: Vector3<f64>, offset: f64 },
    Box {
        min: Vector3<f64>,
        max: Vector3<f64>,
        mode: BoxMode,
    },
}

/// A position constraint on the commanded TCP.
#[derive(Clone, Debug, PartialEq)]
pub struct Fence {
    pub name: String,
    kind: FenceKind,
    lock_orientation: bool,
}

impl Fence {
    pub fn half_space(
        name: impl Into<String>,
        normal: Vector3<f64>,
        offset: f64,
    ) -> Result<Self, MotionError> {
        let norm = normal.norm();
        if !(norm.is_finite() && (norm - 1.0).abs() <= 1e-6) || !offset.is_finite() {
            return Err(MotionError::InvalidConfig(format!(
                "half-space normal must be unit length, got norm {norm}"
            )));
        }
        Ok(Self {
            name: name.into(),
            kind: FenceKind::HalfSpace {
                normal: normal / norm,
                offset,
            },
            lock_orientation: false,
        })
    }

    pub fn aabb(
        name: impl Into<String>,
        min: Vector3<f64>,
        max: Vector3<f64>,
        mode: BoxMode,
    ) -> Result<Self, MotionError> {
        if !(0..3).all(|i| min[i] < max[i]) {
            return Err(MotionError::InvalidConfig(format!(
                "box min {min:?} must be below max {max:?} on every axis"
            )));
        }
        Ok(Self {
            name: name.into(),
            kind: FenceKind::Box { min, max, mode },
            lock_orientation: false,
        })
    }

    pub fn locking_orientation(mut self, lock: bool) -> Self {
        self.lock_orientation = lock;
        self
    }

    pub fn kind(&self) -> &FenceKind {
        &self.kind
    }

    pub fn locks_orientation(&self) -> bool {
        self.lock_orientation
    }

    /// Amount by which `p` violates this fence, zero when admissible.
    pub fn violation(&self, p: &Vector3<f64>) -> f64 {
        match self.kind {
            FenceKind::HalfSpace { normal, offset } => (offset - normal.dot(p)).max(0.0),
            FenceKind::Box {
                min,
                max,
                mode: BoxMode::KeepIn,
            } => (0..3)
                .map(|i| (min[i] - p[i]).max(p[i] - max[i]).max(0.0))
                .fold(0.0, |acc: f64, v| acc.hypot(v)),
            FenceKind::Box {
                min,
                max,
                mode: BoxMode::KeepOut,
            } => (0..3)
                .map(|i| (p[i] - min[i]).min(max[i] - p[i]))
                .fold(f64::INFINITY, f64::min)
                .max(0.0),
        }
    }

    /// Nearest point of this fence's admissible set.
    pub fn project(&self, p: &Vector3<f64>) -> Vector3<f64> {
        match self.kind {
            FenceKind::HalfSpace { normal, offset } => {
                let gap = offset - normal.dot(p);
                if gap > 0.0 {
                    p + normal * gap
                } else {
                    *p
                }
            }
            FenceKind::Box {
                min,
                max,
                mode: BoxMode::KeepIn,
            } => Vector3::new(
                p.x.clamp(min.x, max.x),
                p.y.clamp(min.y, max.y),
                p.z.clamp(min.z, max.z),
            ),
            FenceKind::Box {
                min,
                max,
                mode: BoxMode::KeepOut,
            } => {
                if self.violation(p) == 0.0 {
                    return *p;
                }
                // Push through the nearest face.
                let mut best = (f64::INFINITY, 0, 0.0);
                for i in 0..3 {
                    for face in [min[i], max[i]] {
                        let d = (p[i] - face).abs();
                        if d < best.0 {
                            best = (d, i, face);
                        }
                    }
                }
                let mut out = *p;
                out[best.1] = best.2;
                out
            }
        }
    }

    /// Whether `p` lies in this fence's closed zone, used for orientation
    /// locking: the admissible side for half-spaces and keep-in boxes, the
    /// closed box for keep-out boxes.
    pub fn zone_contains(&self, p: &Vector3<f64>) -> bool {
        match self.kind {
            FenceKind::HalfSpace { normal, offset } => normal.dot(p) >= offset - FENCE_EPS,
            FenceKind::Box { min, max, .. } => {
                (0..3).all(|i| p[i] >= min[i] - FENCE_EPS && p[i] <= max[i] + FENCE_EPS)
            }
        }
    }
}

/// True when `p` satisfies every fence to within `tol` meters.
pub fn admissible(fences: &[Fence], p: &Vector3<f64>, tol: f64) -> bool {
    fences.iter().all(|f| f.violation(p) <= tol)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FenceOutcome {
    pub pose: Pose,
    pub clamped: bool,
    pub lock_orientation: bool,
}

/// Projects the target position into the admissible region.
///
/// Each violated fence is corrected by its own minimal projection, in
/// order, for up to [`MAX_FENCE_PASSES`] passes. If the passes do not
/// settle the target falls back to `current_robot`'s position. Orientation
/// is left untouched; `lock_orientation` tells the caller to hold the
/// current orientation instead.
pub fn apply_fences(fences: &[Fence], target: &Pose, current_robot: &Pose) -> FenceOutcome {
    let mut p = target.position();
    let mut clamped = false;
    let mut settled = false;
    for _ in 0..MAX_FENCE_PASSES {
        let mut moved = false;
        for f in fences {
            if f.violation(&p) > FENCE_EPS {
                p = f.project(&p);
                moved = true;
            }
        }
        if !moved {
            settled = true;
            break;
        }
        clamped = true;
    }
    if !settled && !fences.iter().all(|f| f.violation(&p) <= FENCE_EPS) {
        p = current_robot.position();
        clamped = true;
    }
    let lock_orientation = fences
        .iter()
        .any(|f| f.lock_orientation && f.zone_contains(&p));
    FenceOutcome {
        pose: target.with_position(p),
        clamped,
        lock_orientation,
    }
}

/// Moves each joint toward its target by at most `cap · dt`.
pub fn rate_limit(
    prev: &JointState,
    target_q: &JointState,
    dt: f64,
    cap: f64,
) -> Result<JointState, MotionError> {
    if prev.len() != target_q.len() {
        return Err(MotionError::Dimension(prev.len(), target_q.len()));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(MotionError::BadTimeStep(dt));
    }
    let max_step = cap * dt;
    let q = prev
        .q
        .iter()
        .zip(&target_q.q)
        .map(|(p, t)| {
            let d = t - p;
            if d.abs() <= max_step {
                *t
            } else {
                p + max_step.copysign(d)
            }
        })
        .collect();
    Ok(JointState::at(q, target_q.timestamp))
}

/// [`rate_limit`] at the model's speed cap, then clamped to its joint
/// limits.
pub fn rate_limit_within(
    model: &ArmModel,
    prev: &JointState,
    target_q: &JointState,
    dt: f64,
) -> Result<JointState, MotionError> {
    let mut out = rate_limit(prev, target_q, dt, model.velocity_cap())?;
    model.clamp_to_limits(&mut out.q);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn clutch_zero_delta_returns_robot_origin() {
        let mut c = ClutchState::released();
        let op = Pose::from_rpy(Vector3::new(0.2, 0.1, 0.3), 0.1, 0.2, 0.3);
        let robot = Pose::from_rpy(Vector3::new(-0.5, 0.1, 0.4), 3.0, 0.0, 0.5);
        c.engage(op, robot);
        let t = clutch_target(&c, &FrameMapping::default(), &op).unwrap();
        assert!(t.approx_eq(&robot, 1e-15, 1e-12));
    }

    #[test]
    fn clutch_identity_mapping_translation() {
        let mut c = ClutchState::released();
        c.engage(Pose::identity(), Pose::translation(0.4, 0.2, 0.3));
        let t = clutch_target(&c, &FrameMapping::default(), &Pose::translation(0.1, 0.0, 0.0))
            .unwrap();
        assert!((t.position() - Vector3::new(0.5, 0.2, 0.3)).norm() < 1e-15);
    }

    #[test]
    fn clutch_rotated_mapping_matches_homogeneous_oracle() {
        let mut c = ClutchState::released();
        c.engage(Pose::identity(), Pose::identity());
        let mapping = FrameMapping::new(Pose::rot_z(FRAC_PI_2).orientation(), 1.0).unwrap();
        let t = clutch_target(&c, &mapping, &Pose::translation(0.1, 0.0, 0.0)).unwrap();
        // Oracle: R·T·R⁻¹ with 4×4 matrices; origin_robot is identity.
        let r = Pose::rot_z(FRAC_PI_2).to_homogeneous();
        let d = Pose::translation(0.1, 0.0, 0.0).to_homogeneous();
        let m = r * d * r.try_inverse().unwrap();
        assert!((t.position() - Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)])).norm() < 1e-15);
        assert!((t.position() - Vector3::new(0.0, 0.1, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn clutch_conjugates_operator_rotation() {
        let mut c = ClutchState::released();
        c.engage(Pose::identity(), Pose::identity());
        let mapping = FrameMapping::new(Pose::rot_z(FRAC_PI_2).orientation(), 1.0).unwrap();
        // Operator rolls about its x axis → robot rolls about y.
        let t = clutch_target(&c, &mapping, &Pose::rot_x(0.3)).unwrap();
        assert!(t.approx_eq(&Pose::rot_y(0.3), 1e-15, 1e-12));
    }

    #[test]
    fn operator_pose_for_inverts_clutch_target() {
        let mut c = ClutchState::released();
        c.engage(
            Pose::from_rpy(Vector3::new(0.1, 0.2, 0.3), 0.3, -0.2, 0.1),
            Pose::from_rpy(Vector3::new(-0.5, 0.1, 0.3), 3.1, 0.1, 0.2),
        );
        let mapping = FrameMapping::new(Pose::rot_z(0.7).orientation(), 1.5).unwrap();
        let want = Pose::from_rpy(Vector3::new(-0.4, 0.3, 0.2), 3.0, 0.2, -0.4);
        let op = operator_pose_for(&c, &mapping, &want).unwrap();
        let got = clutch_target(&c, &mapping, &op).unwrap();
        assert!(got.approx_eq(&want, 1e-12, 1e-12));
    }

    #[test]
    fn clutch_disengaged_is_error() {
        let c = ClutchState::released();
        assert_eq!(
            clutch_target(&c, &FrameMapping::default(), &Pose::identity()),
            Err(MotionError::ClutchDisengaged)
        );
    }

    #[test]
    fn engage_latches_only_once() {
        let mut c = ClutchState::released();
        assert!(c.engage(Pose::translation(1.0, 0.0, 0.0), Pose::identity()));
        assert!(!c.engage(Pose::translation(2.0, 0.0, 0.0), Pose::identity()));
        assert_eq!(c.origin_operator().xyz(), [1.0, 0.0, 0.0]);
        assert!(c.release());
        assert!(!c.release());
    }

    #[test]
    fn mapping_rejects_bad_scale() {
        assert!(FrameMapping::new(UnitQuaternion::identity(), 0.0).is_err());
        assert!(FrameMapping::new(UnitQuaternion::identity(), f64::NAN).is_err());
    }

    #[test]
    fn filter_alpha_one_is_passthrough() {
        let mut f = FilterState::new(1.0, 1.0).unwrap();
        for i in 0..5 {
            let p = Pose::from_rpy(Vector3::new(i as f64, 0.0, 0.0), 0.1 * i as f64, 0.0, 0.0);
            assert_eq!(filter_step(&mut f, &p), p);
        }
    }

    #[test]
    fn filter_ema_arithmetic() {
        let mut f = FilterState::new(0.2, 0.2).unwrap();
        filter_step(&mut f, &Pose::translation(0.0, 0.0, 0.0));
        let out = filter_step(&mut f, &Pose::translation(1.0, 0.0, 0.0));
        assert!((out.position().x - 0.2).abs() < 1e-15);
    }

    #[test]
    fn filter_reaches_constant_fixed_point() {
        let mut f = FilterState::default();
        filter_step(&mut f, &Pose::translation(0.0, 0.0, 0.0));
        let target = Pose::from_rpy(Vector3::new(0.3, -0.2, 0.5), 0.4, 0.2, -0.3);
        let mut out = Pose::identity();
        for _ in 0..400 {
            out = filter_step(&mut f, &target);
        }
        assert!(out.approx_eq(&target, 1e-12, 1e-12));
        let again = filter_step(&mut f, &target);
        assert!(again.approx_eq(&out, 1e-15, 1e-15));
    }

    #[test]
    fn filter_rejects_bad_alpha() {
        assert!(FilterState::new(0.0, 0.5).is_err());
        assert!(FilterState::new(0.5, 1.5).is_err());
    }

    fn tester_fences() -> Vec<Fence> {
        vec![
            Fence::aabb(
                "workspace",
                Vector3::new(-1.0, -1.0, 0.0),
                Vector3::new(1.0, 1.0, 1.0),
                BoxMode::KeepIn,
            )
            .unwrap(),
            Fence::aabb(
                "tester",
                Vector3::new(-0.2, -0.2, 0.0),
                Vector3::new(0.2, 0.2, 0.4),
                BoxMode::KeepOut,
            )
            .unwrap()
            .locking_orientation(true),
        ]
    }

    #[test]
    fn admissible_target_unchanged() {
        let fences = tester_fences();
        let t = Pose::translation(0.5, 0.5, 0.5);
        let out = apply_fences(&fences, &t, &Pose::identity());
        assert_eq!(out.pose, t);
        assert!(!out.clamped);
        assert!(!out.lock_orientation);
    }

    #[test]
    fn half_space_projection() {
        let fences = vec![Fence::half_space("table", Vector3::z(), 0.1).unwrap()];
        let out = apply_fences(&fences, &Pose::translation(0.3, -0.2, 0.05), &Pose::identity());
        assert_eq!(out.pose.xyz(), [0.3, -0.2, 0.1]);
        assert!(out.clamped);
    }

    #[test]
    fn keep_out_pushes_to_nearest_face_and_locks() {
        let fences = tester_fences();
        let out = apply_fences(&fences, &Pose::translation(0.05, 0.0, 0.38), &Pose::identity());
        assert_eq!(out.pose.xyz(), [0.05, 0.0, 0.4]);
        assert!(out.clamped);
        assert!(out.lock_orientation);
    }

    #[test]
    fn contradictory_fences_fall_back_to_current_position() {
        let fences = vec![
            Fence::half_space("up", Vector3::z(), 1.0).unwrap(),
            Fence::half_space("down", -Vector3::z(), 0.0).unwrap(),
        ];
        let current = Pose::translation(0.1, 0.2, 0.3);
        let out = apply_fences(&fences, &Pose::translation(0.0, 0.0, 0.5), &current);
        assert_eq!(out.pose.position(), current.position());
        assert!(out.clamped);
    }

    #[test]
    fn fence_constructors_validate() {
        assert!(Fence::half_space("n", Vector3::new(0.0, 0.0, 2.0), 0.0).is_err());
        assert!(Fence::aabb("b", Vector3::zeros(), Vector3::new(1.0, 0.0, 1.0), BoxMode::KeepIn)
            .is_err());
    }

    #[test]
    fn rate_limit_steps_by_cap() {
        let cap = 100f64.to_radians();
        let prev = JointState::new(vec![0.0; 6]);
        let target = JointState::new(vec![10f64.to_radians(); 6]);
        let out = rate_limit(&prev, &target, 0.05, cap).unwrap();
        for v in &out.q {
            assert!((v - 5f64.to_radians()).abs() < 1e-15);
        }
        let target = JointState::new(vec![-2f64.to_radians(); 6]);
        let out = rate_limit(&prev, &target, 0.05, cap).unwrap();
        assert_eq!(out.q, target.q);
    }

    #[test]
    fn rate_limit_preconditions() {
        let a = JointState::new(vec![0.0; 2]);
        let b = JointState::new(vec![0.0; 3]);
        assert!(matches!(rate_limit(&a, &b, 0.1, 1.0), Err(MotionError::Dimension(2, 3))));
        assert!(matches!(rate_limit(&a, &a, 0.0, 1.0), Err(MotionError::BadTimeStep(_))));
    }
}
