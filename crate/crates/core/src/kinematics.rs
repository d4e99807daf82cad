//! Serial-arm model in standard Denavit–Hartenberg form: forward
//! kinematics, geometric Jacobian and a singularity measure.
//!
//! Each joint contributes `Rz(θ + offset) · Tz(d) · Tx(a) · Rx(α)`; the TCP
//! pose is the product of all joint transforms followed by the tool offset.
//! Arm tables are loaded from TOML files (lengths in meters, angles in
//! degrees), see `config/ur5e.toml`.

use crate::geometry::{compose, Pose};
use nalgebra::{Dyn, OMatrix, Quaternion, Vector3, U6};
use serde::Deserialize;
use std::path::Path;

/// Default joint speed cap, degrees per second.
pub const DEFAULT_VELOCITY_CAP_DEG: f64 = 100.0;

/// Default flange→TCP offset along the flange z axis, meters.
pub const DEFAULT_TOOL_OFFSET_Z: f64 = 0.15;

pub type Jacobian = OMatrix<f64, U6, Dyn>;

#[derive(Debug, thiserror::Error)]
pub enum KinematicsError {
    #[error("joint vector has {got} entries, model has {expected} joints")]
    Dimension { expected: usize, got: usize },
    #[error("invalid arm model: {0}")]
    Invalid(String),
    #[error("cannot read arm model {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse arm model: {0}")]
    Parse(#[from] toml::de::Error),
}

/// One row of a standard DH table. Lengths in meters, angles in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DhRow {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    pub theta_offset: f64,
}

impl DhRow {
    pub fn new(a: f64, alpha: f64, d: f64, theta_offset: f64) -> Self {
        Self {
            a,
            alpha,
            d,
            theta_offset,
        }
    }

    /// Transform from frame `i-1` to frame `i` at joint angle `q`.
    pub fn transform(&self, q: f64) -> Pose {
        let theta = q + self.theta_offset;
        let (st, ct) = theta.sin_cos();
        let (sh, ch) = (0.5 * theta).sin_cos();
        let (sa, ca) = (0.5 * self.alpha).sin_cos();
        // Rz(θ)·Rx(α) as a quaternion product.
        let rot = Quaternion::new(ch * ca, ch * sa, sh * sa, sh * ca);
        Pose::new(Vector3::new(self.a * ct, self.a * st, self.d), rot)
    }
}

/// Joint angle bounds in radians, `min < max`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLimit {
    pub min: f64,
    pub max: f64,
}

impl JointLimit {
    pub fn clamp(&self, q: f64) -> f64 {
        q.clamp(self.min, self.max)
    }

    pub fn contains(&self, q: f64) -> bool {
        q >= self.min && q <= self.max
    }

    /// Distance to the nearest bound (negative when outside).
    pub fn margin(&self, q: f64) -> f64 {
        (q - self.min).min(self.max - q)
    }
}

/// Joints whose signs define the configuration indicator. Zero-based.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IndicatorJoints {
    /// Frame whose origin is used as the wrist center (0 = base frame).
    pub wrist_center_frame: usize,
    pub elbow: usize,
    pub wrist: Option<usize>,
}

impl IndicatorJoints {
    fn default_for(n: usize) -> Self {
        if n >= 6 {
            Self {
                wrist_center_frame: 4,
                elbow: 2,
                wrist: Some(4),
            }
        } else {
            Self {
                wrist_center_frame: n,
                elbow: n.saturating_sub(1).min(1),
                wrist: None,
            }
        }
    }
}

/// Immutable arm description shared by FK, IK and the simulator.
#[derive(Clone, Debug)]
pub struct ArmModel {
    pub name: String,
    joints: Vec<DhRow>,
    limits: Vec<JointLimit>,
    velocity_cap: f64,
    tool_offset: Pose,
    home: Vec<f64>,
    indicator: IndicatorJoints,
}

/// Joint angles (radians) with a monotonic timestamp in nanoseconds.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct JointState {
    pub q: Vec<f64>,
    pub timestamp: u64,
}

impl JointState {
    pub fn new(q: Vec<f64>) -> Self {
        Self { q, timestamp: 0 }
    }

    pub fn at(q: Vec<f64>, timestamp: u64) -> Self {
        Self { q, timestamp }
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

impl From<Vec<f64>> for JointState {
    fn from(q: Vec<f64>) -> Self {
        Self::new(q)
    }
}

impl ArmModel {
    pub fn new(
        name: impl Into<String>,
        joints: Vec<DhRow>,
        limits: Vec<JointLimit>,
        velocity_cap: f64,
        tool_offset: Pose,
    ) -> Result<Self, KinematicsError> {
        let n = joints.len();
        if n == 0 {
            return Err(KinematicsError::Invalid("model has no joints".into()));
        }
        if limits.len() != n {
            return Err(KinematicsError::Invalid(format!(
                "{} joints but {} limits",
                n,
                limits.len()
            )));
        }
        for (i, l) in limits.iter().enumerate() {
            if !(l.min < l.max) {
                return Err(KinematicsError::Invalid(format!(
                    "joint {} has min {} >= max {}",
                    i + 1,
                    l.min,
                    l.max
                )));
            }
        }
        if !(velocity_cap > 0.0 && velocity_cap.is_finite()) {
            return Err(KinematicsError::Invalid(format!(
                "velocity cap must be positive, got {velocity_cap}"
            )));
        }
        let home = limits.iter().map(|l| l.clamp(0.0)).collect();
        Ok(Self {
            name: name.into(),
            joints,
            limits,
            velocity_cap,
            tool_offset,
            home,
            indicator: IndicatorJoints::default_for(n),
        })
    }

    pub fn with_home(mut self, home: Vec<f64>) -> Result<Self, KinematicsError> {
        self.check_len(home.len())?;
        if let Some(i) = home
            .iter()
            .zip(&self.limits)
            .position(|(q, l)| !l.contains(*q))
        {
            return Err(KinematicsError::Invalid(format!(
                "home angle of joint {} is outside its limits",
                i + 1
            )));
        }
        self.home = home;
        Ok(self)
    }

    pub fn with_indicator(mut self, indicator: IndicatorJoints) -> Result<Self, KinematicsError> {
        let n = self.dof();
        if indicator.elbow >= n
            || indicator.wrist.is_some_and(|w| w >= n)
            || indicator.wrist_center_frame > n
        {
            return Err(KinematicsError::Invalid(
                "configuration indicator joints out of range".into(),
            ));
        }
        self.indicator = indicator;
        Ok(self)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, KinematicsError> {
        let raw: RawArm = toml::from_str(text)?;
        raw.into_model()
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, KinematicsError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| KinematicsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[DhRow] {
        &self.joints
    }

    pub fn limits(&self) -> &[JointLimit] {
        &self.limits
    }

    /// Joint speed cap, rad/s.
    pub fn velocity_cap(&self) -> f64 {
        self.velocity_cap
    }

    pub fn tool_offset(&self) -> &Pose {
        &self.tool_offset
    }

    pub fn home(&self) -> &[f64] {
        &self.home
    }

    pub fn indicator_joints(&self) -> IndicatorJoints {
        self.indicator
    }

    pub fn check_len(&self, got: usize) -> Result<(), KinematicsError> {
        if got == self.dof() {
            Ok(())
        } else {
            Err(KinematicsError::Dimension {
                expected: self.dof(),
                got,
            })
        }
    }

    pub fn within_limits(&self, q: &[f64]) -> bool {
        q.len() == self.dof() && q.iter().zip(&self.limits).all(|(v, l)| l.contains(*v))
    }

    pub fn clamp_to_limits(&self, q: &mut [f64]) {
        for (v, l) in q.iter_mut().zip(&self.limits) {
            *v = l.clamp(*v);
        }
    }

    /// Upper bound on the distance from the base origin to the TCP.
    pub fn reach(&self) -> f64 {
        self.joints
            .iter()
            .map(|j| j.a.hypot(j.d))
            .sum::<f64>()
            + self.tool_offset.position().norm()
    }

    /// Base→frame poses for frames `0..=n` (frame 0 is the base). The TCP is
    /// `frames[n] ∘ tool_offset`.
    pub fn frames(&self, q: &[f64]) -> Result<Vec<Pose>, KinematicsError> {
        self.check_len(q.len())?;
        let mut out = Vec::with_capacity(self.dof() + 1);
        let mut t = Pose::identity();
        out.push(t);
        for (row, qi) in self.joints.iter().zip(q) {
            t = compose(&t, &row.transform(*qi));
            out.push(t);
        }
        Ok(out)
    }
}

/// Base→TCP pose.
pub fn forward(model: &ArmModel, q: &[f64]) -> Result<Pose, KinematicsError> {
    let frames = model.frames(q)?;
    Ok(compose(&frames[model.dof()], &model.tool_offset))
}

/// Geometric Jacobian of the TCP in the base frame. Rows 0..3 are linear
/// velocity (m per rad), rows 3..6 angular velocity (rad per rad).
pub fn jacobian(model: &ArmModel, q: &[f64]) -> Result<Jacobian, KinematicsError> {
    let frames = model.frames(q)?;
    Ok(jacobian_from_frames(model, &frames))
}

pub(crate) fn jacobian_from_frames(model: &ArmModel, frames: &[Pose]) -> Jacobian {
    let n = model.dof();
    let tcp = compose(&frames[n], &model.tool_offset).position();
    let mut j = Jacobian::zeros(n);
    for i in 0..n {
        let z = frames[i].orientation() * Vector3::z();
        let lin = z.cross(&(tcp - frames[i].position()));
        j.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
        j.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
    }
    j
}

/// Smallest singular value of the Jacobian; zero at a singularity.
pub fn manipulability(model: &ArmModel, q: &[f64]) -> Result<f64, KinematicsError> {
    Ok(min_singular_value(&jacobian(model, q)?))
}

pub(crate) fn min_singular_value(j: &Jacobian) -> f64 {
    j.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
        .max(0.0)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArm {
    name: String,
    #[serde(default)]
    velocity_cap_deg_s: Option<f64>,
    #[serde(default)]
    home_deg: Option<Vec<f64>>,
    #[serde(default)]
    tool_offset: Option<RawTool>,
    #[serde(default)]
    indicator: Option<RawIndicator>,
    joints: Vec<RawJoint>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawJoint {
    a: f64,
    alpha_deg: f64,
    d: f64,
    #[serde(default)]
    theta_offset_deg: f64,
    min_deg: f64,
    max_deg: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTool {
    translation: [f64; 3],
    #[serde(default)]
    rpy_deg: [f64; 3],
}

/// 1-based joint numbers, as written in the config file.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIndicator {
    wrist_center_frame: usize,
    elbow_joint: usize,
    #[serde(default)]
    wrist_joint: Option<usize>,
}

impl RawArm {
    fn into_model(self) -> Result<ArmModel, KinematicsError> {
        let rad = f64::to_radians;
        let joints = self
            .joints
            .iter()
            .map(|j| DhRow::new(j.a, rad(j.alpha_deg), j.d, rad(j.theta_offset_deg)))
            .collect();
        let limits = self
            .joints
            .iter()
            .map(|j| JointLimit {
                min: rad(j.min_deg),
                max: rad(j.max_deg),
            })
            .collect();
        let tool = match self.tool_offset {
            Some(t) => Pose::from_rpy(
                Vector3::from(t.translation),
                rad(t.rpy_deg[0]),
                rad(t.rpy_deg[1]),
                rad(t.rpy_deg[2]),
            ),
            None => Pose::translation(0.0, 0.0, DEFAULT_TOOL_OFFSET_Z),
        };
        let cap = rad(self.velocity_cap_deg_s.unwrap_or(DEFAULT_VELOCITY_CAP_DEG));
        let mut model = ArmModel::new(self.name, joints, limits, cap, tool)?;
        if let Some(home) = self.home_deg {
            model = model.with_home(home.into_iter().map(rad).collect())?;
        }
        if let Some(ind) = self.indicator {
            if ind.elbow_joint == 0 || ind.wrist_joint == Some(0) {
                return Err(KinematicsError::Invalid(
                    "indicator joints are numbered from 1".into(),
                ));
            }
            model = model.with_indicator(IndicatorJoints {
                wrist_center_frame: ind.wrist_center_frame,
                elbow: ind.elbow_joint - 1,
                wrist: ind.wrist_joint.map(|w| w - 1),
            })?;
        }
        Ok(model)
    }
}

/// Models used throughout the unit tests and documentation.
pub mod reference {
    use super::*;
    use std::f64::consts::PI;

    /// Single revolute link of length 1 m, no tool offset.
    pub fn one_link() -> ArmModel {
        ArmModel::new(
            "one-link",
            vec![DhRow::new(1.0, 0.0, 0.0, 0.0)],
            vec![JointLimit { min: -PI, max: PI }],
            DEFAULT_VELOCITY_CAP_DEG.to_radians(),
            Pose::identity(),
        )
        .expect("valid model")
    }

    /// Planar two-link arm with unit links, no tool offset.
    pub fn two_link() -> ArmModel {
        ArmModel::new(
            "two-link",
            vec![DhRow::new(1.0, 0.0, 0.0, 0.0), DhRow::new(1.0, 0.0, 0.0, 0.0)],
            vec![JointLimit { min: -PI, max: PI }; 2],
            DEFAULT_VELOCITY_CAP_DEG.to_radians(),
            Pose::identity(),
        )
        .expect("valid model")
    }

    /// UR5e table as shipped in `config/ur5e.toml`, embedded so library
    /// tests do not depend on the working directory.
    pub fn ur5e() -> ArmModel {
        ArmModel::from_toml_str(UR5E_TOML).expect("embedded UR5e model parses")
    }

    pub fn irb120() -> ArmModel {
        ArmModel::from_toml_str(IRB120_TOML).expect("embedded IRB-120 model parses")
    }

    pub const UR5E_TOML: &str = include_str!("../../../config/ur5e.toml");
    pub const IRB120_TOML: &str = include_str!("../../../config/irb120.toml");
}
