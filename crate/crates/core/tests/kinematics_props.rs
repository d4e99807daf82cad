use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;
use teleoplab::geometry::{error_twist, Pose};
use teleoplab::kinematics::{forward, jacobian, reference, ArmModel};

fn random_q(model: &ArmModel, rng: &mut ChaCha8Rng) -> Vec<f64> {
    model
        .limits()
        .iter()
        .map(|l| rng.random_range(l.min.max(-TAU)..l.max.min(TAU)))
        .collect()
}

/// Central differences of FK, with the rotational part taken as the
/// rotation vector of `R(q+h)·R(q-h)ᵀ`.
fn fd_jacobian(model: &ArmModel, q: &[f64], h: f64) -> Vec<[f64; 6]> {
    (0..q.len())
        .map(|i| {
            let mut qp = q.to_vec();
            let mut qm = q.to_vec();
            qp[i] += h;
            qm[i] -= h;
            let fp = forward(model, &qp).unwrap();
            let fm = forward(model, &qm).unwrap();
            let tw = error_twist(&fm, &fp);
            let lin = (fp.position() - fm.position()) / (2.0 * h);
            let ang = tw.angular / (2.0 * h);
            [lin.x, lin.y, lin.z, ang.x, ang.y, ang.z]
        })
        .collect()
}

#[test]
fn analytic_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for model in [reference::ur5e(), reference::irb120(), reference::two_link()] {
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let q = random_q(&model, &mut rng);
            let j = jacobian(&model, &q).unwrap();
            for (c, col) in fd_jacobian(&model, &q, 1e-6).iter().enumerate() {
                for r in 0..6 {
                    worst = worst.max((j[(r, c)] - col[r]).abs());
                }
            }
        }
        assert!(worst <= 1e-5, "{}: worst FD error {worst:e}", model.name);
    }
}

#[test]
fn forward_is_periodic_in_each_joint() {
    let model = reference::ur5e();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let q = random_q(&model, &mut rng);
        let base = forward(&model, &q).unwrap();
        for i in 0..q.len() {
            let mut shifted = q.clone();
            shifted[i] += TAU;
            let p = forward(&model, &shifted).unwrap();
            assert!(p.approx_eq(&base, 1e-9, 1e-9), "joint {i}");
        }
    }
}

#[test]
fn angular_columns_are_unit() {
    let model = reference::irb120();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..500 {
        let q = random_q(&model, &mut rng);
        let j = jacobian(&model, &q).unwrap();
        for c in 0..model.dof() {
            let n = (j[(3, c)].powi(2) + j[(4, c)].powi(2) + j[(5, c)].powi(2)).sqrt();
            assert!((n - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn forward_output_is_valid_pose() {
    let model = reference::ur5e();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..500 {
        let p: Pose = forward(&model, &random_q(&model, &mut rng)).unwrap();
        assert!(p.is_finite());
        let [w, ..] = p.wxyz();
        assert!(w >= 0.0);
    }
}
