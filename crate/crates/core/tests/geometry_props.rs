use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use proptest::prelude::*;
use teleoplab::geometry::{compose, delta, exp_so3, inverse, log_so3, Pose};

fn pose() -> impl Strategy<Value = Pose> {
    (
        prop::array::uniform3(-2.0f64..2.0),
        prop::array::uniform4(-1.0f64..1.0),
    )
        .prop_filter("quaternion too small", |(_, q)| {
            q.iter().map(|v| v * v).sum::<f64>() > 1e-3
        })
        .prop_map(|(p, q)| {
            Pose::new(
                Vector3::new(p[0], p[1], p[2]),
                Quaternion::new(q[0], q[1], q[2], q[3]),
            )
        })
}

fn close(a: &Pose, b: &Pose) -> bool {
    a.approx_eq(b, 1e-9, 1e-9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn compose_is_associative(a in pose(), b in pose(), c in pose()) {
        let left = compose(&compose(&a, &b), &c);
        let right = compose(&a, &compose(&b, &c));
        prop_assert!(close(&left, &right), "{left:?} vs {right:?}");
    }

    #[test]
    fn inverse_is_involution(p in pose()) {
        prop_assert!(close(&inverse(&inverse(&p)), &p));
    }

    #[test]
    fn compose_with_inverse_is_identity(p in pose()) {
        prop_assert!(close(&compose(&p, &inverse(&p)), &Pose::identity()));
        prop_assert!(close(&compose(&inverse(&p), &p), &Pose::identity()));
    }

    #[test]
    fn delta_recomposes(origin in pose(), current in pose()) {
        prop_assert!(close(&compose(&origin, &delta(&origin, &current)), &current));
    }

    #[test]
    fn outputs_stay_unit_and_canonical(a in pose(), b in pose()) {
        for p in [compose(&a, &b), inverse(&a), delta(&a, &b)] {
            let [w, x, y, z] = p.wxyz();
            prop_assert!(((w * w + x * x + y * y + z * z).sqrt() - 1.0).abs() <= 1e-9);
            prop_assert!(w >= 0.0);
        }
    }

    #[test]
    fn exp_log_round_trip(axis in prop::array::uniform3(-1.0f64..1.0), angle in 0.0f64..3.14) {
        let axis = Vector3::new(axis[0], axis[1], axis[2]);
        prop_assume!(axis.norm() > 1e-3);
        let q = UnitQuaternion::from_scaled_axis(axis.normalize() * angle);
        let back = exp_so3(&log_so3(&q));
        prop_assert!(back.angle_to(&q) <= 1e-9);
    }
}

#[test]
fn norm_preserved_over_long_chains() {
    // Deterministic chain of 10k compositions.
    let step = Pose::from_rpy(Vector3::new(0.01, -0.02, 0.005), 0.013, -0.021, 0.034);
    let mut p = Pose::identity();
    for _ in 0..10_000 {
        p = compose(&p, &step);
        let q = p.orientation();
        assert!((q.quaternion().norm() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn hundred_random_quaternions_round_trip() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut n = 0;
    while n < 100 {
        let q = Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if q.norm() < 1e-3 {
            continue;
        }
        let q = UnitQuaternion::new_normalize(q);
        if q.angle() >= std::f64::consts::PI - 1e-9 {
            continue;
        }
        assert!(exp_so3(&log_so3(&q)).angle_to(&q) <= 1e-9);
        n += 1;
    }
}
