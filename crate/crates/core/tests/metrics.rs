use proptest::prelude::*;
use std::time::Duration;
use surfgan_core::metrics::{fid, id_consistency, pose_error, throughput};

fn features(rows: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), rows)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fid_of_a_set_with_itself_is_zero(a in features(12, 3)) {
        prop_assert!(fid(&a, &a).unwrap().abs() < 1e-6);
    }

    #[test]
    fn fid_is_symmetric(a in features(10, 3), b in features(14, 3)) {
        let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        prop_assert!(ab >= -1e-9);
        prop_assert!(close(ab, ba, 1e-6), "{} vs {}", ab, ba);
    }

    #[test]
    fn fid_ignores_sample_order(a in features(10, 3), b in features(10, 3), rot in 1usize..10) {
        let mut pa = a.clone();
        let mut pb = b.clone();
        pa.rotate_left(rot);
        pb.reverse();
        prop_assert!(close(fid(&a, &b).unwrap(), fid(&pa, &pb).unwrap(), 1e-6));
    }

    #[test]
    fn shifted_copy_costs_the_squared_offset(a in features(12, 3), m in prop::collection::vec(-2.0f64..2.0, 3)) {
        let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().zip(&m).map(|(x, d)| x + d).collect()).collect();
        let expected: f64 = m.iter().map(|d| d * d).sum();
        let got = fid(&a, &b).unwrap();
        prop_assert!((got - expected).abs() < 1e-5 * expected.max(1.0), "{} vs {}", got, expected);
    }

    #[test]
    fn pose_error_is_zero_only_for_equal_poses(
        t in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..8),
        e in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 8),
    ) {
        let e = &e[..t.len()];
        let err = pose_error(&t, e).unwrap();
        prop_assert!(err >= 0.0);
        prop_assert_eq!(err == 0.0, t.as_slice() == e);
        prop_assert_eq!(pose_error(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn identity_consistency_is_a_cosine(
        c in prop::collection::vec(-5.0f64..5.0, 6),
        r in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..5),
    ) {
        let out = id_consistency(&c, &r).unwrap();
        prop_assert!(out.per_view.iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert!((-1.0..=1.0).contains(&out.mean));
    }
}

#[test]
fn mismatched_pose_lists_are_rejected() {
    assert!(pose_error(&[(0.0, 0.0)], &[]).is_err());
    assert!(pose_error(&[], &[]).is_err());
}

#[test]
fn throughput_median_is_stable_in_trial_count() {
    let frame = || {
        std::thread::sleep(Duration::from_millis(4));
        Ok(())
    };
    let a = throughput(frame, 9).unwrap();
    let b = throughput(frame, 18).unwrap();
    assert_eq!(b.seconds.len(), 18);
    assert!((a.fps - b.fps).abs() <= 0.1 * a.fps, "{} vs {} fps", a.fps, b.fps);
}
