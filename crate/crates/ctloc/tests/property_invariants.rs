//! Property tests over randomized inputs.

use ctloc::ekf::{ImuSample, OdomSample};
use ctloc::geom::{exp_map, log_map, Timestamp};
use ctloc::preprocess::{merge_streams, reject_range_outlier, SensorEvent, UwbRangeMeasurement};
use ctloc::spline::{cumulative_basis, KnotVector};
use nalgebra::Vector3;
use proptest::prelude::*;

fn axis_angle(max: f64) -> impl Strategy<Value = Vector3<f64>> {
    (
        -1.0..1.0f64,
        -1.0..1.0f64,
        -1.0..1.0f64,
        1e-6..1.0f64,
    )
        .prop_filter_map("nonzero direction", move |(x, y, z, s)| {
            let v = Vector3::new(x, y, z);
            (v.norm() > 1e-3).then(|| v.normalize() * (s * max))
        })
}

proptest! {
    #[test]
    fn exp_log_round_trip(v in axis_angle(std::f64::consts::PI - 1e-3)) {
        let back = log_map(&exp_map(&v));
        prop_assert!((back - v).norm() < 1e-10);
    }

    #[test]
    fn basis_partitions_unity_on_random_knots(
        spans in proptest::collection::vec(0.05..2.0f64, 9..14),
        frac in 0.0..1.0f64,
        seg_pick in 0usize..100,
    ) {
        let mut t = 0.0;
        let mut knots = vec![Timestamp::new(0.0)];
        for s in &spans {
            t += s;
            knots.push(Timestamp::new(t));
        }
        let kv = KnotVector::new(knots).unwrap();
        let n_segs = kv.control_point_count() - 3;
        let seg = 3 + seg_pick % n_segs;
        let (a, b) = (kv.raw()[seg], kv.raw()[seg + 1]);
        let tq = Timestamp::new(a + (b - a) * frac);
        let basis = cumulative_basis(&kv, seg, tq).unwrap();
        let w = basis.weights();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(1.0 + 1e-12 >= basis.lambda[0]);
        prop_assert!(basis.lambda[0] + 1e-12 >= basis.lambda[1]);
        prop_assert!(basis.lambda[1] + 1e-12 >= basis.lambda[2]);
        prop_assert!(basis.lambda[2] >= -1e-12);
    }

    #[test]
    fn merge_preserves_every_event(
        imu_times in proptest::collection::vec(0.0..10.0f64, 0..40),
        odom_times in proptest::collection::vec(0.0..10.0f64, 0..40),
        uwb_times in proptest::collection::vec(0.0..10.0f64, 0..40),
    ) {
        let mut imu_times = imu_times;
        imu_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut odom_times = odom_times;
        odom_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut uwb_times = uwb_times;
        uwb_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let imu: Vec<ImuSample> = imu_times.iter().map(|&t| ImuSample {
            t: Timestamp::new(t), gyro: Vector3::zeros(), accel: Vector3::zeros(),
        }).collect();
        let odom: Vec<OdomSample> = odom_times.iter().map(|&t| OdomSample {
            t: Timestamp::new(t), linear_velocity: 0.0, angular_velocity: 0.0,
        }).collect();
        let uwb: Vec<UwbRangeMeasurement> = uwb_times.iter().map(|&t| UwbRangeMeasurement {
            t: Timestamp::new(t), anchor_id: "a".into(), range: 1.0, sigma: 0.05,
        }).collect();
        let merged = merge_streams(uwb.clone(), imu.clone(), odom.clone()).unwrap();
        prop_assert_eq!(merged.len(), imu.len() + odom.len() + uwb.len());
        for w in merged.windows(2) {
            prop_assert!(w[0].t().seconds() <= w[1].t().seconds());
        }
        let count = |pred: fn(&SensorEvent) -> bool| merged.iter().filter(|e| pred(e)).count();
        prop_assert_eq!(count(|e| matches!(e, SensorEvent::Imu(_))), imu.len());
        prop_assert_eq!(count(|e| matches!(e, SensorEvent::Odom(_))), odom.len());
        prop_assert_eq!(count(|e| matches!(e, SensorEvent::Uwb(_))), uwb.len());
    }

    #[test]
    fn gate_depends_only_on_absolute_mismatch(
        r in 0.1..20.0f64,
        speed in 0.0..0.5f64,
        dt in 0.01..2.0f64,
        gamma in 0.0..3.0f64,
    ) {
        let anchor = Vector3::new(3.0, 4.0, 0.0);
        let predicted = 5.0;
        let m = |range: f64| UwbRangeMeasurement {
            t: Timestamp::new(dt), anchor_id: "a".into(), range, sigma: 0.05,
        };
        let a = reject_range_outlier(&m(r), &Vector3::zeros(), speed, Timestamp::new(0.0), &anchor, gamma);
        let mirrored = 2.0 * predicted - r;
        let b = reject_range_outlier(&m(mirrored), &Vector3::zeros(), speed, Timestamp::new(0.0), &anchor, gamma);
        prop_assert_eq!(a.accepted, b.accepted);
        prop_assert!((a.mismatch - b.mismatch).abs() < 1e-9);
    }
}
