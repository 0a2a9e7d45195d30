use chamelion_core::confidence::{confidence_of, ConfidenceParams};
use chamelion_core::detect::detect_occupancy;
use chamelion_core::eval::PriorMap;
use chamelion_core::geometry::VoxelIndex;
use chamelion_core::mapping::voxel_dedup;
use chamelion_core::mapupdate::{GateThresholds, LogOddsMap, Observation};
use chamelion_core::{ChangeClass, Point, PointCloud, Pose};
use nalgebra::Vector3;
use proptest::prelude::*;
use std::collections::BTreeSet;

fn coords(max: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec([-5.0f64..5.0, -5.0f64..5.0, -1.0f64..3.0], 1..max)
}

fn cells(c: &PointCloud, v: f64) -> BTreeSet<VoxelIndex> {
    c.points().iter().map(|p| VoxelIndex::of(p, v)).collect()
}

fn observation() -> impl Strategy<Value = Observation> {
    ([0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0], 0.0f64..=1.0).prop_map(|(a, conf)| {
        let s = a[0] + a[1] + a[2];
        Observation { probs: [a[0] / s, a[1] / s, a[2] / s], conf }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dedup_keeps_one_point_per_occupied_voxel(c in coords(400), v in 0.05f64..1.0) {
        let cloud = PointCloud::from_xyz(&c).unwrap();
        let d = voxel_dedup(&cloud, v).unwrap();
        prop_assert_eq!(d.len(), cells(&cloud, v).len());
        prop_assert_eq!(cells(&d, v), cells(&cloud, v));
    }

    #[test]
    fn stored_maps_round_trip(c in coords(300)) {
        let cloud = PointCloud::from_xyz(&c).unwrap();
        let m = PriorMap::unlabelled(cloud);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        m.save(&path).unwrap();
        let back = PriorMap::load(&path).unwrap();
        prop_assert_eq!(back.cloud.len(), m.cloud.len());
        for (a, b) in m.cloud.points().iter().zip(back.cloud.points()) {
            prop_assert!((a - b).norm() < 1e-5);
        }
    }

    #[test]
    fn occupancy_is_symmetric(a in coords(200), b in coords(200), v in 0.1f64..1.0) {
        let (a, b) = (PointCloud::from_xyz(&a).unwrap(), PointCloud::from_xyz(&b).unwrap());
        let (am, bs) = detect_occupancy(&a, &b, v).unwrap();
        let (bm, as_) = detect_occupancy(&b, &a, v).unwrap();
        let swap = |l: &ChangeClass| match l {
            ChangeClass::Positive => ChangeClass::Negative,
            ChangeClass::Negative => ChangeClass::Positive,
            s => *s,
        };
        prop_assert_eq!(am.iter().map(swap).collect::<Vec<_>>(), as_);
        prop_assert_eq!(bs.iter().map(swap).collect::<Vec<_>>(), bm);
    }

    #[test]
    fn confidence_is_bounded_and_non_increasing(a in 0.0f64..5.0, b in 0.0f64..5.0) {
        let p = ConfidenceParams::default();
        let (lo, hi) = (a.min(b), a.max(b));
        let (cl, ch) = (confidence_of(lo, &p).unwrap(), confidence_of(hi, &p).unwrap());
        prop_assert!((0.0..=1.0).contains(&cl) && (0.0..=1.0).contains(&ch));
        prop_assert!(ch <= cl);
    }

    #[test]
    fn log_odds_ignore_observation_order(obs in prop::collection::vec(observation(), 1..20), seed in any::<u64>()) {
        let gates = GateThresholds::default();
        let fold = |o: &[Observation]| {
            let mut m = LogOddsMap::new(1);
            for x in o {
                m.update(&[*x], &gates).unwrap();
            }
            m
        };
        let mut shuffled = obs.clone();
        let k = (seed as usize) % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let full = fold(&obs);
        prop_assert_eq!(&full, &fold(&shuffled));
        let passed: Vec<Observation> = obs.iter().copied().filter(|o| o.conf > gates.tau_map).collect();
        prop_assert_eq!(&full, &fold(&passed));
    }

    #[test]
    fn pose_inverse_round_trips(w in [-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0], t in [-50.0f64..50.0, -50.0f64..50.0, -5.0f64..5.0],
                                q in [-20.0f64..20.0, -20.0f64..20.0, -20.0f64..20.0]) {
        let pose = Pose::from_rotation_vector(Vector3::from(w), Vector3::from(t));
        let p = Point::new(q[0], q[1], q[2]);
        let back = pose.inverse().apply(&pose.apply(&p));
        prop_assert!((back - p).norm() < 1e-9);
        let id = pose.compose(&pose.inverse());
        prop_assert!((id.apply(&p) - p).norm() < 1e-9);
    }
}
