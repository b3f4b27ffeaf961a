mod common;

use proptest::prelude::*;
use rand::Rng;
use vqd_core::geometry::OrientedBox3D;
use vqd_core::scenes::{ap40, generate_dataset, generate_scene, read_dataset, write_dataset, SceneConfig, ScoredDetection};

#[test]
fn object_centres_project_inside_the_image() {
    let cfg = SceneConfig { grid_size: 4, ..SceneConfig::default() };
    let (mut inside, mut total) = (0usize, 0usize);
    for seed in 0..10_000 {
        let s = generate_scene(seed, &cfg);
        for o in &s.objects {
            let (u, v) = s.intrinsics.project_normalized(o.to_box3d(&s.intrinsics).center).unwrap();
            inside += usize::from((0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v));
            total += 1;
        }
    }
    assert!(inside as f64 >= 0.99 * total as f64, "{inside}/{total}");
}

#[test]
fn dataset_round_trip_is_exact() {
    let scenes = generate_dataset(&SceneConfig { grid_size: 6, ..SceneConfig::default() }, 1000, 17);
    let mut buf = Vec::new();
    write_dataset(&scenes, &mut buf).unwrap();
    assert_eq!(read_dataset(&buf[..]).unwrap(), scenes);
}

#[test]
fn malformed_dataset_reports_the_line() {
    let scenes = generate_dataset(&SceneConfig { grid_size: 3, ..SceneConfig::default() }, 2, 0);
    let mut buf = Vec::new();
    write_dataset(&scenes, &mut buf).unwrap();
    buf.extend_from_slice(b"{not json}\n");
    let err = read_dataset(&buf[..]).unwrap_err();
    assert!(matches!(err, vqd_core::VqdError::Parse { line: 3, .. }), "{err}");
}

#[test]
fn distinct_seeds_give_distinct_scenes() {
    let cfg = SceneConfig { grid_size: 4, ..SceneConfig::default() };
    let train = generate_dataset(&cfg, 50, 0);
    let val = generate_dataset(&cfg, 50, 1 << 32);
    for a in &train {
        for b in &val {
            assert_ne!(a.seed, b.seed);
            assert_ne!(a.grid, b.grid);
        }
    }
}

#[test]
fn four_detection_case_matches_hand_interpolation() {
    let (dets, gts) = common::four_detection_case();
    assert_eq!(ap40(&dets, &gts, 0.5).unwrap(), common::FOUR_DETECTION_AP);
}

#[test]
fn no_ground_truth_is_an_error() {
    assert!(ap40(&[], &[vec![]], 0.5).is_err());
}

fn random_case(seed: u64) -> (Vec<ScoredDetection>, Vec<Vec<(usize, OrientedBox3D)>>) {
    let mut r = common::rng(seed);
    let gts: Vec<Vec<(usize, OrientedBox3D)>> =
        (0..3).map(|_| (0..r.random_range(1..4)).map(|_| (r.random_range(0..2), common::random_box(&mut r))).collect()).collect();
    let mut dets = Vec::new();
    for (scene, g) in gts.iter().enumerate() {
        for (cat, b) in g {
            if r.random_bool(0.7) {
                let mut b = *b;
                b.center[0] += r.random_range(-0.3..0.3);
                dets.push(ScoredDetection { scene, category: *cat, score: r.random(), box3d: b });
            }
        }
        for _ in 0..r.random_range(0..3) {
            dets.push(ScoredDetection { scene, category: r.random_range(0..2), score: r.random(), box3d: common::random_box(&mut r) });
        }
    }
    (dets, gts)
}

proptest! {
    #[test]
    fn ap_ignores_detection_order(seed in any::<u64>(), shift in 0usize..10) {
        let (mut dets, gts) = random_case(seed);
        let base = ap40(&dets, &gts, 0.5).unwrap();
        dets.reverse();
        let len = dets.len().max(1);
        dets.rotate_left(shift % len);
        prop_assert_eq!(ap40(&dets, &gts, 0.5).unwrap(), base);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn ap_decreases_with_stricter_threshold(seed in any::<u64>()) {
        let (dets, gts) = random_case(seed);
        let aps: Vec<f64> = [0.1, 0.3, 0.5, 0.7, 0.9].iter().map(|&t| ap40(&dets, &gts, t).unwrap()).collect();
        for w in aps.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }
}
