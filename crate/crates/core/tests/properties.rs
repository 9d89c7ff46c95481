mod common;

use common::synth;
use composer_core::augment::{actor_dropout, horizontal_flip, horizontal_move, vertical_move};
use composer_core::autograd::Mat;
use composer_core::cluster::{sinkhorn_codes, sinkhorn_plan};
use composer_core::dataset::{assign_groups_kmeans, heuristic_from_mean_x, ClipFeatures, FeatureStats, RawClip};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Mat {
    let mut m = Mat::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    for mut r in m.rows_mut() {
        let norm = r.dot(&r).sqrt();
        r /= norm;
    }
    m
}

fn diffs(c: &RawClip) -> Vec<f64> {
    let origin = c.persons[0].keypoints[0][0];
    c.persons
        .iter()
        .flat_map(|p| p.keypoints.iter().flatten())
        .flat_map(|k| [k[0] - origin[0], k[1] - origin[1]])
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn codes_are_distributions(b in 1usize..20, k in 2usize..40, seed in 0u64..1000, iters in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = unit_rows(&mut rng, b, 8);
        let c = unit_rows(&mut rng, k, 8);
        let q = sinkhorn_codes(&v, &c, 0.05, iters).q;
        prop_assert!(q.iter().all(|&x| x >= 0.0));
        for row in q.rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn marginal_violation_never_increases(b in 2usize..20, k in 2usize..40, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = unit_rows(&mut rng, b, 8);
        let c = unit_rows(&mut rng, k, 8);
        let (_, viol) = sinkhorn_plan(&v, &c, 0.05, 10);
        for w in viol.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-15, "{:?}", viol);
        }
    }

    #[test]
    fn flip_is_an_involution(i in 0usize..8, seed in 0u64..1000) {
        let (clips, m) = synth(8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let once = horizontal_flip(&clips[i], &m, &mut rng, 0.0);
        let twice = horizontal_flip(&once, &m, &mut rng, 0.0);
        prop_assert_eq!(&twice, &clips[i]);
        prop_assert_eq!(once.group_label, m.group_flip[clips[i].group_label]);
    }

    #[test]
    fn moves_keep_relative_geometry(i in 0usize..8, seed in 0u64..1000, bound in 0i64..200) {
        let (clips, _) = synth(8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = horizontal_move(&clips[i], &mut rng, bound, 0.0);
        let v = vertical_move(&h, &mut rng, bound, 0.0);
        prop_assert_eq!(diffs(&v), diffs(&clips[i]));
    }

    #[test]
    fn actor_dropout_removes_one_person_frame(i in 0usize..8, seed in 0u64..1000) {
        let (clips, m) = synth(8);
        let stats = FeatureStats::fit(&clips);
        let f = ClipFeatures::build(&clips[i], &m, &stats);
        let d = actor_dropout(&f, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(d.num_dropped(), f.num_dropped() + 1);
    }

    #[test]
    fn heuristic_groups_split_by_position(xs in prop::collection::vec(-1e3f64..1e3, 2..14)) {
        let a = heuristic_from_mean_x(&xs);
        prop_assert_eq!(a.num_groups(), 2);
        prop_assert_eq!(a.members[0].len(), xs.len().div_ceil(2));
        let left_max = a.members[0].iter().map(|&i| xs[i]).fold(f64::NEG_INFINITY, f64::max);
        let right_min = a.members[1].iter().map(|&i| xs[i]).fold(f64::INFINITY, f64::min);
        prop_assert!(left_max <= right_min);
    }

    #[test]
    fn kmeans_is_deterministic_and_covers_every_person(n in 2usize..14, k in 1usize..4, seed in 0u64..1000) {
        prop_assume!(n >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = Mat::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let a = assign_groups_kmeans(&pts, k, seed);
        prop_assert_eq!(&a, &assign_groups_kmeans(&pts, k, seed));
        prop_assert_eq!(a.mapping.len(), n);
        prop_assert!(a.members.iter().all(|g| !g.is_empty()));
        prop_assert_eq!(a.members.iter().map(Vec::len).sum::<usize>(), n);
    }
}
