use ndarray::Array2;
use proptest::prelude::*;
use sdze_core::harness::{decode_checkpoint, encode_checkpoint};
use sdze_core::rng::sample_index_set;
use sdze_core::spatial::sample_unit_ball;
use sdze_core::subspace::sample_core;
use sdze_core::verify::oracle::explicit_delta;
use sdze_core::{
    lr_schedule, plan_reshape, Activation, AllocationLedger, LayerSubspace, LrSchedule, MlpParams, Role,
    RunningMoments, SpatialSample, StreamKey,
};

fn matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut s = StreamKey::new(seed, Role::Verify, 0, 0).stream();
    let mut data = vec![0.0; rows * cols];
    s.fill_normal(&mut data);
    Array2::from_shape_vec((rows, cols), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reshape_is_a_bijection(m in 1usize..300, n in 1usize..40, seed in any::<u64>()) {
        let plan = plan_reshape(m, n).unwrap();
        prop_assert_eq!(plan.square.0 * plan.square.1, m * n);
        let w = matrix(m, n, seed);
        let back = plan.from_square(&plan.to_square(&w).unwrap()).unwrap();
        prop_assert_eq!(back, w);
        for (i, j) in [(0, 0), (m - 1, n - 1), (m / 2, n / 3)] {
            let (a, c) = plan.to_square_index(i, j);
            prop_assert_eq!(plan.from_square_index(a, c), (i, j));
        }
    }

    #[test]
    fn contraction_matches_the_explicit_delta(
        m in 1usize..120,
        n in 1usize..24,
        rows in 1usize..6,
        rank_seed in 0usize..1000,
        seed in any::<u64>(),
    ) {
        let plan = plan_reshape(m, n).unwrap();
        let rank = 1 + rank_seed % plan.square.0.min(plan.square.1);
        let sub = LayerSubspace::generate(seed, 0, plan, rank, 0).unwrap();
        let z = sample_core(&mut StreamKey::new(seed, Role::CoreZ, 1, 0).stream(), rank).unwrap();
        let h = matrix(rows, m, seed ^ 1);
        let got = sub.contract(h.view(), &z, &AllocationLedger::new()).unwrap();
        let want = h.dot(&explicit_delta(&sub, &z));
        let scale = want.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let diff = (&got - &want).iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(diff / scale <= 1e-12, "relative difference {}", diff / scale);
    }

    #[test]
    fn merged_moments_equal_sequential(xs in prop::collection::vec(-1e3f64..1e3, 2..200), cut in 0usize..200) {
        let cut = cut.min(xs.len());
        let mut all = RunningMoments::default();
        xs.iter().for_each(|&x| all.push(x));
        let (mut a, mut b) = (RunningMoments::default(), RunningMoments::default());
        xs[..cut].iter().for_each(|&x| a.push(x));
        xs[cut..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        prop_assert_eq!(a.count, all.count);
        prop_assert!((a.mean - all.mean).abs() <= 1e-9 * (1.0 + all.mean.abs()));
        prop_assert!((a.variance() - all.variance()).abs() <= 1e-9 * (1.0 + all.variance()));
    }

    #[test]
    fn index_sets_are_distinct_and_in_range(n in 1usize..500, k_seed in 0usize..500, seed in any::<u64>()) {
        let k = 1 + k_seed % n;
        let mut s = StreamKey::new(seed, Role::DimSet1, 3, 0).stream();
        let mut set = sample_index_set(&mut s, n, k, false).unwrap();
        prop_assert_eq!(set.len(), k);
        prop_assert!(set.iter().all(|&i| i < n));
        set.sort_unstable();
        set.dedup();
        prop_assert_eq!(set.len(), k);
    }

    #[test]
    fn spatial_draws_replay_bitwise(seed in any::<u64>(), step in 0u64..1_000_000, d in 2usize..64) {
        let b = 1 + (seed as usize) % d;
        let a = SpatialSample::draw(seed, step, 0, d, 4, b, false).unwrap();
        let again = SpatialSample::draw(seed, step, 0, d, 4, b, false).unwrap();
        let bits = |s: &SpatialSample| s.points(d).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&again));
        prop_assert_eq!(&a, &again);
    }

    #[test]
    fn unit_ball_points_stay_inside(seed in any::<u64>(), d in 1usize..200) {
        let pts = sample_unit_ball(&mut StreamKey::new(seed, Role::Collocation, 0, 0).stream(), 16, d).unwrap();
        for row in pts.rows() {
            prop_assert!(row.iter().map(|v| v * v).sum::<f64>() <= 1.0);
        }
    }

    #[test]
    fn annealed_rate_is_positive_and_non_increasing(
        gamma in 1e-4f64..10.0,
        m in 0.0f64..500.0,
        p in 0.51f64..1.0,
        t in 1u64..100_000,
    ) {
        let lr = LrSchedule::Annealed { gamma, m, p };
        let now = lr_schedule(&lr, t, 16).unwrap();
        let next = lr_schedule(&lr, t + 1, 16).unwrap();
        prop_assert!(now > 0.0 && next <= now);
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), step in any::<u64>(), d in 1usize..20, w in 1usize..12, biased in any::<bool>()) {
        let params = MlpParams::init(seed, d, &[w], Activation::Sin, biased).unwrap();
        let ck = decode_checkpoint(&encode_checkpoint(&params, step, seed)).unwrap();
        prop_assert_eq!((ck.seed, ck.step), (seed, step));
        let back = ck.into_params(Activation::Sin, biased).unwrap();
        prop_assert_eq!(params.flatten(), back.flatten());
    }
}
