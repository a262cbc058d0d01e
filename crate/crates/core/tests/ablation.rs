use sdze_core::harness::{benchmark_config, run_sweep_batch, tiny_table, RunConfig};
use sdze_core::{
    sdze_step, sdze_step_naive, Activation, AllocationLedger, MlpParams, Nonlinearity, Normalization, PdeObjective,
    PdeProblem, SdzeConfig, SolutionKind, Trainer,
};

fn small_problem(d: usize) -> PdeProblem {
    PdeProblem::new(5, d, Nonlinearity::None, SolutionKind::TwoBody, Normalization::DimNormalized).unwrap()
}

fn bits(p: &MlpParams) -> Vec<u64> {
    p.flatten().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn full_dimension_sampling_makes_the_lock_irrelevant() {
    let d = 12;
    let problem = small_problem(d);
    let params = MlpParams::init(5, d, &[10, 8], Activation::Sin, true).unwrap();
    let cfg = SdzeConfig { rank: 3, batch_points: 8, freq: 4, steps: 10, ..benchmark_config(5, d) };
    let objective = PdeObjective { problem: &problem, master: 5, batch_points: 8, batch_dims: d };
    let mut locked = Trainer::new(cfg.clone(), params.clone()).unwrap();
    let mut naive = Trainer::new(SdzeConfig { crns: false, ..cfg }, params).unwrap();
    for _ in 0..10 {
        let a = locked.step(&objective).unwrap();
        let b = naive.step(&objective).unwrap();
        assert_eq!(a.delta_hat.to_bits(), b.delta_hat.to_bits(), "step {}", a.step);
    }
    assert_eq!(bits(&locked.params), bits(&naive.params));
}

#[test]
fn partial_sampling_separates_the_modes() {
    let d = 12;
    let problem = small_problem(d);
    let params = MlpParams::init(5, d, &[10], Activation::Sin, true).unwrap();
    let cfg = SdzeConfig { rank: 3, batch_points: 8, ..benchmark_config(5, 3) };
    let objective = PdeObjective { problem: &problem, master: 5, batch_points: 8, batch_dims: 3 };
    let subs = cfg.subspaces_at(&params, 0).unwrap();
    let ledger = AllocationLedger::new();
    let (mut p1, mut s1) = (params.clone(), subs.clone());
    let (mut p2, mut s2) = (params, subs);
    let a = sdze_step(&mut p1, &mut s1, &objective, &cfg, 1, &ledger).unwrap();
    let naive_cfg = SdzeConfig { crns: false, ..cfg.clone() };
    let b = sdze_step_naive(&mut p2, &mut s2, &objective, &naive_cfg, 1, &ledger).unwrap();
    assert_eq!(a.loss_plus.to_bits(), b.loss_plus.to_bits());
    assert_ne!(a.loss_minus.to_bits(), b.loss_minus.to_bits());

    assert!(sdze_step_naive(&mut p1, &mut s1, &objective, &cfg, 2, &ledger).is_err());
    assert!(sdze_step(&mut p2, &mut s2, &objective, &naive_cfg, 2, &ledger).is_err());
}

/// With every term identical, term sampling adds nothing, so at a fixed
/// product `B·b` the variance only falls as `B` grows.
#[test]
fn aliased_terms_favour_more_points() {
    let table = tiny_table(3).unwrap().aliased();
    let var = |nb, ni| table.enumerate(nb, ni).unwrap().1;
    let (v11, v12, v21) = (var(1, 1), var(1, 2), var(2, 1));
    assert!(v11 > 0.0);
    assert!((v12 - v11).abs() <= 1e-12 * v11, "term count changed the variance: {v11} vs {v12}");
    assert!(v21 < v12, "more points at equal product should win: {v21} vs {v12}");
}

#[test]
fn batch_sweep_rejects_unequal_products() {
    let cfg = RunConfig::from_json_str(
        r#"{"steps": 2, "pde": {"dim": 8}, "net": {"widths": [4]},
            "sdze": {"rank": 2, "freq_F": 5, "eps": 1e-3, "lr": {"schedule": "constant", "alpha": 0.01},
                     "batch_points_B": 4, "batch_dims_b": 2}}"#,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = run_sweep_batch(&cfg, &[(4, 2), (2, 3)], 4, dir.path()).unwrap_err().to_string();
    assert!(err.contains("B*b = 8") && err.contains("2x3"), "{err}");
}
