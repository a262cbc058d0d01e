use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use sdze_core::harness::{benchmark_config, benchmark_params};
use sdze_core::subspace::{sample_core, thin_q};
use sdze_core::verify::oracle::explicit_delta;
use sdze_core::{
    plan_reshape, AllocationLedger, LayerSubspace, Nonlinearity, Normalization, PdeObjective, PdeProblem, Role,
    SolutionKind, SpatialSample, StreamKey, Trainer,
};

fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut data = vec![0.0; rows * cols];
    StreamKey::new(seed, Role::Verify, 0, 0).stream().fill_normal(&mut data);
    Array2::from_shape_vec((rows, cols), data).unwrap()
}

fn contraction(c: &mut Criterion) {
    let mut g = c.benchmark_group("first_layer_perturbation");
    for d in [100usize, 1_000, 10_000] {
        let plan = plan_reshape(d, 128).unwrap();
        let sub = LayerSubspace::generate(1, 0, plan, 16, 0).unwrap();
        let z = sample_core(&mut StreamKey::new(1, Role::CoreZ, 1, 0).stream(), 16).unwrap();
        let h = gaussian(100, d, 2);
        let ledger = AllocationLedger::new();
        g.bench_with_input(BenchmarkId::new("implicit", d), &d, |b, _| {
            b.iter(|| sub.contract(h.view(), &z, &ledger).unwrap())
        });
        if d <= 1_000 {
            g.bench_with_input(BenchmarkId::new("explicit", d), &d, |b, _| {
                b.iter(|| h.dot(&explicit_delta(&sub, &z)))
            });
        }
    }
    g.finish();
}

fn qr_refresh(c: &mut Criterion) {
    let mut g = c.benchmark_group("thin_qr");
    for (m, r) in [(128usize, 16usize), (1_000, 16), (1_000, 64)] {
        let a = gaussian(m, r, 3);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{m}x{r}")), &a, |b, a| b.iter(|| thin_q(a)));
    }
    g.finish();
}

fn spatial_draw(c: &mut Criterion) {
    c.bench_function("spatial_sample_d1000_B100", |b| {
        b.iter(|| {
            let s = SpatialSample::draw(4, 9, 0, 1_000, 100, 16, false).unwrap();
            s.points(1_000).unwrap()
        })
    });
}

fn training_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("sdze_step");
    g.sample_size(10);
    for d in [100usize, 1_000] {
        let problem = PdeProblem::new(0, d, Nonlinearity::None, SolutionKind::TwoBody, Normalization::DimNormalized).unwrap();
        let cfg = benchmark_config(0, 16);
        let objective = PdeObjective { problem: &problem, master: 0, batch_points: cfg.batch_points, batch_dims: 16 };
        let mut trainer = Trainer::new(cfg, benchmark_params(0, d).unwrap()).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(d), &d, |b, _| b.iter(|| trainer.step(&objective).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, contraction, qr_refresh, spatial_draw, training_step);
criterion_main!(benches);
