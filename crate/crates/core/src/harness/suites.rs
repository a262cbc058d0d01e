//! Fixed verification setups. Each suite returns its reports; the sizes and
//! tolerances here are the ones the acceptance run pins.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Result, SdzeError};
use crate::jets::Activation;
use crate::net::MlpParams;
use crate::optimizer::{LrSchedule, PdeObjective, SdzeConfig, Trainer};
use crate::rng::{gaussian_matrix, Role, StreamKey};
use crate::spatial::{sample_unit_ball, Nonlinearity, Normalization, PdeProblem, SolutionKind};
use crate::verify::{
    crns_variance_sweep, implicit_equivalence_check, jets_fd_check, manufactured_residual_check, mean_bias_check,
    orthogonality_check, quadratic_identity_check, unbiasedness_check, variance_law_check, CrnsSweep, IdentityReport,
    SmoothLoss, TermTable,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Quadratic,
    MeanBias,
    VarianceLaw,
    Unbiasedness,
    Crns,
    Jets,
    Implicit,
    Memory,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::Quadratic,
        Suite::MeanBias,
        Suite::VarianceLaw,
        Suite::Unbiasedness,
        Suite::Crns,
        Suite::Jets,
        Suite::Implicit,
        Suite::Memory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Quadratic => "quadratic",
            Suite::MeanBias => "mean-bias",
            Suite::VarianceLaw => "variance-law",
            Suite::Unbiasedness => "unbiasedness",
            Suite::Crns => "crns",
            Suite::Jets => "jets",
            Suite::Implicit => "implicit",
            Suite::Memory => "memory",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = SdzeError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Suite::ALL.iter().map(|x| x.name()).collect();
            SdzeError::InvalidArgument(format!("unknown suite `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<IdentityReport>> {
    match suite {
        Suite::Quadratic => quadratic_suite(seed),
        Suite::MeanBias => mean_bias_suite(seed),
        Suite::VarianceLaw => variance_law_check(&tiny_table(seed)?).map(|(_, r)| r),
        Suite::Unbiasedness => unbiasedness_check(&tiny_table(seed)?),
        Suite::Crns => crns_suite(seed).map(|(_, r)| r),
        Suite::Jets => jets_suite(seed),
        Suite::Implicit => implicit_suite(seed),
        Suite::Memory => memory_suite(seed).map(|(_, r)| r),
    }
}

fn verify_key(seed: u64, index: u64) -> StreamKey {
    StreamKey::new(seed, Role::Verify, 1 << 32, index)
}

/// `AᵀA/P + I` and a standard normal `θ`.
fn random_quadratic(seed: u64, p: usize) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut s = verify_key(seed, 0).stream();
    let a = gaussian_matrix(&mut s, p, p)?;
    let h = a.t().dot(&a) / p as f64 + Array2::<f64>::eye(p);
    let mut theta = vec![0.0; p];
    s.fill_normal(&mut theta);
    Ok((h, theta))
}

fn param_count(shapes: &[(usize, usize)]) -> usize {
    shapes.iter().map(|(m, n)| m * n).sum()
}

/// `q = 4` on one split layer and `q = 16` on four layers at rank 2.
pub const QUADRATIC_CASES: [(&[(usize, usize)], usize); 2] =
    [(&[(12, 3)], 2), (&[(10, 12), (12, 8), (8, 6), (6, 5)], 2)];
pub const QUADRATIC_SAMPLES: u64 = 100_000;

fn quadratic_suite(seed: u64) -> Result<Vec<IdentityReport>> {
    let mut out = Vec::new();
    for (shapes, r) in QUADRATIC_CASES {
        let q = shapes.len() * r * r;
        let (h, theta) = random_quadratic(seed ^ q as u64, param_count(shapes))?;
        for mut rep in quadratic_identity_check(&h, &theta, shapes, r, QUADRATIC_SAMPLES, seed)? {
            rep.quantity = format!("q={q} {}", rep.quantity);
            out.push(rep);
        }
    }
    Ok(out)
}

fn mean_bias_suite(seed: u64) -> Result<Vec<IdentityReport>> {
    let shapes: &[(usize, usize)] = &[(6, 4), (4, 3)];
    let mut theta = vec![0.0; param_count(shapes)];
    verify_key(seed, 1).stream().fill_normal(&mut theta);
    let eps = [1e-1, 5e-2, 1e-2, 1e-3];
    let mut out = mean_bias_check(&SmoothLoss::Quartic, &theta, shapes, 2, &eps, 20_000, seed)?;
    let (h, th) = random_quadratic(seed, param_count(shapes))?;
    out.extend(mean_bias_check(&SmoothLoss::Quadratic(h), &th, shapes, 2, &eps, 2_000, seed)?);
    Ok(out)
}

/// Three points, four terms, a 4→3→1 network.
pub fn tiny_table(seed: u64) -> Result<TermTable> {
    let problem = PdeProblem::new(seed, 4, Nonlinearity::None, SolutionKind::TwoBody, Normalization::Raw)?;
    let params = MlpParams::init(seed, 4, &[3], Activation::Sin, false)?;
    let points = sample_unit_ball(&mut verify_key(seed, 2).stream(), 3, 4)?;
    TermTable::build(&problem, &params, &points, 1e-5)
}

/// The benchmark network: `d → 128 → 128 → 1`, sine, with biases.
pub fn benchmark_params(seed: u64, d: usize) -> Result<MlpParams> {
    MlpParams::init(seed, d, &[128, 128], Activation::Sin, true)
}

pub fn benchmark_config(seed: u64, batch_dims: usize) -> SdzeConfig {
    SdzeConfig {
        master: seed,
        eps: 1e-3,
        lr: LrSchedule::Annealed { gamma: 0.3, m: 100.0, p: 0.6 },
        steps: 0,
        rank: 16,
        rank_per_layer: None,
        freq: 1000,
        batch_points: 100,
        batch_dims,
        crns: true,
        eval_every: 0,
        test_points: 1000,
        timing: false,
    }
}

pub const CRNS_EPS: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];
pub const CRNS_REPLICATES: u64 = 500;

/// `d = 100`, `b = 5`, frozen initial parameters.
pub fn crns_suite(seed: u64) -> Result<(CrnsSweep, Vec<IdentityReport>)> {
    let problem = PdeProblem::new(seed, 100, Nonlinearity::None, SolutionKind::TwoBody, Normalization::DimNormalized)?;
    let params = benchmark_params(seed, 100)?;
    let sweep = crns_variance_sweep(&problem, &params, &benchmark_config(seed, 5), &CRNS_EPS, CRNS_REPLICATES)?;
    let n = CRNS_REPLICATES;
    let var = |mode, e| sweep.variance(mode, e).unwrap_or(f64::NAN);
    let crns_vars: Vec<f64> = CRNS_EPS.iter().map(|&e| var("crns", e)).collect();
    let spread = crns_vars.iter().cloned().fold(f64::MIN, f64::max) / crns_vars.iter().cloned().fold(f64::MAX, f64::min);
    let reports = vec![
        IdentityReport::bounded("naive variance slope", -2.2, -1.8, sweep.naive_slope, n),
        IdentityReport::bounded("crns variance slope", -0.3, 0.3, sweep.crns_slope, n),
        IdentityReport::at_most("crns variance max/min over eps", 2.0, spread, n),
        IdentityReport::at_least("naive/crns variance ratio at eps=1e-3", 1e4, var("naive", 1e-3) / var("crns", 1e-3), n),
    ];
    Ok((sweep, reports))
}

fn jets_suite(seed: u64) -> Result<Vec<IdentityReport>> {
    let mut out = jets_fd_check(seed, 10)?;
    let problems = [
        (100, Nonlinearity::None, SolutionKind::TwoBody),
        (30, Nonlinearity::AllenCahn, SolutionKind::ThreeBody),
        (10, Nonlinearity::SineGordon, SolutionKind::TwoBody),
    ];
    for (d, nl, sol) in problems {
        let problem = PdeProblem::new(seed, d, nl, sol, Normalization::Raw)?;
        for mut rep in manufactured_residual_check(&problem, seed, 200)? {
            rep.quantity = format!("{nl:?}/{sol:?} d={d} {}", rep.quantity);
            out.push(rep);
        }
    }
    Ok(out)
}

fn implicit_suite(seed: u64) -> Result<Vec<IdentityReport>> {
    let mut out = implicit_equivalence_check(seed, 24)?;
    let cfg = benchmark_config(seed, 16);
    out.extend(orthogonality_check(&cfg, &benchmark_params(seed, 100)?, 20_000)?);
    Ok(out)
}

pub const MEMORY_DIMS: [usize; 3] = [100, 1_000, 10_000];

/// Peak per-step temporaries at each input dimension, minus the `B·d`
/// collocation batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRow {
    pub dim: usize,
    pub peak: usize,
    pub excess: usize,
}

pub fn memory_suite(seed: u64) -> Result<(Vec<MemoryRow>, Vec<IdentityReport>)> {
    let cfg = benchmark_config(seed, 16);
    let mut rows = Vec::new();
    for d in MEMORY_DIMS {
        let problem = PdeProblem::new(seed, d, Nonlinearity::None, SolutionKind::TwoBody, Normalization::DimNormalized)?;
        let objective = PdeObjective {
            problem: &problem,
            master: seed,
            batch_points: cfg.batch_points,
            batch_dims: cfg.batch_dims,
        };
        let mut trainer = Trainer::new(SdzeConfig { steps: 3, ..cfg.clone() }, benchmark_params(seed, d)?)?;
        let mut peak = 0;
        for _ in 0..3 {
            peak = peak.max(trainer.step(&objective)?.peak_tmp_elems);
        }
        let excess = peak.saturating_sub(cfg.batch_points * d);
        rows.push(MemoryRow { dim: d, peak, excess });
    }
    let base = rows[0].excess as f64;
    let reports = rows
        .iter()
        .skip(1)
        .map(|r| IdentityReport::at_most(format!("excess peak ratio d={} vs d={}", r.dim, rows[0].dim), 1.2, r.excess as f64 / base, 3))
        .collect();
    Ok((rows, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("bogus".parse::<Suite>().unwrap_err().to_string().contains("mean-bias"));
    }

    #[test]
    fn quadratic_cases_have_the_pinned_q() {
        let qs: Vec<usize> = QUADRATIC_CASES.iter().map(|(s, r)| s.len() * r * r).collect();
        assert_eq!(qs, [4, 16]);
    }
}
