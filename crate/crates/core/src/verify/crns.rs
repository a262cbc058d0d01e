use serde::Serialize;

use crate::error::{invalid, Result};
use crate::ledger::AllocationLedger;
use crate::net::MlpParams;
use crate::optimizer::{directional_estimate, step_cores, PdeObjective, SdzeConfig};
use crate::spatial::{PdeProblem, RunningMoments};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrnsRow {
    pub eps: f64,
    pub mode: String,
    pub variance: f64,
    pub mean: f64,
    pub replicates: u64,
    pub non_finite: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrnsSweep {
    pub rows: Vec<CrnsRow>,
    pub crns_slope: f64,
    pub naive_slope: f64,
}

impl CrnsSweep {
    pub fn variance(&self, mode: &str, eps: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.mode == mode && r.eps == eps).map(|r| r.variance)
    }
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Moments of `δ̂` at frozen parameters for each `(ε, crns)` setting.
///
/// Replicate `k` uses the spatial draw and cores of step `k + 1`; bases stay
/// at step 0. Every setting sees the same keys. Non-finite estimates are
/// counted, not accumulated.
pub fn delta_hat_moments(
    problem: &PdeProblem,
    params: &MlpParams,
    cfg: &SdzeConfig,
    settings: &[(f64, bool)],
    replicates: u64,
) -> Result<Vec<(RunningMoments, u64)>> {
    if settings.iter().any(|(e, _)| !(*e > 0.0)) {
        return invalid("eps values must be positive");
    }
    let subs = cfg.subspaces_at(params, 0)?;
    let objective = PdeObjective {
        problem,
        master: cfg.master,
        batch_points: cfg.batch_points,
        batch_dims: cfg.batch_dims,
    };
    let ledger = AllocationLedger::new();
    let mut out = vec![(RunningMoments::default(), 0u64); settings.len()];
    for k in 0..replicates {
        let t = k + 1;
        let cores = step_cores(cfg.master, t, &subs)?;
        for (&(eps, crns), (m, bad)) in settings.iter().zip(out.iter_mut()) {
            let est = directional_estimate(params, &subs, &cores, &objective, eps, t, crns, &ledger)?;
            if est.delta_hat.is_finite() {
                m.push(est.delta_hat);
            } else {
                *bad += 1;
            }
        }
    }
    Ok(out)
}

/// Variance of `δ̂` per `ε` in both lock modes, with log-log slopes.
pub fn crns_variance_sweep(
    problem: &PdeProblem,
    params: &MlpParams,
    cfg: &SdzeConfig,
    eps_list: &[f64],
    replicates: u64,
) -> Result<CrnsSweep> {
    if replicates < 100 {
        return invalid(format!("variance sweep needs >= 100 replicates, got {replicates}"));
    }
    if eps_list.len() < 2 {
        return invalid("variance sweep needs at least two eps values");
    }
    let settings: Vec<(f64, bool)> = eps_list.iter().flat_map(|&e| [(e, true), (e, false)]).collect();
    let moments = delta_hat_moments(problem, params, cfg, &settings, replicates)?;
    let rows: Vec<CrnsRow> = settings
        .iter()
        .zip(&moments)
        .map(|(&(eps, crns), (m, bad))| CrnsRow {
            eps,
            mode: if crns { "crns" } else { "naive" }.to_string(),
            variance: m.variance(),
            mean: m.mean,
            replicates,
            non_finite: *bad,
        })
        .collect();
    let slope = |mode: &str| {
        let v: Vec<f64> = rows.iter().filter(|r| r.mode == mode).map(|r| r.variance).collect();
        log_log_slope(eps_list, &v)
    };
    Ok(CrnsSweep {
        crns_slope: slope("crns"),
        naive_slope: slope("naive"),
        rows,
    })
}
