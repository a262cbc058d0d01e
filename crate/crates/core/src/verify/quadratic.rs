use ndarray::Array2;

use super::oracle::{mat_t_vec, mat_vec, projection_matrix, stack_cores};
use super::IdentityReport;
use crate::error::{invalid, Result};
use crate::ledger::AllocationLedger;
use crate::rng::{Role, StreamKey};
use crate::subspace::{apply_rank_r_update, plan_reshape, sample_core, LayerSubspace};

/// Closed-form test objectives on a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub enum SmoothLoss {
    /// `θᵀHθ`
    Quadratic(Array2<f64>),
    /// `Σ θᵢ⁴`
    Quartic,
}

impl SmoothLoss {
    pub fn value(&self, th: &[f64]) -> f64 {
        match self {
            SmoothLoss::Quadratic(h) => th.iter().zip(mat_vec(h.view(), th)).map(|(a, b)| a * b).sum(),
            SmoothLoss::Quartic => th.iter().map(|v| v.powi(4)).sum(),
        }
    }

    pub fn grad(&self, th: &[f64]) -> Vec<f64> {
        match self {
            SmoothLoss::Quadratic(h) => {
                let a = mat_vec(h.view(), th);
                let b = mat_t_vec(h.view(), th);
                a.iter().zip(b).map(|(x, y)| x + y).collect()
            }
            SmoothLoss::Quartic => th.iter().map(|v| 4.0 * v.powi(3)).collect(),
        }
    }

    /// Hessian-Lipschitz constant at `θ`. The quartic's third derivative is
    /// `24 θᵢ` on the diagonal, and its estimator bias involves only that
    /// tensor at `θ` itself.
    pub fn hessian_lipschitz(&self, th: &[f64]) -> f64 {
        match self {
            SmoothLoss::Quadratic(_) => 0.0,
            SmoothLoss::Quartic => 24.0 * th.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        }
    }
}

fn build_subspaces(master: u64, shapes: &[(usize, usize)], r: usize) -> Result<Vec<LayerSubspace>> {
    shapes
        .iter()
        .enumerate()
        .map(|(l, &(m, n))| {
            let plan = plan_reshape(m, n)?;
            LayerSubspace::generate(master, l, plan, r, 0)
        })
        .collect()
}

fn verify_cores(master: u64, s: u64, subs: &[LayerSubspace]) -> Result<Vec<Array2<f64>>> {
    subs.iter()
        .map(|sub| sample_core(&mut StreamKey::new(master, Role::Verify, s, sub.layer as u64).stream(), sub.rank))
        .collect()
}

/// `vec(T⁻¹(U Z Vᵀ))` per layer through the streamed update kernel.
fn implicit_direction(subs: &[LayerSubspace], cores: &[Array2<f64>], ledger: &AllocationLedger) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (sub, z) in subs.iter().zip(cores) {
        let mut w = Array2::zeros(sub.plan.orig);
        apply_rank_r_update(&mut w, sub, z, 1.0, ledger)?;
        out.extend(w.t().iter().copied());
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Setup {
    subs: Vec<LayerSubspace>,
    proj: Array2<f64>,
    q: usize,
}

fn setup(master: u64, theta: &[f64], shapes: &[(usize, usize)], r: usize) -> Result<Setup> {
    let p: usize = shapes.iter().map(|(m, n)| m * n).sum();
    if p != theta.len() {
        return invalid(format!("layer shapes hold {p} parameters, theta has {}", theta.len()));
    }
    let q = shapes.len() * r * r;
    if q > p {
        return invalid(format!("subspace dimension {q} exceeds parameter count {p}"));
    }
    let subs = build_subspaces(master, shapes, r)?;
    let proj = projection_matrix(&subs);
    Ok(Setup { subs, proj, q })
}

/// The three quadratic-loss identities: mean, second moment and cosine.
/// A fourth report checks the implicit direction against `𝒫 vec(Z)`.
pub fn quadratic_identity_check(
    h: &Array2<f64>,
    theta: &[f64],
    shapes: &[(usize, usize)],
    r: usize,
    n_samples: u64,
    master: u64,
) -> Result<Vec<IdentityReport>> {
    let setup = setup(master, theta, shapes, r)?;
    let p = theta.len();
    if h.dim() != (p, p) {
        return invalid(format!("H must be {p}x{p}, got {:?}", h.dim()));
    }
    if h.iter().zip(h.t().iter()).any(|(a, b)| (a - b).abs() > 1e-12 * a.abs().max(1.0)) {
        return invalid("H must be symmetric");
    }
    let loss = SmoothLoss::Quadratic(h.clone());
    let grad = loss.grad(theta);
    let a = mat_t_vec(setup.proj.view(), &grad);
    let target = mat_vec(setup.proj.view(), &a);
    let a2 = dot(&a, &a);
    let eps = 1e-3;
    let ledger = AllocationLedger::new();

    let mut mean = vec![0.0; p];
    let mut second = 0.0;
    let mut cosine = 0.0;
    let mut max_dir_err = 0.0f64;
    let mut plus = vec![0.0; p];
    let mut minus = vec![0.0; p];
    for s in 0..n_samples {
        let cores = verify_cores(master, s, &setup.subs)?;
        let v = implicit_direction(&setup.subs, &cores, &ledger)?;
        if s < 100 {
            let explicit = mat_vec(setup.proj.view(), &stack_cores(&cores));
            let err = v.iter().zip(&explicit).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            max_dir_err = max_dir_err.max(err);
        }
        for i in 0..p {
            plus[i] = theta[i] + eps * v[i];
            minus[i] = theta[i] - eps * v[i];
        }
        let delta = (loss.value(&plus) - loss.value(&minus)) / (2.0 * eps);
        let g2 = delta * delta * dot(&v, &v);
        mean.iter_mut().zip(&v).for_each(|(m, vi)| *m += delta * vi);
        second += g2;
        if g2 > 0.0 {
            let proj = delta * dot(&grad, &v);
            cosine += proj * proj / (a2 * g2);
        }
    }
    let n = n_samples as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let diff: Vec<f64> = mean.iter().zip(&target).map(|(m, t)| m - t).collect();
    let q = setup.q as f64;
    let tnorm = norm(&target);
    let mean_report = if tnorm > 1e-12 * norm(&grad) {
        IdentityReport::absolute("mean_vs_projected_gradient", 0.0, norm(&diff) / tnorm, n_samples, 0.02)
    } else {
        IdentityReport::absolute("mean_with_orthogonal_gradient", 0.0, norm(&mean) / norm(&grad), n_samples, 1e-10)
    };
    let mut reports = vec![
        mean_report,
        IdentityReport::relative("second_moment_ratio", q + 2.0, second / n / a2, n_samples, 0.05),
        IdentityReport::relative("cosine_quantity", 1.0 / q, cosine / n, n_samples, 0.10),
        IdentityReport::absolute("implicit_direction_vs_kronecker", 0.0, max_dir_err, n_samples.min(100), 1e-12),
    ];
    if a2 == 0.0 {
        reports.truncate(1);
    }
    Ok(reports)
}

/// `‖E[ĝ] − 𝒫𝒫ᵀ∇L‖` across perturbation sizes.
///
/// Each sample uses the control variate `ĝ − (∇Lᵀ𝒫z)𝒫z`, whose mean is the
/// bias itself, and every `ε` sees the same cores.
pub fn mean_bias_check(
    loss: &SmoothLoss,
    theta: &[f64],
    shapes: &[(usize, usize)],
    r: usize,
    eps_list: &[f64],
    n_samples: u64,
    master: u64,
) -> Result<Vec<IdentityReport>> {
    if eps_list.is_empty() || eps_list.iter().any(|e| !(*e > 0.0)) {
        return invalid("eps list must be non-empty and positive");
    }
    let setup = setup(master, theta, shapes, r)?;
    let p = theta.len();
    let grad = loss.grad(theta);
    let ledger = AllocationLedger::new();
    let mut bias = vec![vec![0.0; p]; eps_list.len()];
    let mut plus = vec![0.0; p];
    let mut minus = vec![0.0; p];
    for s in 0..n_samples {
        let cores = verify_cores(master, s, &setup.subs)?;
        let v = implicit_direction(&setup.subs, &cores, &ledger)?;
        let exact = dot(&grad, &v);
        for (e, acc) in eps_list.iter().zip(bias.iter_mut()) {
            for i in 0..p {
                plus[i] = theta[i] + e * v[i];
                minus[i] = theta[i] - e * v[i];
            }
            let delta = (loss.value(&plus) - loss.value(&minus)) / (2.0 * e);
            let w = delta - exact;
            acc.iter_mut().zip(&v).for_each(|(b, vi)| *b += w * vi);
        }
    }
    let n = n_samples as f64;
    let dev: Vec<f64> = bias.iter().map(|b| norm(b) / n).collect();
    let q = setup.q as f64;
    let l2 = loss.hessian_lipschitz(theta);
    let mut reports = Vec::new();
    for (&e, &d) in eps_list.iter().zip(&dev) {
        match loss {
            SmoothLoss::Quadratic(_) => {
                let tol = 1e-9 * norm(&grad).max(1.0);
                reports.push(IdentityReport::absolute(format!("bias eps={e:e}"), 0.0, d, n_samples, tol));
            }
            SmoothLoss::Quartic => {
                let bound = e * e / 6.0 * l2 * (q + 4.0).powi(2);
                reports.push(IdentityReport::at_most(format!("bias_bound eps={e:e}"), bound, d, n_samples));
                let analytic = quartic_bias(&setup.proj, theta, e);
                reports.push(IdentityReport::relative(format!("bias_vs_analytic eps={e:e}"), analytic, d, n_samples, 0.1));
            }
        }
    }
    if matches!(loss, SmoothLoss::Quartic) {
        for k in 0..eps_list.len().saturating_sub(1) {
            let f2 = (eps_list[k] / eps_list[k + 1]).powi(2);
            reports.push(IdentityReport::bounded(
                format!("bias_ratio eps={:e}/{:e}", eps_list[k], eps_list[k + 1]),
                0.75 * f2,
                1.25 * f2,
                dev[k] / dev[k + 1],
                n_samples,
            ));
        }
    }
    Ok(reports)
}

/// Exact quartic bias `12ε² ‖C (θ ⊙ diag C)‖` with `C = 𝒫𝒫ᵀ`, from
/// `E[v_i³ v_j] = 3 C_ii C_ij` for Gaussian `v = 𝒫z`.
fn quartic_bias(proj: &Array2<f64>, theta: &[f64], eps: f64) -> f64 {
    let c = proj.dot(&proj.t());
    let w: Vec<f64> = theta.iter().enumerate().map(|(i, t)| t * c[[i, i]]).collect();
    12.0 * eps * eps * norm(&mat_vec(c.view(), &w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_oversized_subspace() {
        let theta = vec![0.1; 8];
        let h = Array2::eye(8);
        assert!(quadratic_identity_check(&h, &theta, &[(2, 4)], 3, 10, 0).is_err());
    }

    #[test]
    fn orthogonal_gradient_gives_zero_mean() {
        let shapes = [(2, 4)];
        let subs = build_subspaces(4, &shapes, 1).unwrap();
        let proj = projection_matrix(&subs);
        let w: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let pw = mat_vec(proj.view(), &mat_t_vec(proj.view(), &w));
        let theta: Vec<f64> = w.iter().zip(&pw).map(|(a, b)| a - b).collect();
        let reports = quadratic_identity_check(&Array2::eye(8), &theta, &shapes, 1, 500, 4).unwrap();
        assert_eq!(reports[0].quantity, "mean_with_orthogonal_gradient");
        assert!(reports[0].pass, "{}", reports[0].summary());
    }

    #[test]
    fn quadratic_bias_vanishes() {
        let theta: Vec<f64> = (0..8).map(|i| 0.3 - 0.1 * i as f64).collect();
        let reports =
            mean_bias_check(&SmoothLoss::Quadratic(Array2::eye(8)), &theta, &[(2, 4)], 2, &[1e-1, 1e-2], 200, 1).unwrap();
        assert!(reports.iter().all(|r| r.pass), "{reports:?}");
    }
}
