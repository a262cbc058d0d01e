//! Exact expectations over with-replacement index draws.
//!
//! For a fixed parameter vector the spatial gradient surrogate built from a
//! point multiset `B` and a term multiset `I` is an average of the per-pair
//! vectors `g_{n,i} = (ℒu(x_n) − f(x_n)) · ∂_θ ℒ_i u(x_n)`. Every draw is
//! equally likely, so moments follow from summing over all
//! `N_r^|B| · N_L^|I|` tuples.

use ndarray::{Array1, Array2, Array3, Axis};

use super::{brute_force_gradient, IdentityReport};
use crate::error::{invalid, Result};
use crate::net::{jet_forward, MlpParams, PerturbView};
use crate::spatial::{Nonlinearity, PdeProblem};

const MAX_TUPLES: usize = 1 << 20;

/// Per-point, per-term values and parameter gradients on a tiny problem.
#[derive(Debug, Clone, PartialEq)]
pub struct TermTable {
    /// `∂²u/∂x_i²(x_n)`, `N_r × N_L`.
    pub term_values: Array2<f64>,
    /// `∂_θ ∂²u/∂x_i²(x_n)`, `N_r × N_L × P`.
    pub term_grads: Array3<f64>,
    /// `f(x_n)`.
    pub rhs: Array1<f64>,
}

impl TermTable {
    /// Finite-difference gradients (step `h`) of every term of a Poisson
    /// problem at the given points.
    pub fn build(problem: &PdeProblem, params: &MlpParams, points: &Array2<f64>, h: f64) -> Result<Self> {
        if problem.nonlinearity != Nonlinearity::None {
            return invalid("term tables are defined for the Poisson operator only");
        }
        let (nr, nl) = (points.nrows(), problem.term_count());
        let theta = params.flatten();
        let mut term_values = Array2::zeros((nr, nl));
        let mut term_grads = Array3::zeros((nr, nl, theta.len()));
        let mut rhs = Array1::zeros(nr);
        let mut scratch = params.clone();
        for (n, x) in points.axis_iter(Axis(0)).enumerate() {
            let x = x.to_vec();
            rhs[n] = problem.rhs(&x);
            for i in 0..nl {
                term_values[[n, i]] = jet_forward(&PerturbView::plain(params), &x, &[i])?[0].d2;
                let g = brute_force_gradient(
                    |th| {
                        scratch.set_flat(th)?;
                        Ok(jet_forward(&PerturbView::plain(&scratch), &x, &[i])?[0].d2)
                    },
                    &theta,
                    h,
                )?;
                term_grads.slice_mut(ndarray::s![n, i, ..]).assign(&Array1::from(g));
            }
        }
        Ok(Self {
            term_values,
            term_grads,
            rhs,
        })
    }

    /// Every term replaced by term 0, so term sampling carries no variance.
    pub fn aliased(&self) -> Self {
        let mut out = self.clone();
        for i in 1..self.n_terms() {
            let v = self.term_values.column(0).to_owned();
            out.term_values.column_mut(i).assign(&v);
            let g = self.term_grads.index_axis(Axis(1), 0).to_owned();
            out.term_grads.index_axis_mut(Axis(1), i).assign(&g);
        }
        out
    }

    pub fn n_points(&self) -> usize {
        self.term_values.nrows()
    }

    pub fn n_terms(&self) -> usize {
        self.term_values.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.term_grads.len_of(Axis(2))
    }

    fn residual(&self, n: usize) -> f64 {
        self.term_values.row(n).sum() - self.rhs[n]
    }

    /// `g = (1/(N_r N_L²)) Σ_n r_n Σ_i ∂_θ ℒ_i u(x_n)`.
    pub fn full_gradient(&self) -> Array1<f64> {
        let (nr, nl) = (self.n_points(), self.n_terms());
        let mut g = Array1::zeros(self.n_params());
        for n in 0..nr {
            let r = self.residual(n);
            for i in 0..nl {
                g.scaled_add(r, &self.term_grads.slice(ndarray::s![n, i, ..]));
            }
        }
        g / (nr * nl * nl) as f64
    }

    fn check_size(&self, draws: &[(usize, usize)]) -> Result<usize> {
        let mut total = 1usize;
        for &(base, k) in draws {
            if k == 0 {
                return invalid("sample sizes must be >= 1");
            }
            total = base
                .checked_pow(k as u32)
                .and_then(|v| total.checked_mul(v))
                .filter(|&t| t <= MAX_TUPLES)
                .ok_or_else(|| crate::error::SdzeError::InvalidArgument("enumeration too large".into()))?;
        }
        Ok(total)
    }

    /// Mean and trace variance of `g_{B,I}` over all draws with
    /// `|B| = nb`, `|I| = ni`. Two passes, so the variance carries no
    /// cancellation against the mean.
    pub fn enumerate(&self, nb: usize, ni: usize) -> Result<(Array1<f64>, f64)> {
        let (nr, nl) = (self.n_points(), self.n_terms());
        let total = self.check_size(&[(nr, nb), (nl, ni)])?;
        let scale = 1.0 / (nb * ni * nl) as f64;
        let mut g = Array1::zeros(self.n_params());
        let sample = |code: usize, g: &mut Array1<f64>| {
            let (bs, is) = decode(code, nr, nb, nl, ni);
            g.fill(0.0);
            for &n in &bs {
                let r = self.residual(n);
                for &i in &is {
                    g.scaled_add(r * scale, &self.term_grads.slice(ndarray::s![n, i, ..]));
                }
            }
        };
        let mut mean = Array1::zeros(self.n_params());
        for code in 0..total {
            sample(code, &mut g);
            mean += &g;
        }
        mean /= total as f64;
        let mut var = 0.0;
        for code in 0..total {
            sample(code, &mut g);
            var += g.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok((mean, var / total as f64))
    }

    /// Mean over `I`, `J` draws of the doubly sampled gradient on all points:
    /// `(1/(N_r N_L²)) Σ_n (N_L/|J| Σ_J ℒ_j u − f)(N_L/|I| Σ_I ∂_θ ℒ_i u)`.
    pub fn enumerate_double(&self, ni: usize, nj: usize) -> Result<Array1<f64>> {
        let (nr, nl) = (self.n_points(), self.n_terms());
        let total = self.check_size(&[(nl, ni), (nl, nj)])?;
        let mut mean = Array1::zeros(self.n_params());
        let norm = 1.0 / (nr * nl * nl) as f64;
        for code in 0..total {
            let (is, js) = decode(code, nl, ni, nl, nj);
            for n in 0..nr {
                let lj: f64 = js.iter().map(|&j| self.term_values[[n, j]]).sum::<f64>() * nl as f64 / nj as f64;
                let r = lj - self.rhs[n];
                for &i in &is {
                    mean.scaled_add(norm * r * nl as f64 / ni as f64, &self.term_grads.slice(ndarray::s![n, i, ..]));
                }
            }
        }
        Ok(mean / total as f64)
    }
}

/// Split a tuple index into `k1` draws from `n1` and `k2` draws from `n2`.
fn decode(mut code: usize, n1: usize, k1: usize, n2: usize, k2: usize) -> (Vec<usize>, Vec<usize>) {
    let mut a = Vec::with_capacity(k1);
    for _ in 0..k1 {
        a.push(code % n1);
        code /= n1;
    }
    let mut b = Vec::with_capacity(k2);
    for _ in 0..k2 {
        b.push(code % n2);
        code /= n2;
    }
    (a, b)
}

/// Constants of `Var[g_{B,I}] = C₁/|B| + C₂/|I| + C₃/(|B||I|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl VarianceConstants {
    pub fn predict(&self, nb: usize, ni: usize) -> f64 {
        let (b, i) = (nb as f64, ni as f64);
        (self.c1 * i + self.c2 * b + self.c3) / (b * i)
    }
}

/// Solve for the constants from the `(1,1)`, `(1,2)` and `(2,1)` variances.
pub fn fit_variance_constants(v11: f64, v12: f64, v21: f64) -> VarianceConstants {
    let c3 = 3.0 * v11 - 2.0 * v21 - 2.0 * v12;
    VarianceConstants {
        c1: 2.0 * (v11 - v21) - c3,
        c2: 2.0 * (v11 - v12) - c3,
        c3,
    }
}

/// Fit on three batch configurations and predict the fourth, `(2,2)`.
pub fn variance_law_check(table: &TermTable) -> Result<(VarianceConstants, Vec<IdentityReport>)> {
    let var = |nb, ni| table.enumerate(nb, ni).map(|(_, v)| v);
    let (v11, v12, v21, v22) = (var(1, 1)?, var(1, 2)?, var(2, 1)?, var(2, 2)?);
    let c = fit_variance_constants(v11, v12, v21);
    let tuples = (table.n_points().pow(2) * table.n_terms().pow(2)) as u64;
    let report = IdentityReport::relative("variance_law_fourth_point", c.predict(2, 2), v22, tuples, 1e-10);
    Ok((c, vec![report]))
}

/// Enumerated means against the full-batch gradient, coordinatewise.
pub fn unbiasedness_check(table: &TermTable) -> Result<Vec<IdentityReport>> {
    let g = table.full_gradient();
    let scale = g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let max_diff = |m: &Array1<f64>| m.iter().zip(&g).fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs())) / scale;
    let (nr, nl) = (table.n_points() as u64, table.n_terms() as u64);
    let mut out = Vec::new();
    for (nb, ni) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
        let (mean, _) = table.enumerate(nb, ni)?;
        let tuples = nr.pow(nb as u32) * nl.pow(ni as u32);
        out.push(IdentityReport::absolute(format!("unbiased B={nb} I={ni}"), 0.0, max_diff(&mean), tuples, 1e-12));
    }
    for (ni, nj) in [(1, 1), (2, 1), (1, 2)] {
        let mean = table.enumerate_double(ni, nj)?;
        let tuples = nl.pow((ni + nj) as u32);
        out.push(IdentityReport::absolute(format!("unbiased_double I={ni} J={nj}"), 0.0, max_diff(&mean), tuples, 1e-12));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(nr: usize, nl: usize, p: usize) -> TermTable {
        TermTable {
            term_values: Array2::from_shape_fn((nr, nl), |(n, i)| ((n * 3 + i) as f64 * 0.61).sin()),
            term_grads: Array3::from_shape_fn((nr, nl, p), |(n, i, k)| ((n * 7 + i * 3 + k) as f64 * 0.37).cos()),
            rhs: Array1::from_shape_fn(nr, |n| n as f64 * 0.25 - 0.3),
        }
    }

    #[test]
    fn full_draw_of_a_single_point_and_term() {
        let t = synthetic(1, 1, 3);
        let (mean, var) = t.enumerate(1, 1).unwrap();
        assert!(var.abs() < 1e-15);
        assert!((&mean - &t.full_gradient()).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn single_term_variance_ignores_term_batch() {
        let t = synthetic(3, 1, 4);
        let (_, a) = t.enumerate(1, 1).unwrap();
        let (_, b) = t.enumerate(1, 2).unwrap();
        assert!((a - b).abs() <= 1e-14 * a.abs());
    }

    #[test]
    fn two_terms_single_draw_averages_to_full() {
        let t = synthetic(1, 2, 3);
        let (mean, _) = t.enumerate(1, 1).unwrap();
        let g = t.full_gradient();
        assert!((&mean - &g).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn law_holds_on_synthetic_table() {
        let (c, reports) = variance_law_check(&synthetic(3, 4, 5)).unwrap();
        assert!(reports[0].pass, "{}", reports[0].summary());
        assert!(c.c1 > 0.0);
        let (c, _) = variance_law_check(&synthetic(3, 4, 5).aliased()).unwrap();
        assert!(c.c2.abs() < 1e-12 * c.c1.abs());
    }

    #[test]
    fn oversized_enumeration_is_rejected() {
        assert!(synthetic(30, 30, 1).enumerate(3, 3).is_err());
    }
}
