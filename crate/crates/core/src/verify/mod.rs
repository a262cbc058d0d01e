//! Numerical checks of the estimator's stated properties, and the
//! brute-force oracles they compare against.
//!
//! The oracles here share no kernels with the training path: explicit
//! perturbations are materialized with plain loops, gradients come from
//! central differences, and expectations over index sets are computed by
//! enumerating every draw.

use serde::Serialize;

use crate::error::{Result, SdzeError};

mod checks;
mod crns;
mod enumeration;
pub mod oracle;
mod quadratic;

pub use checks::{implicit_equivalence_check, jets_fd_check, manufactured_residual_check, orthogonality_check};
pub use crns::{crns_variance_sweep, delta_hat_moments, log_log_slope, CrnsRow, CrnsSweep};
pub use enumeration::{fit_variance_constants, unbiasedness_check, variance_law_check, TermTable, VarianceConstants};
pub use quadratic::{mean_bias_check, quadratic_identity_check, SmoothLoss};

/// One checked quantity. `pass` holds iff `deviation <= tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityReport {
    pub quantity: String,
    pub theoretical: f64,
    pub empirical: f64,
    pub samples: u64,
    pub deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl IdentityReport {
    fn build(quantity: impl Into<String>, theoretical: f64, empirical: f64, samples: u64, deviation: f64, tolerance: f64) -> Self {
        Self {
            quantity: quantity.into(),
            theoretical,
            empirical,
            samples,
            deviation,
            tolerance,
            pass: deviation <= tolerance,
        }
    }

    /// `|empirical − theoretical| / |theoretical|`.
    pub fn relative(quantity: impl Into<String>, theoretical: f64, empirical: f64, samples: u64, tolerance: f64) -> Self {
        let dev = (empirical - theoretical).abs() / theoretical.abs();
        Self::build(quantity, theoretical, empirical, samples, dev, tolerance)
    }

    /// `|empirical − theoretical|`.
    pub fn absolute(quantity: impl Into<String>, theoretical: f64, empirical: f64, samples: u64, tolerance: f64) -> Self {
        let dev = (empirical - theoretical).abs();
        Self::build(quantity, theoretical, empirical, samples, dev, tolerance)
    }

    /// Passes iff `empirical ∈ [lo, hi]`; reported against the midpoint.
    pub fn bounded(quantity: impl Into<String>, lo: f64, hi: f64, empirical: f64, samples: u64) -> Self {
        let mid = 0.5 * (lo + hi);
        Self::build(quantity, mid, empirical, samples, (empirical - mid).abs(), 0.5 * (hi - lo))
    }

    /// Passes iff `empirical <= bound`.
    pub fn at_most(quantity: impl Into<String>, bound: f64, empirical: f64, samples: u64) -> Self {
        Self::build(quantity, bound, empirical, samples, (empirical - bound).max(0.0), 0.0)
    }

    /// Passes iff `empirical >= bound`.
    pub fn at_least(quantity: impl Into<String>, bound: f64, empirical: f64, samples: u64) -> Self {
        Self::build(quantity, bound, empirical, samples, (bound - empirical).max(0.0), 0.0)
    }

    pub fn summary(&self) -> String {
        format!(
            "{} {}: empirical {:.6e} vs {:.6e} (deviation {:.3e}, tolerance {:.3e}, n={})",
            if self.pass { "PASS" } else { "FAIL" },
            self.quantity,
            self.empirical,
            self.theoretical,
            self.deviation,
            self.tolerance,
            self.samples
        )
    }
}

/// Central-difference gradient with step `h`.
pub fn brute_force_gradient<F>(mut loss: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(SdzeError::InvalidArgument(format!("finite-difference step must be > 0, got {h}")));
    }
    if theta.len() > 10_000 {
        return Err(SdzeError::InvalidArgument(format!(
            "brute-force gradient over {} parameters is too large",
            theta.len()
        )));
    }
    let mut th = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        th[i] = theta[i] + h;
        let up = loss(&th)?;
        th[i] = theta[i] - h;
        let down = loss(&th)?;
        th[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(SdzeError::InvalidArgument(format!("non-finite loss at coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_squared_norm() {
        let g = brute_force_gradient(|t| Ok(t.iter().map(|v| v * v).sum()), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn gradient_of_product() {
        let g = brute_force_gradient(|t| Ok(t[0] * t[1]), &[3.0, -0.5], 1e-5).unwrap();
        assert!((g[0] + 0.5).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn non_finite_names_the_coordinate() {
        let err = brute_force_gradient(|t| Ok(if t[1] > 1.0 { f64::NAN } else { 0.0 }), &[0.0, 1.0], 1e-3).unwrap_err();
        assert!(err.to_string().contains("coordinate 1"));
    }

    #[test]
    fn report_pass_flags() {
        assert!(IdentityReport::relative("q", 6.0, 6.2, 1, 0.05).pass);
        assert!(!IdentityReport::relative("q", 6.0, 6.4, 1, 0.05).pass);
        assert!(IdentityReport::bounded("s", -2.2, -1.8, -2.0, 1).pass);
        assert!(!IdentityReport::bounded("s", -2.2, -1.8, -1.7, 1).pass);
        assert!(IdentityReport::at_most("b", 1.0, 0.5, 1).pass);
        assert!(!IdentityReport::at_most("b", 1.0, 1.5, 1).pass);
        assert!(IdentityReport::at_least("c", 1e4, 2e4, 1).pass);
        assert!(!IdentityReport::at_least("c", 1e4, 9e3, 1).pass);
    }
}
