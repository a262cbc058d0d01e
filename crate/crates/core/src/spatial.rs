//! Manufactured-solution PDE problems on the unit ball and the sampled
//! residual loss.
//!
//! The Laplacian is split into its `d` pure second derivatives. A sampled
//! operator keeps `b` of them, rescaled by `d / b`, and adds the pointwise
//! nonlinearity in full. The loss multiplies two residuals built from
//! independent index sets so that its expectation equals the exact
//! half-mean-squared residual.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{invalid, Result, SdzeError};
use crate::jets::Jet2;
use crate::ledger::{AllocationLedger, Phase};
use crate::net::{ansatz, ansatz_jets, BatchJets, MlpParams, PerturbView};
use crate::rng::{sample_index_set, RngStream, Role, StreamKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    /// Poisson: `ℒu = Δu`.
    None,
    /// `ℒu = Δu + u − u³`.
    AllenCahn,
    /// `ℒu = Δu + sin u`.
    SineGordon,
}

impl Nonlinearity {
    pub fn parse(kind: &str) -> Result<Self> {
        match kind {
            "poisson" => Ok(Self::None),
            "allen_cahn" => Ok(Self::AllenCahn),
            "sine_gordon" => Ok(Self::SineGordon),
            other => Err(SdzeError::Config(format!("unknown pde.kind `{other}`"))),
        }
    }

    #[inline]
    pub fn apply(self, u: f64) -> f64 {
        match self {
            Self::None => 0.0,
            Self::AllenCahn => u - u * u * u,
            Self::SineGordon => u.sin(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolutionKind {
    /// `(1−‖x‖²) Σ_{i<d−1} c_i exp(x_i x_{i+1})`
    TwoBody,
    /// `(1−‖x‖²) Σ_{i<d−2} c_i exp(x_i x_{i+1} x_{i+2})`
    ThreeBody,
}

impl SolutionKind {
    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "two_body" => Ok(Self::TwoBody),
            "three_body" => Ok(Self::ThreeBody),
            other => Err(SdzeError::Config(format!("unknown pde.solution `{other}`"))),
        }
    }

    fn arity(self) -> usize {
        match self {
            Self::TwoBody => 2,
            Self::ThreeBody => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Raw,
    /// Divide the loss by `N_L²`.
    DimNormalized,
}

impl Normalization {
    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "raw" => Ok(Self::Raw),
            "dim_normalized" => Ok(Self::DimNormalized),
            other => Err(SdzeError::Config(format!("unknown pde.normalization `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdeProblem {
    pub dim: usize,
    pub nonlinearity: Nonlinearity,
    pub solution: SolutionKind,
    pub coeffs: Vec<f64>,
    pub normalization: Normalization,
}

impl PdeProblem {
    /// Coefficients `c_i ~ N(0, 1)` come from the `(master, solution_coeffs, 0, 0)` stream.
    pub fn new(
        master: u64,
        dim: usize,
        nonlinearity: Nonlinearity,
        solution: SolutionKind,
        normalization: Normalization,
    ) -> Result<Self> {
        let arity = solution.arity();
        if dim < arity {
            return invalid(format!("{solution:?} solution needs dim >= {arity}, got {dim}"));
        }
        let mut coeffs = vec![0.0; dim + 1 - arity];
        StreamKey::new(master, Role::SolutionCoeffs, 0, 0)
            .stream()
            .fill_normal(&mut coeffs);
        Self::with_coeffs(dim, nonlinearity, solution, coeffs, normalization)
    }

    pub fn with_coeffs(
        dim: usize,
        nonlinearity: Nonlinearity,
        solution: SolutionKind,
        coeffs: Vec<f64>,
        normalization: Normalization,
    ) -> Result<Self> {
        let arity = solution.arity();
        if dim < arity || coeffs.len() != dim + 1 - arity {
            return invalid(format!(
                "{solution:?} in dim {dim} needs {} coefficients, got {}",
                (dim + 1).saturating_sub(arity),
                coeffs.len()
            ));
        }
        Ok(Self {
            dim,
            nonlinearity,
            solution,
            coeffs,
            normalization,
        })
    }

    /// Number of separable operator terms (one per coordinate).
    pub fn term_count(&self) -> usize {
        self.dim
    }

    pub fn kappa(&self) -> f64 {
        match self.normalization {
            Normalization::Raw => 1.0,
            Normalization::DimNormalized => (self.term_count() as f64).powi(2),
        }
    }

    fn term_arg(&self, x: &[f64], t: usize) -> f64 {
        x[t..t + self.solution.arity()].iter().product()
    }

    fn sum_terms(&self, x: &[f64]) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(t, c)| c * self.term_arg(x, t).exp())
            .sum()
    }

    pub fn exact_solution(&self, x: &[f64]) -> f64 {
        let phi = 1.0 - x.iter().map(|v| v * v).sum::<f64>();
        phi * self.sum_terms(x)
    }

    /// Jet of `u_exact` along coordinate `i`, given the precomputed term sum
    /// and boundary factor. Only the terms that involve `x_i` carry tangents.
    fn exact_jet_along(&self, x: &[f64], i: usize, sum: f64, phi: f64) -> Jet2 {
        let arity = self.solution.arity();
        let first = i.saturating_sub(arity - 1);
        let last = i.min(self.coeffs.len() - 1);
        let mut s = Jet2::constant(sum);
        for t in first..=last {
            let mut arg = Jet2::constant(1.0);
            for (k, &xv) in x.iter().enumerate().skip(t).take(arity) {
                arg = arg * if k == i { Jet2::variable(xv) } else { Jet2::constant(xv) };
            }
            let term = arg.exp().scale(self.coeffs[t]);
            s.d1 += term.d1;
            s.d2 += term.d2;
        }
        Jet2::new(phi, -2.0 * x[i], -2.0) * s
    }

    /// Coordinate jets of the exact solution at `x`, one per entry of `dims`.
    pub fn exact_jets(&self, x: &[f64], dims: &[usize]) -> Vec<Jet2> {
        let sum = self.sum_terms(x);
        let phi = 1.0 - x.iter().map(|v| v * v).sum::<f64>();
        dims.iter().map(|&i| self.exact_jet_along(x, i, sum, phi)).collect()
    }

    /// `f(x) = Δu_exact(x) + N(u_exact(x))`, in `O(d)`.
    pub fn rhs(&self, x: &[f64]) -> f64 {
        let sum = self.sum_terms(x);
        let phi = 1.0 - x.iter().map(|v| v * v).sum::<f64>();
        let lap: f64 = (0..self.dim).map(|i| self.exact_jet_along(x, i, sum, phi).d2).sum();
        lap + self.nonlinearity.apply(phi * sum)
    }
}

/// Anything whose coordinate jets can be evaluated on a batch of points.
pub trait JetField {
    fn jets(&self, x: ArrayView2<f64>, dims: &[usize], ledger: &AllocationLedger) -> Result<BatchJets>;
}

impl JetField for PerturbView<'_> {
    fn jets(&self, x: ArrayView2<f64>, dims: &[usize], ledger: &AllocationLedger) -> Result<BatchJets> {
        ansatz_jets(self, x, dims, ledger)
    }
}

/// The closed-form solution seen through the same jet interface as the network.
#[derive(Debug, Clone, Copy)]
pub struct ExactField<'a>(pub &'a PdeProblem);

impl JetField for ExactField<'_> {
    fn jets(&self, x: ArrayView2<f64>, dims: &[usize], _ledger: &AllocationLedger) -> Result<BatchJets> {
        let (npts, b) = (x.nrows(), dims.len());
        let mut out = BatchJets {
            value: ndarray::Array1::zeros(npts),
            d1: Array2::zeros((npts, b)),
            d2: Array2::zeros((npts, b)),
        };
        for (p, row) in x.axis_iter(Axis(0)).enumerate() {
            let xs = row.to_vec();
            out.value[p] = self.0.exact_solution(&xs);
            for (j, jet) in self.0.exact_jets(&xs, dims).into_iter().enumerate() {
                out.d1[[p, j]] = jet.d1;
                out.d2[[p, j]] = jet.d2;
            }
        }
        Ok(out)
    }
}

/// `x = ρ g/‖g‖` with `g` standard normal in ℝ^d and `ρ = U^{1/d}`.
pub fn sample_unit_ball(stream: &mut RngStream, npts: usize, d: usize) -> Result<Array2<f64>> {
    if npts == 0 || d == 0 {
        return invalid(format!("unit-ball sample needs B, d >= 1 (got {npts}, {d})"));
    }
    let mut out = Array2::zeros((npts, d));
    let mut g = vec![0.0; d];
    for mut row in out.axis_iter_mut(Axis(0)) {
        let norm = loop {
            stream.fill_normal(&mut g);
            let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                break n;
            }
        };
        let rho = stream.next_f64().powf(1.0 / d as f64);
        row.iter_mut().zip(&g).for_each(|(o, gi)| *o = rho * gi / norm);
    }
    Ok(out)
}

fn check_dims(dims: &[usize], d: usize) -> Result<()> {
    if dims.is_empty() {
        return invalid("operator index set is empty");
    }
    if let Some(&bad) = dims.iter().find(|&&i| i >= d) {
        return invalid(format!("operator index {bad} out of range for dimension {d}"));
    }
    Ok(())
}

/// `(N_L/|I|) Σ_{i∈I} ∂²u/∂x_i²(x) + N(u(x))`.
pub fn sampled_operator<F: JetField>(field: &F, problem: &PdeProblem, x: &[f64], dims: &[usize]) -> Result<f64> {
    check_dims(dims, problem.dim)?;
    let pts = ArrayView2::from_shape((1, x.len()), x).expect("1 x d");
    let jets = field.jets(pts, dims, &AllocationLedger::new())?;
    let scale = problem.term_count() as f64 / dims.len() as f64;
    Ok(scale * jets.d2.row(0).sum() + problem.nonlinearity.apply(jets.value[0]))
}

/// One draw of the spatial randomness for a loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialSample {
    pub step: u64,
    pub index: u64,
    pub collocation: StreamKey,
    pub batch: usize,
    pub dims1: Vec<usize>,
    pub dims2: Vec<usize>,
}

impl SpatialSample {
    /// Draw from `(master, role, step, index)` keys. Index sets are sorted.
    /// With `alt` they come from the independent `dim_set_*_alt` roles; the
    /// collocation key is the same either way.
    pub fn draw(master: u64, step: u64, index: u64, dim: usize, batch: usize, b: usize, alt: bool) -> Result<Self> {
        if batch == 0 {
            return invalid("collocation batch must be >= 1");
        }
        let (r1, r2) = if alt {
            (Role::DimSet1Alt, Role::DimSet2Alt)
        } else {
            (Role::DimSet1, Role::DimSet2)
        };
        let draw_set = |role| -> Result<Vec<usize>> {
            let mut set = sample_index_set(&mut StreamKey::new(master, role, step, index).stream(), dim, b, false)?;
            set.sort_unstable();
            Ok(set)
        };
        let (dims1, dims2) = (draw_set(r1)?, draw_set(r2)?);
        Ok(Self {
            step,
            index,
            collocation: StreamKey::new(master, Role::Collocation, step, index),
            batch,
            dims1,
            dims2,
        })
    }

    /// Same points, explicit index sets.
    pub fn with_dims(collocation: StreamKey, batch: usize, dims1: Vec<usize>, dims2: Vec<usize>) -> Self {
        Self {
            step: collocation.step,
            index: collocation.index,
            collocation,
            batch,
            dims1,
            dims2,
        }
    }

    pub fn points(&self, dim: usize) -> Result<Array2<f64>> {
        sample_unit_ball(&mut self.collocation.stream(), self.batch, dim)
    }

    pub fn replay_keys(&self) -> String {
        format!("collocation={}, step={}, index={}", self.collocation, self.step, self.index)
    }
}

fn union_positions(d1: &[usize], d2: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut dims: Vec<usize> = d1.iter().chain(d2).copied().collect();
    dims.sort_unstable();
    dims.dedup();
    let pos = |set: &[usize]| set.iter().map(|i| dims.binary_search(i).expect("in union")).collect();
    let (p1, p2) = (pos(d1), pos(d2));
    (dims, p1, p2)
}

/// Sampled loss on explicit points:
/// `(1/(2Bκ)) Σ_n (ℒ̃_{I₁}u(x_n) − f(x_n)) (ℒ̃_{I₂}u(x_n) − f(x_n))`.
pub fn stochastic_loss_at<F: JetField>(
    field: &F,
    problem: &PdeProblem,
    points: ArrayView2<f64>,
    dims1: &[usize],
    dims2: &[usize],
    ledger: &AllocationLedger,
) -> Result<f64> {
    check_dims(dims1, problem.dim)?;
    check_dims(dims2, problem.dim)?;
    let (dims, p1, p2) = union_positions(dims1, dims2);
    let jets = field.jets(points, &dims, ledger)?;
    let nl = problem.term_count() as f64;
    let (s1, s2) = (nl / dims1.len() as f64, nl / dims2.len() as f64);
    let mut acc = 0.0;
    let mut xs = vec![0.0; problem.dim];
    for (p, row) in points.axis_iter(Axis(0)).enumerate() {
        xs.iter_mut().zip(row).for_each(|(a, b)| *a = *b);
        let f = problem.rhs(&xs);
        let nonlin = problem.nonlinearity.apply(jets.value[p]);
        let lap1: f64 = p1.iter().map(|&j| jets.d2[[p, j]]).sum();
        let lap2: f64 = p2.iter().map(|&j| jets.d2[[p, j]]).sum();
        acc += (s1 * lap1 + nonlin - f) * (s2 * lap2 + nonlin - f);
    }
    Ok(acc / (2.0 * points.nrows() as f64 * problem.kappa()))
}

pub fn stochastic_loss<F: JetField>(
    field: &F,
    problem: &PdeProblem,
    sample: &SpatialSample,
    ledger: &AllocationLedger,
) -> Result<f64> {
    let points = sample.points(problem.dim)?;
    ledger.set_phase(Phase::Jets);
    let _charge = ledger.charge(points.len());
    stochastic_loss_at(field, problem, points.view(), &sample.dims1, &sample.dims2, ledger)
}

/// Plain mean squared residual `(1/N) Σ (ℒu(x_n) − f(x_n))²` over all terms.
pub fn residual_loss<F: JetField>(field: &F, problem: &PdeProblem, points: ArrayView2<f64>) -> Result<f64> {
    let all: Vec<usize> = (0..problem.dim).collect();
    let jets = field.jets(points, &all, &AllocationLedger::new())?;
    let mut acc = 0.0;
    for (p, row) in points.axis_iter(Axis(0)).enumerate() {
        let r = jets.d2.row(p).sum() + problem.nonlinearity.apply(jets.value[p]) - problem.rhs(&row.to_vec());
        acc += r * r;
    }
    Ok(acc / points.nrows() as f64)
}

/// `√(Σ(u−u*)² / Σ u*²)` given predicted and exact values.
pub fn relative_l2_of(pred: &[f64], exact: &[f64]) -> Result<f64> {
    let den: f64 = exact.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(SdzeError::DegenerateMetric("exact solution is zero on every test point".into()));
    }
    let num: f64 = pred.iter().zip(exact).map(|(p, e)| (p - e).powi(2)).sum();
    Ok((num / den).sqrt())
}

/// Relative L2 error of the unperturbed ansatz on `n_test` ball points
/// regenerated from `test_key`.
pub fn relative_l2(params: &MlpParams, problem: &PdeProblem, test_key: StreamKey, n_test: usize) -> Result<f64> {
    let pts = sample_unit_ball(&mut test_key.stream(), n_test, problem.dim)?;
    let pred = ansatz(&PerturbView::plain(params), pts.view(), &AllocationLedger::new())?;
    let exact: Vec<f64> = pts.axis_iter(Axis(0)).map(|r| problem.exact_solution(&r.to_vec())).collect();
    relative_l2_of(pred.as_slice().expect("contiguous"), &exact)
}

/// Mergeable running mean/variance (Welford / Chan et al.).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningMoments {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl RunningMoments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &RunningMoments) {
        if other.count == 0 {
            return;
        }
        let n = self.count + other.count;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.count as f64 * other.count as f64) / n as f64;
        self.count = n;
    }

    /// Unbiased sample variance (zero with fewer than two samples).
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }
}

impl FromIterator<f64> for RunningMoments {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = RunningMoments::default();
        iter.into_iter().for_each(|x| m.push(x));
        m
    }
}

/// Spread of the sampled loss and of the directional-derivative estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NoiseDiagnostics {
    pub loss: RunningMoments,
    pub delta_hat: RunningMoments,
}

impl NoiseDiagnostics {
    pub fn merge(&mut self, other: &NoiseDiagnostics) {
        self.loss.merge(&other.loss);
        self.delta_hat.merge(&other.delta_hat);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_body(d: usize, coeffs: Vec<f64>) -> PdeProblem {
        PdeProblem::with_coeffs(d, Nonlinearity::None, SolutionKind::TwoBody, coeffs, Normalization::Raw).unwrap()
    }

    #[test]
    fn exact_solution_at_origin_is_coefficient_sum() {
        let p = PdeProblem::new(3, 6, Nonlinearity::None, SolutionKind::ThreeBody, Normalization::Raw).unwrap();
        let s: f64 = p.coeffs.iter().sum();
        assert!((p.exact_solution(&[0.0; 6]) - s).abs() < 1e-15);
    }

    #[test]
    fn exact_solution_vanishes_on_sphere() {
        let p = PdeProblem::new(3, 4, Nonlinearity::None, SolutionKind::TwoBody, Normalization::Raw).unwrap();
        assert_eq!(p.exact_solution(&[0.5, 0.5, 0.5, 0.5]), 0.0);
    }

    #[test]
    fn hand_evaluated_two_body() {
        let p = two_body(2, vec![1.0]);
        let v = p.exact_solution(&[0.5, 0.5]);
        assert!((v - 0.5 * 0.25f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn laplacian_at_origin_two_dims() {
        let c = 1.7;
        let p = two_body(2, vec![c]);
        assert!((p.rhs(&[0.0, 0.0]) - (-4.0 * c)).abs() < 1e-14);
    }

    #[test]
    fn degenerate_dims_rejected() {
        assert!(PdeProblem::new(1, 1, Nonlinearity::None, SolutionKind::TwoBody, Normalization::Raw).is_err());
        assert!(PdeProblem::new(1, 2, Nonlinearity::None, SolutionKind::ThreeBody, Normalization::Raw).is_err());
    }

    #[test]
    fn tags_parse() {
        assert_eq!(Nonlinearity::parse("allen_cahn").unwrap(), Nonlinearity::AllenCahn);
        assert!(Nonlinearity::parse("heat").is_err());
        assert!(SolutionKind::parse("four_body").is_err());
        assert_eq!(Normalization::parse("dim_normalized").unwrap(), Normalization::DimNormalized);
    }

    #[test]
    fn nonlinearities() {
        assert_eq!(Nonlinearity::AllenCahn.apply(2.0), -6.0);
        assert_eq!(Nonlinearity::SineGordon.apply(0.0), 0.0);
        assert_eq!(Nonlinearity::None.apply(3.0), 0.0);
    }

    #[test]
    fn ball_points_stay_inside() {
        let pts = sample_unit_ball(&mut StreamKey::new(1, Role::Collocation, 0, 0).stream(), 500, 7).unwrap();
        for row in pts.axis_iter(Axis(0)) {
            assert!(row.dot(&row) <= 1.0 + 1e-15);
        }
        assert!(sample_unit_ball(&mut StreamKey::new(1, Role::Collocation, 0, 0).stream(), 0, 7).is_err());
    }

    #[test]
    fn relative_l2_hand_cases() {
        assert!((relative_l2_of(&[2.0, 1.0], &[1.0, 1.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(relative_l2_of(&[0.0, 0.0], &[1.0, -3.0]).unwrap(), 1.0);
        assert_eq!(relative_l2_of(&[1.0, -3.0], &[1.0, -3.0]).unwrap(), 0.0);
        assert!(matches!(relative_l2_of(&[1.0], &[0.0]), Err(SdzeError::DegenerateMetric(_))));
    }

    #[test]
    fn empty_index_set_is_rejected() {
        let p = two_body(3, vec![1.0, 1.0]);
        assert!(sampled_operator(&ExactField(&p), &p, &[0.1, 0.2, 0.3], &[]).is_err());
    }

    #[test]
    fn sample_regenerates_bitwise() {
        let a = SpatialSample::draw(9, 4, 0, 20, 8, 3, false).unwrap();
        let b = SpatialSample::draw(9, 4, 0, 20, 8, 3, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.points(20).unwrap(), b.points(20).unwrap());
        let alt = SpatialSample::draw(9, 4, 0, 20, 8, 3, true).unwrap();
        assert_eq!(alt.collocation, a.collocation);
        assert_ne!((alt.dims1.clone(), alt.dims2.clone()), (a.dims1.clone(), a.dims2.clone()));
    }

    #[test]
    fn moments_merge_matches_sequential() {
        let xs: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let all: RunningMoments = xs.iter().copied().collect();
        let mut a: RunningMoments = xs[..20].iter().copied().collect();
        let b: RunningMoments = xs[20..].iter().copied().collect();
        a.merge(&b);
        assert!((a.mean - all.mean).abs() < 1e-14);
        assert!((a.variance() - all.variance()).abs() < 1e-14);
        assert!(a.variance() >= 0.0);
    }
}
