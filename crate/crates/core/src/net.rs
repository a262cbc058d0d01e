//! The ansatz network and its three forward modes.
//!
//! Weights follow the input-times-weight convention: a batch of row
//! vectors `H` (`B × m`) maps to `H · W` (`m × n`). Hidden layers apply the
//! activation; the last layer is linear with a single output column.
//!
//! A [`PerturbView`] evaluates the network at `θ ± ε·Δθ` where each layer's
//! `ΔW = T⁻¹(U Z Vᵀ)` enters only through [`LayerSubspace::contract`], so no
//! `m × n` perturbation is ever allocated.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{invalid, Result};
use crate::jets::{Activation, Jet2};
use crate::ledger::{AllocationLedger, Charge, Phase};
use crate::rng::{gaussian_matrix, Role, StreamKey};
use crate::subspace::LayerSubspace;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Array2<f64>>,
    pub activation: Activation,
    /// When set, the last row of every layer is a bias applied to a
    /// constant-one input, so a layer with `m` inputs has `m + 1` rows.
    pub biased: bool,
}

impl MlpParams {
    pub fn new(layers: Vec<Array2<f64>>, activation: Activation) -> Result<Self> {
        Self::from_layers(layers, activation, false)
    }

    pub fn from_layers(layers: Vec<Array2<f64>>, activation: Activation, biased: bool) -> Result<Self> {
        if layers.is_empty() {
            return invalid("network needs at least one layer");
        }
        let extra = usize::from(biased);
        if layers[0].nrows() <= extra {
            return invalid("first layer has no input rows");
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].ncols() + extra != pair[1].nrows() {
                return invalid(format!(
                    "layer {l} outputs {} columns but layer {} takes {} rows",
                    pair[0].ncols(),
                    l + 1,
                    pair[1].nrows()
                ));
            }
        }
        if layers.last().map(|w| w.ncols()) != Some(1) {
            return invalid("output layer must have exactly one column");
        }
        Ok(Self {
            layers,
            activation,
            biased,
        })
    }

    /// Widths `d → hidden[0] → … → 1`, weights `N(0, 1/fan_in)` drawn from
    /// the `(master, net_init, 0, layer)` streams. Bias rows count towards
    /// the fan-in.
    pub fn init(master: u64, input_dim: usize, hidden: &[usize], activation: Activation, biased: bool) -> Result<Self> {
        if input_dim == 0 || hidden.contains(&0) {
            return invalid("layer widths must be positive");
        }
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let mut s = StreamKey::new(master, Role::NetInit, 0, l as u64).stream();
                let fan_in = w[0] + usize::from(biased);
                let std = (1.0 / fan_in as f64).sqrt();
                gaussian_matrix(&mut s, fan_in, w[1]).map(|g| g * std)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers, activation, biased)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].nrows() - usize::from(self.biased)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|w| w.len()).sum()
    }

    pub fn max_width(&self) -> usize {
        self.layers.iter().map(|w| w.nrows().max(w.ncols())).max().unwrap_or(0)
    }

    /// All weights as one vector: layer by layer, each layer column-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for w in &self.layers {
            out.extend(w.t().iter().copied());
        }
        out
    }

    /// Inverse of [`MlpParams::flatten`].
    pub fn set_flat(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_count() {
            return invalid(format!("expected {} parameters, got {}", self.param_count(), theta.len()));
        }
        let mut off = 0;
        for w in &mut self.layers {
            let (m, n) = w.dim();
            for j in 0..n {
                for i in 0..m {
                    w[[i, j]] = theta[off + j * m + i];
                }
            }
            off += m * n;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
    Zero,
}

impl Sign {
    pub fn factor(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
            Sign::Zero => 0.0,
        }
    }
}

/// Read-only view of the network at `θ + sign·ε·Δθ`.
#[derive(Debug, Clone, Copy)]
pub struct PerturbView<'a> {
    pub params: &'a MlpParams,
    pub subspaces: &'a [LayerSubspace],
    pub cores: &'a [Array2<f64>],
    pub sign: Sign,
    pub eps: f64,
}

impl<'a> PerturbView<'a> {
    pub fn plain(params: &'a MlpParams) -> Self {
        Self {
            params,
            subspaces: &[],
            cores: &[],
            sign: Sign::Zero,
            eps: 0.0,
        }
    }

    pub fn new(
        params: &'a MlpParams,
        subspaces: &'a [LayerSubspace],
        cores: &'a [Array2<f64>],
        sign: Sign,
        eps: f64,
    ) -> Result<Self> {
        if sign != Sign::Zero {
            if !(eps > 0.0) {
                return invalid(format!("eps must be > 0, got {eps}"));
            }
            if subspaces.len() != params.depth() || cores.len() != params.depth() {
                return invalid(format!(
                    "need one subspace and core per layer ({}), got {} and {}",
                    params.depth(),
                    subspaces.len(),
                    cores.len()
                ));
            }
            for (l, (sub, w)) in subspaces.iter().zip(&params.layers).enumerate() {
                if sub.plan.orig != w.dim() {
                    return invalid(format!("subspace {l} planned for {:?}, layer is {:?}", sub.plan.orig, w.dim()));
                }
            }
        }
        Ok(Self {
            params,
            subspaces,
            cores,
            sign,
            eps,
        })
    }

    pub fn with_sign(&self, sign: Sign) -> Self {
        Self { sign, ..*self }
    }

    fn scale(&self) -> f64 {
        self.sign.factor() * self.eps
    }

    fn perturbed(&self) -> bool {
        self.sign != Sign::Zero
    }

    /// `H · (W_l + sign·ε·ΔW_l)`; the perturbation branch is skipped when
    /// unsigned. `with_bias` adds the bias row (primal planes only).
    fn linear(&self, l: usize, h: ArrayView2<f64>, with_bias: bool, ledger: &AllocationLedger) -> Result<Array2<f64>> {
        let w = &self.params.layers[l];
        let m = h.ncols();
        let mut z = h.dot(&w.slice(s![..m, ..]));
        if self.perturbed() {
            self.subspaces[l].contract_into(h, &self.cores[l], self.scale(), z.view_mut(), ledger)?;
        }
        if with_bias && self.params.biased {
            let mut bias = w.row(m).to_owned();
            if self.perturbed() {
                let delta = self.subspaces[l].delta_row(m, &self.cores[l])?;
                bias.iter_mut().zip(delta).for_each(|(b, dv)| *b += self.scale() * dv);
            }
            z += &bias;
        }
        Ok(z)
    }
}

fn check_batch(params: &MlpParams, x: ArrayView2<f64>) -> Result<()> {
    if x.ncols() != params.input_dim() {
        return invalid(format!("points have {} coordinates, network expects {}", x.ncols(), params.input_dim()));
    }
    Ok(())
}

/// Raw network output (before the boundary factor), one value per row of `x`.
pub fn forward(view: &PerturbView, x: ArrayView2<f64>, ledger: &AllocationLedger) -> Result<Array1<f64>> {
    check_batch(view.params, x)?;
    ledger.set_phase(Phase::Forward);
    let depth = view.params.depth();
    let act = view.params.activation;
    let mut h: Option<(Array2<f64>, Charge)> = None;
    for l in 0..depth {
        let input = h.as_ref().map(|(a, _)| a.view()).unwrap_or(x);
        let charge = ledger.charge(input.nrows() * view.params.layers[l].ncols());
        let mut z = view.linear(l, input, true, ledger)?;
        ledger.count_primal_layer();
        if l + 1 < depth {
            z.mapv_inplace(|u| act.value(u));
        }
        h = Some((z, charge));
    }
    let (out, _c) = h.expect("at least one layer");
    Ok(out.column(0).to_owned())
}

fn boundary_factor(x: ndarray::ArrayView1<f64>) -> f64 {
    1.0 - x.dot(&x)
}

/// `u_θ(x) = (1 − ‖x‖²) · net(x)`, which vanishes on the unit sphere.
pub fn ansatz(view: &PerturbView, x: ArrayView2<f64>, ledger: &AllocationLedger) -> Result<Array1<f64>> {
    let mut g = forward(view, x, ledger)?;
    for (gi, row) in g.iter_mut().zip(x.axis_iter(Axis(0))) {
        *gi *= boundary_factor(row);
    }
    Ok(g)
}

/// Value and per-direction derivatives for a batch of points.
///
/// `d1[[p, j]]` and `d2[[p, j]]` are the first and second derivatives at
/// point `p` along coordinate `dims[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchJets {
    pub value: Array1<f64>,
    pub d1: Array2<f64>,
    pub d2: Array2<f64>,
}

impl BatchJets {
    pub fn jet(&self, p: usize, j: usize) -> Jet2 {
        Jet2::new(self.value[p], self.d1[[p, j]], self.d2[[p, j]])
    }
}

/// Coordinate-direction jets of the raw network.
///
/// Tangent planes use the shared-primal layout: row `p·b + j` holds point
/// `p`, direction `j`, and every layer evaluates its primal block once for
/// all directions. The first layer's tangent is a row gather of
/// `W₁ ± ε·ΔW₁` since the seed directions are unit vectors.
pub fn raw_jets(
    view: &PerturbView,
    x: ArrayView2<f64>,
    dims: &[usize],
    ledger: &AllocationLedger,
) -> Result<BatchJets> {
    check_batch(view.params, x)?;
    let d = view.params.input_dim();
    if let Some(&bad) = dims.iter().find(|&&i| i >= d) {
        return invalid(format!("direction {bad} out of range for dimension {d}"));
    }
    ledger.set_phase(Phase::Jets);
    let params = view.params;
    let act = params.activation;
    let depth = params.depth();
    let (npts, b) = (x.nrows(), dims.len());

    // first layer
    let w0 = &params.layers[0];
    let n0 = w0.ncols();
    let mut primal_charge = ledger.charge(npts * n0);
    let mut primal = view.linear(0, x, true, ledger)?;
    ledger.count_primal_layer();
    let mut seed_rows = Array2::zeros((b, n0));
    let _seed_charge = ledger.charge(b * n0);
    for (j, &i) in dims.iter().enumerate() {
        let mut row = seed_rows.row_mut(j);
        row.assign(&w0.row(i));
        if view.perturbed() {
            let delta = view.subspaces[0].delta_row(i, &view.cores[0])?;
            row.iter_mut().zip(delta).for_each(|(r, dv)| *r += view.scale() * dv);
        }
    }
    let mut tangent_charge = ledger.charge(2 * npts * b * n0);
    let mut t1 = Array2::zeros((npts * b, n0));
    let mut t2 = Array2::zeros((npts * b, n0));
    if depth == 1 {
        for p in 0..npts {
            for j in 0..b {
                t1.row_mut(p * b + j).assign(&seed_rows.row(j));
            }
        }
    } else {
        activate_shared(act, &mut primal, &mut t1, &mut t2, Some(&seed_rows), b);
    }

    for l in 1..depth {
        let n = params.layers[l].ncols();
        let new_primal_charge = ledger.charge(npts * n);
        let mut z = view.linear(l, primal.view(), true, ledger)?;
        ledger.count_primal_layer();
        let new_tangent_charge = ledger.charge(2 * npts * b * n);
        let mut z1 = view.linear(l, t1.view(), false, ledger)?;
        let mut z2 = view.linear(l, t2.view(), false, ledger)?;
        if l + 1 < depth {
            activate_shared(act, &mut z, &mut z1, &mut z2, None, b);
        }
        primal = z;
        t1 = z1;
        t2 = z2;
        primal_charge = new_primal_charge;
        tangent_charge = new_tangent_charge;
    }
    drop((primal_charge, tangent_charge));

    let value = primal.column(0).to_owned();
    let d1 = t1.into_shape_with_order((npts, b)).expect("rows are p*b+j");
    let d2 = t2.into_shape_with_order((npts, b)).expect("rows are p*b+j");
    Ok(BatchJets { value, d1, d2 })
}

/// Apply the activation in place to a primal block and its shared tangents.
/// With `seed` set, the incoming first-order tangent of direction `j` is
/// `seed[j]` for every point and the incoming second-order tangent is zero.
fn activate_shared(
    act: Activation,
    primal: &mut Array2<f64>,
    t1: &mut Array2<f64>,
    t2: &mut Array2<f64>,
    seed: Option<&Array2<f64>>,
    b: usize,
) {
    let width = primal.ncols();
    let mut ds = vec![0.0; width];
    let mut d2s = vec![0.0; width];
    for (p, mut prow) in primal.axis_iter_mut(Axis(0)).enumerate() {
        for (c, u) in prow.iter_mut().enumerate() {
            let (s, d, dd) = act.eval3(*u);
            *u = s;
            ds[c] = d;
            d2s[c] = dd;
        }
        for j in 0..b {
            let row = p * b + j;
            let mut r1 = t1.row_mut(row);
            let mut r2 = t2.row_mut(row);
            match seed {
                Some(seed) => {
                    Zip::from(&mut r1).and(&mut r2).and(seed.row(j)).and(&ds).and(&d2s).for_each(
                        |a, bb, &t, &d, &dd| {
                            *a = d * t;
                            *bb = dd * t * t;
                        },
                    );
                }
                None => {
                    Zip::from(&mut r1).and(&mut r2).and(&ds).and(&d2s).for_each(|a, bb, &d, &dd| {
                        let t = *a;
                        *bb = dd * t * t + d * *bb;
                        *a = d * t;
                    });
                }
            }
        }
    }
}

/// Jets of the ansatz `u = φ·g` with `φ = 1 − ‖x‖²`, via
/// `∂ᵢu = φ g'ᵢ + φ'ᵢ g` and `∂ᵢ²u = φ g''ᵢ + 2 φ'ᵢ g'ᵢ + φ''ᵢᵢ g`,
/// `φ'ᵢ = −2xᵢ`, `φ''ᵢᵢ = −2`.
pub fn ansatz_jets(
    view: &PerturbView,
    x: ArrayView2<f64>,
    dims: &[usize],
    ledger: &AllocationLedger,
) -> Result<BatchJets> {
    let raw = raw_jets(view, x, dims, ledger)?;
    let mut out = raw.clone();
    for (p, row) in x.axis_iter(Axis(0)).enumerate() {
        let phi = boundary_factor(row);
        let g = raw.value[p];
        out.value[p] = phi * g;
        for (j, &i) in dims.iter().enumerate() {
            let dphi = -2.0 * row[i];
            let (g1, g2) = (raw.d1[[p, j]], raw.d2[[p, j]]);
            out.d1[[p, j]] = phi * g1 + dphi * g;
            out.d2[[p, j]] = phi * g2 + 2.0 * dphi * g1 - 2.0 * g;
        }
    }
    Ok(out)
}

/// Ansatz jets at a single point, one per requested coordinate.
pub fn jet_forward(view: &PerturbView, x: &[f64], dims: &[usize]) -> Result<Vec<Jet2>> {
    let pts = ndarray::ArrayView2::from_shape((1, x.len()), x).expect("1 x d");
    let jets = ansatz_jets(view, pts, dims, &AllocationLedger::new())?;
    Ok((0..dims.len()).map(|j| jets.jet(0, j)).collect())
}

/// Largest singular value by power iteration on `WᵀW`.
pub fn spectral_norm(w: &Array2<f64>) -> f64 {
    let n = w.ncols();
    if n == 1 || w.nrows() == 1 {
        return w.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    let gram = w.t().dot(w);
    let mut v = Array1::from_shape_fn(n, |i| 1.0 + 0.01 * i as f64);
    let mut lambda = 0.0;
    for _ in 0..1000 {
        let next = gram.dot(&v);
        let norm = next.dot(&next).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let new_lambda = v.dot(&next) / v.dot(&v);
        v = next / norm;
        if (new_lambda - lambda).abs() <= 1e-14 * new_lambda.abs() {
            lambda = new_lambda;
            break;
        }
        lambda = new_lambda;
    }
    lambda.max(0.0).sqrt()
}

/// Observed size of the order-`n` input derivatives of the raw network at
/// `x` (norm over all coordinate directions of the pure `n`-th
/// derivatives), and the bound
/// `(n−1)!·dⁿ⁻¹·(L−1)ⁿ⁻¹·M(L)·∏_{l<L} M(l)ⁿ` with `M(l) = max(‖W_l‖₂, 1)`.
pub fn derivative_bound_monitor(params: &MlpParams, x: &[f64], order: usize) -> Result<(f64, f64)> {
    if !(1..=2).contains(&order) {
        return invalid(format!("derivative order must be 1 or 2, got {order}"));
    }
    let d = params.input_dim();
    if x.len() != d {
        return invalid(format!("point has {} coordinates, network expects {d}", x.len()));
    }
    let dims: Vec<usize> = (0..d).collect();
    let pts = ArrayView2::from_shape((1, d), x).expect("1 x d");
    let jets = raw_jets(&PerturbView::plain(params), pts, &dims, &AllocationLedger::new())?;
    let plane = if order == 1 { &jets.d1 } else { &jets.d2 };
    let observed = plane.iter().map(|v| v * v).sum::<f64>().sqrt();

    let depth = params.depth();
    let m: Vec<f64> = params.layers.iter().map(|w| spectral_norm(w).max(1.0)).collect();
    let n = order as i32;
    let fact = (1..order).product::<usize>() as f64;
    let bound = fact
        * (d as f64).powi(n - 1)
        * ((depth - 1) as f64).powi(n - 1)
        * m[depth - 1]
        * m[..depth - 1].iter().map(|ml| ml.powi(n)).product::<f64>();
    Ok((observed, bound))
}
