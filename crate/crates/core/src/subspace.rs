//! Layer-wise low-rank subspaces.
//!
//! A weight matrix `W` (`m × n`, input-times-weight) is viewed through a
//! bijective reshape `T` as a near-square `m' × n'` matrix, with `vec`
//! taken column-major on both sides. A perturbation of the layer is
//! `ΔW = T⁻¹(U Z Vᵀ)` with orthonormal `U` (`m' × r`), `V` (`n' × r`) and a
//! per-step Gaussian core `Z` (`r × r`). In vector form this is
//! `vec(ΔW) = (V ⊗ U) vec(Z)`.
//!
//! Index maps between `W` and `W' = T(W)`:
//!
//! * split rows (`m = m'·k`, `n' = n·k`): `W[s·m' + a, j] = W'[a, j·k + s]`
//! * split cols (`n = n'·k`, `m' = m·k`): `W[i, c·k + s] = W'[s·m + i, c]`
//!
//! Neither [`LayerSubspace::contract`] nor [`apply_rank_r_update`] ever
//! forms `ΔW`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};

use crate::error::{invalid, Result};
use crate::ledger::AllocationLedger;
use crate::rng::{gaussian_matrix, RngStream, Role, StreamKey};

/// Row-block budget of the streaming update, in elements of the `(U_blk Z) Vᵀ` block.
pub const UPDATE_BLOCK_ELEMS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSide {
    None,
    Rows,
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReshapePlan {
    pub orig: (usize, usize),
    pub square: (usize, usize),
    pub split_factor: usize,
    pub split_side: SplitSide,
}

/// Pick the divisor `k` of the larger side that makes the reshaped matrix
/// closest to square; ties go to the smaller `k`.
pub fn plan_reshape(m: usize, n: usize) -> Result<ReshapePlan> {
    if m == 0 || n == 0 {
        return invalid(format!("cannot plan a reshape for a {m}x{n} layer"));
    }
    let (large, small) = (m.max(n), m.min(n));
    let mut best = (large - small, 1usize);
    let mut k = 2;
    while k <= large {
        if large % k == 0 {
            let gap = (large / k).abs_diff(small * k);
            if gap < best.0 {
                best = (gap, k);
            }
        }
        k += 1;
    }
    let k = best.1;
    Ok(if k == 1 {
        ReshapePlan {
            orig: (m, n),
            square: (m, n),
            split_factor: 1,
            split_side: SplitSide::None,
        }
    } else if m > n {
        ReshapePlan {
            orig: (m, n),
            square: (m / k, n * k),
            split_factor: k,
            split_side: SplitSide::Rows,
        }
    } else {
        ReshapePlan {
            orig: (m, n),
            square: (m * k, n / k),
            split_factor: k,
            split_side: SplitSide::Cols,
        }
    })
}

impl ReshapePlan {
    /// Position in `W'` of `W[i, j]`.
    #[inline]
    pub fn to_square_index(&self, i: usize, j: usize) -> (usize, usize) {
        let k = self.split_factor;
        match self.split_side {
            SplitSide::None => (i, j),
            SplitSide::Rows => {
                let mp = self.square.0;
                (i % mp, j * k + i / mp)
            }
            SplitSide::Cols => (j % k * self.orig.0 + i, j / k),
        }
    }

    /// Position in `W` of `W'[a, c]`.
    #[inline]
    pub fn from_square_index(&self, a: usize, c: usize) -> (usize, usize) {
        let k = self.split_factor;
        match self.split_side {
            SplitSide::None => (a, c),
            SplitSide::Rows => (c % k * self.square.0 + a, c / k),
            SplitSide::Cols => {
                let m = self.orig.0;
                (a % m, c * k + a / m)
            }
        }
    }

    /// Materialize `T(W)`.
    pub fn to_square(&self, w: &Array2<f64>) -> Result<Array2<f64>> {
        if w.dim() != self.orig {
            return invalid(format!("expected {:?} matrix, got {:?}", self.orig, w.dim()));
        }
        let mut out = Array2::zeros(self.square);
        for ((i, j), &x) in w.indexed_iter() {
            out[self.to_square_index(i, j)] = x;
        }
        Ok(out)
    }

    /// Materialize `T⁻¹(W')`.
    pub fn from_square(&self, wp: &Array2<f64>) -> Result<Array2<f64>> {
        if wp.dim() != self.square {
            return invalid(format!("expected {:?} matrix, got {:?}", self.square, wp.dim()));
        }
        let mut out = Array2::zeros(self.orig);
        for ((a, c), &x) in wp.indexed_iter() {
            out[self.from_square_index(a, c)] = x;
        }
        Ok(out)
    }
}

/// Thin Householder QR; returns the `m × r` Q factor with the sign
/// convention that the diagonal of R is non-negative.
pub fn thin_q(a: &Array2<f64>) -> Array2<f64> {
    let (m, r) = a.dim();
    assert!(r <= m, "thin QR needs rows >= cols");
    let mut work = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut rdiag = vec![0.0; r];
    for k in 0..r {
        let mut v: Vec<f64> = (k..m).map(|i| work[[i, k]]).collect();
        let alpha = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if alpha == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * alpha;
        rdiag[k] = -sign * alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        for j in k..r {
            let dot: f64 = v.iter().enumerate().map(|(t, vi)| vi * work[[k + t, j]]).sum();
            let f = 2.0 * dot / vnorm2;
            for (t, vi) in v.iter().enumerate() {
                work[[k + t, j]] -= f * vi;
            }
        }
        reflectors.push(v);
    }
    let mut q = Array2::zeros((m, r));
    for j in 0..r {
        q[[j, j]] = 1.0;
    }
    for k in (0..r).rev() {
        let v = &reflectors[k];
        if v.is_empty() {
            continue;
        }
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        for j in 0..r {
            let dot: f64 = v.iter().enumerate().map(|(t, vi)| vi * q[[k + t, j]]).sum();
            let f = 2.0 * dot / vnorm2;
            for (t, vi) in v.iter().enumerate() {
                q[[k + t, j]] -= f * vi;
            }
        }
    }
    for (k, &d) in rdiag.iter().enumerate() {
        if d < 0.0 {
            q.column_mut(k).mapv_inplace(|x| -x);
        }
    }
    q
}

/// Fresh orthonormal bases `(U, V)` for a plan at rank `r`.
pub fn refresh_bases(
    stream_u: &mut RngStream,
    stream_v: &mut RngStream,
    plan: &ReshapePlan,
    r: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (mp, np) = plan.square;
    if r == 0 || r > mp.min(np) {
        return invalid(format!("rank {r} not in 1..={} for square view {mp}x{np}", mp.min(np)));
    }
    let u = thin_q(&gaussian_matrix(stream_u, mp, r)?);
    let v = thin_q(&gaussian_matrix(stream_v, np, r)?);
    Ok((u, v))
}

pub fn sample_core(stream: &mut RngStream, r: usize) -> Result<Array2<f64>> {
    gaussian_matrix(stream, r, r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSubspace {
    pub layer: usize,
    pub plan: ReshapePlan,
    pub u: Array2<f64>,
    pub v: Array2<f64>,
    pub rank: usize,
    pub last_refresh_step: u64,
}

impl LayerSubspace {
    /// Bases drawn from the `(master, base_U/base_V, step, layer)` streams.
    pub fn generate(master: u64, layer: usize, plan: ReshapePlan, rank: usize, step: u64) -> Result<Self> {
        let mut su = StreamKey::new(master, Role::BaseU, step, layer as u64).stream();
        let mut sv = StreamKey::new(master, Role::BaseV, step, layer as u64).stream();
        let (u, v) = refresh_bases(&mut su, &mut sv, &plan, rank)?;
        Ok(Self {
            layer,
            plan,
            u,
            v,
            rank,
            last_refresh_step: step,
        })
    }

    /// Refresh iff `t ≡ 0 (mod freq)`. Returns whether a refresh happened.
    pub fn maybe_refresh(&mut self, master: u64, t: u64, freq: u64) -> Result<bool> {
        if freq == 0 {
            return invalid("refresh frequency must be >= 1");
        }
        if !t.is_multiple_of(freq) {
            return Ok(false);
        }
        *self = Self::generate(master, self.layer, self.plan, self.rank, t)?;
        Ok(true)
    }

    pub fn core_key(master: u64, step: u64, layer: usize) -> StreamKey {
        StreamKey::new(master, Role::CoreZ, step, layer as u64)
    }

    fn check_core(&self, z: &Array2<f64>) -> Result<()> {
        if z.dim() != (self.rank, self.rank) {
            return invalid(format!("core must be {r}x{r}, got {:?}", z.dim(), r = self.rank));
        }
        Ok(())
    }

    /// `H · T⁻¹(U Z Vᵀ)` for a batch `H` (`rows × m`), without forming the
    /// `m × n` perturbation. Cost `O(rows·(m + n')·r + rows·k·r²)`.
    pub fn contract(&self, h: ArrayView2<f64>, z: &Array2<f64>, ledger: &AllocationLedger) -> Result<Array2<f64>> {
        let _out_charge = ledger.charge(h.nrows() * self.plan.orig.1);
        let mut out = Array2::zeros((h.nrows(), self.plan.orig.1));
        self.contract_into(h, z, 1.0, out.view_mut(), ledger)?;
        Ok(out)
    }

    /// `out += scale · H · T⁻¹(U Z Vᵀ)`.
    ///
    /// `H` may have fewer than `m` columns; the missing trailing columns are
    /// taken as zero.
    pub fn contract_into(
        &self,
        h: ArrayView2<f64>,
        z: &Array2<f64>,
        scale: f64,
        mut out: ArrayViewMut2<f64>,
        ledger: &AllocationLedger,
    ) -> Result<()> {
        self.check_core(z)?;
        let (m, n) = self.plan.orig;
        let hc = h.ncols();
        if hc > m || out.dim() != (h.nrows(), n) {
            return invalid(format!(
                "batch {:?} into {:?} does not fit a {m}x{n} layer",
                h.dim(),
                out.dim()
            ));
        }
        let k = self.plan.split_factor;
        let _seg_charge = ledger.charge(2 * h.nrows() * self.rank);
        match self.plan.split_side {
            SplitSide::None => {
                let g = h.dot(&self.u.slice(s![..hc, ..])).dot(z);
                general_mat_mul(scale, &g, &self.v.t(), 1.0, &mut out);
            }
            SplitSide::Rows => {
                let mp = self.plan.square.0;
                for seg in 0..k {
                    let (c0, c1) = (seg * mp, ((seg + 1) * mp).min(hc));
                    if c0 >= c1 {
                        break;
                    }
                    let hs = h.slice(s![.., c0..c1]);
                    let g = hs.dot(&self.u.slice(s![..c1 - c0, ..])).dot(z);
                    let vs = self.v.slice(s![seg..;k, ..]);
                    general_mat_mul(scale, &g, &vs.t(), 1.0, &mut out);
                }
            }
            SplitSide::Cols => {
                for seg in 0..k {
                    let us = self.u.slice(s![seg * m..seg * m + hc, ..]);
                    let g = h.dot(&us).dot(z);
                    let mut cols = out.slice_mut(s![.., seg..;k]);
                    general_mat_mul(scale, &g, &self.v.t(), 1.0, &mut cols);
                }
            }
        }
        Ok(())
    }

    /// Row `i` of `T⁻¹(U Z Vᵀ)`, i.e. the image of the unit vector `e_i`.
    pub fn delta_row(&self, i: usize, z: &Array2<f64>) -> Result<Vec<f64>> {
        self.check_core(z)?;
        let (m, n) = self.plan.orig;
        if i >= m {
            return invalid(format!("row {i} out of range for {m} rows"));
        }
        let k = self.plan.split_factor;
        let row_of = |a: usize| self.u.row(a).dot(z);
        Ok(match self.plan.split_side {
            SplitSide::None => row_of(i).dot(&self.v.t()).to_vec(),
            SplitSide::Rows => {
                let mp = self.plan.square.0;
                let (seg, a) = (i / mp, i % mp);
                let uz = row_of(a);
                (0..n).map(|j| uz.dot(&self.v.row(j * k + seg))).collect()
            }
            SplitSide::Cols => {
                let uz: Vec<_> = (0..k).map(|seg| row_of(seg * m + i)).collect();
                (0..n).map(|j| uz[j % k].dot(&self.v.row(j / k))).collect()
            }
        })
    }
}

/// `W ← W + scale · T⁻¹(U Z Vᵀ)`, streamed in row blocks of the square view.
pub fn apply_rank_r_update(
    w: &mut Array2<f64>,
    sub: &LayerSubspace,
    z: &Array2<f64>,
    scale: f64,
    ledger: &AllocationLedger,
) -> Result<()> {
    sub.check_core(z)?;
    if w.dim() != sub.plan.orig {
        return invalid(format!("weight is {:?}, subspace plan expects {:?}", w.dim(), sub.plan.orig));
    }
    if scale == 0.0 {
        return Ok(());
    }
    let (mp, np) = sub.plan.square;
    let block = (UPDATE_BLOCK_ELEMS / np).max(1);
    let _charge = ledger.charge(block * (np + sub.rank));
    let mut a0 = 0;
    while a0 < mp {
        let a1 = (a0 + block).min(mp);
        let uz = sub.u.slice(s![a0..a1, ..]).dot(z);
        let d = uz.dot(&sub.v.t());
        for (da, row) in d.axis_iter(Axis(0)).enumerate() {
            for (c, &x) in row.iter().enumerate() {
                let idx = sub.plan.from_square_index(a0 + da, c);
                w[idx] += scale * x;
            }
        }
        a0 = a1;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fro_dev_from_identity(q: &Array2<f64>) -> f64 {
        let g = q.t().dot(q);
        let r = g.nrows();
        (&g - &Array2::<f64>::eye(r)).iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn plan_tall_input_layer() {
        let p = plan_reshape(10000, 16).unwrap();
        assert_eq!(p.split_factor, 25);
        assert_eq!(p.square, (400, 400));
        assert_eq!(p.split_side, SplitSide::Rows);
    }

    #[test]
    fn plan_square_is_identity() {
        let p = plan_reshape(128, 128).unwrap();
        assert_eq!((p.split_factor, p.split_side, p.square), (1, SplitSide::None, (128, 128)));
    }

    #[test]
    fn plan_prime_side_stays_put() {
        let p = plan_reshape(7, 3).unwrap();
        assert_eq!((p.split_factor, p.square), (1, (7, 3)));
    }

    #[test]
    fn plan_wide_layer_splits_columns() {
        let p = plan_reshape(2, 32).unwrap();
        assert_eq!(p.split_side, SplitSide::Cols);
        assert_eq!(p.square, (8, 8));
    }

    #[test]
    fn index_maps_are_inverse_and_column_major() {
        for (m, n) in [(12, 2), (2, 12), (6, 4), (5, 5), (9, 1)] {
            let p = plan_reshape(m, n).unwrap();
            let w = Array2::from_shape_fn((m, n), |(i, j)| (i * 100 + j) as f64);
            let wp = p.to_square(&w).unwrap();
            assert_eq!(p.from_square(&wp).unwrap(), w);
            // column-major flatten of both sides agrees
            let flat = |a: &Array2<f64>| a.t().iter().copied().collect::<Vec<_>>();
            assert_eq!(flat(&w), flat(&wp), "plan {p:?}");
        }
    }

    #[test]
    fn qr_is_orthonormal_with_nonnegative_r() {
        let mut s = StreamKey::new(1, Role::Verify, 0, 0).stream();
        let a = gaussian_matrix(&mut s, 9, 4).unwrap();
        let q = thin_q(&a);
        assert!(fro_dev_from_identity(&q) < 1e-12);
        let r = q.t().dot(&a);
        for i in 0..4 {
            assert!(r[[i, i]] >= 0.0);
            for j in 0..i {
                assert!(r[[i, j]].abs() < 1e-12);
            }
        }
        assert!((q.dot(&r) - &a).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn full_rank_refresh_is_square_orthogonal() {
        let plan = plan_reshape(6, 6).unwrap();
        let sub = LayerSubspace::generate(3, 0, plan, 6, 0).unwrap();
        assert!(fro_dev_from_identity(&sub.u) < 1e-10);
        assert!(fro_dev_from_identity(&sub.u.t().to_owned()) < 1e-10);
    }

    #[test]
    fn rank_too_large() {
        let plan = plan_reshape(7, 3).unwrap();
        assert!(LayerSubspace::generate(3, 0, plan, 4, 0).is_err());
    }

    #[test]
    fn lazy_refresh_schedule() {
        let plan = plan_reshape(8, 8).unwrap();
        let mut sub = LayerSubspace::generate(5, 0, plan, 2, 0).unwrap();
        let before = sub.clone();
        assert!(!sub.maybe_refresh(5, 999, 1000).unwrap());
        assert_eq!(sub, before);
        assert!(sub.maybe_refresh(5, 1000, 1000).unwrap());
        assert_eq!(sub.last_refresh_step, 1000);
        assert_ne!(sub.u, before.u);
        assert!(sub.maybe_refresh(5, 7, 1).unwrap());
        assert!(sub.maybe_refresh(5, 0, 0).is_err());
    }

    #[test]
    fn core_is_reproducible() {
        let a = sample_core(&mut LayerSubspace::core_key(1, 4, 2).stream(), 3).unwrap();
        let b = sample_core(&mut LayerSubspace::core_key(1, 4, 2).stream(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(sample_core(&mut LayerSubspace::core_key(1, 4, 2).stream(), 1).unwrap().dim(), (1, 1));
    }

    #[test]
    fn update_with_zero_scale_is_identity() {
        let plan = plan_reshape(6, 4).unwrap();
        let sub = LayerSubspace::generate(2, 0, plan, 2, 0).unwrap();
        let z = sample_core(&mut LayerSubspace::core_key(2, 1, 0).stream(), 2).unwrap();
        let mut w = Array2::from_elem((6, 4), 0.25);
        apply_rank_r_update(&mut w, &sub, &z, 0.0, &AllocationLedger::new()).unwrap();
        assert_eq!(w, Array2::from_elem((6, 4), 0.25));
    }

    #[test]
    fn update_shape_mismatch() {
        let plan = plan_reshape(6, 4).unwrap();
        let sub = LayerSubspace::generate(2, 0, plan, 2, 0).unwrap();
        let z = Array2::zeros((2, 2));
        let mut w = Array2::zeros((4, 6));
        assert!(apply_rank_r_update(&mut w, &sub, &z, 1.0, &AllocationLedger::new()).is_err());
        assert!(apply_rank_r_update(&mut Array2::zeros((6, 4)), &sub, &Array2::zeros((3, 3)), 1.0, &AllocationLedger::new()).is_err());
    }
}
