//! Dense reference implementations. Everything here is written with plain
//! index loops so that agreement with the training kernels means something.

use ndarray::{Array2, ArrayView2};

use crate::jets::Jet2;
use crate::net::MlpParams;
use crate::subspace::LayerSubspace;

/// `U Z Vᵀ` in the square view, reshaped back to `m × n` column-major.
pub fn explicit_delta(sub: &LayerSubspace, z: &Array2<f64>) -> Array2<f64> {
    let (m, n) = sub.plan.orig;
    let (mp, np) = sub.plan.square;
    let r = sub.rank;
    let mut out = Array2::zeros((m, n));
    for a in 0..mp {
        for c in 0..np {
            let mut acc = 0.0;
            for p in 0..r {
                for q in 0..r {
                    acc += sub.u[[a, p]] * z[[p, q]] * sub.v[[c, q]];
                }
            }
            let lin = c * mp + a;
            out[[lin % m, lin / m]] = acc;
        }
    }
    out
}

/// `W_l + scale · ΔW_l` for every layer.
pub fn explicit_params(params: &MlpParams, subs: &[LayerSubspace], cores: &[Array2<f64>], scale: f64) -> MlpParams {
    let mut out = params.clone();
    for ((w, sub), z) in out.layers.iter_mut().zip(subs).zip(cores) {
        let d = explicit_delta(sub, z);
        for i in 0..w.nrows() {
            for j in 0..w.ncols() {
                w[[i, j]] += scale * d[[i, j]];
            }
        }
    }
    out
}

/// `V ⊗ U`: column `b·r + a` is `vec(T⁻¹(u_a v_bᵀ))`.
pub fn kronecker_basis(sub: &LayerSubspace) -> Array2<f64> {
    let (mp, np) = sub.plan.square;
    let r = sub.rank;
    let mut k = Array2::zeros((mp * np, r * r));
    for c in 0..np {
        for a in 0..mp {
            for b in 0..r {
                for p in 0..r {
                    k[[c * mp + a, b * r + p]] = sub.v[[c, b]] * sub.u[[a, p]];
                }
            }
        }
    }
    k
}

/// Block-diagonal `𝒫` (`P × q`) with rows in [`MlpParams::flatten`] order.
pub fn projection_matrix(subs: &[LayerSubspace]) -> Array2<f64> {
    let rows: usize = subs.iter().map(|s| s.plan.orig.0 * s.plan.orig.1).sum();
    let cols: usize = subs.iter().map(|s| s.rank * s.rank).sum();
    let mut p = Array2::zeros((rows, cols));
    let (mut r0, mut c0) = (0, 0);
    for sub in subs {
        let k = kronecker_basis(sub);
        for i in 0..k.nrows() {
            for j in 0..k.ncols() {
                p[[r0 + i, c0 + j]] = k[[i, j]];
            }
        }
        r0 += k.nrows();
        c0 += k.ncols();
    }
    p
}

/// `vec(Z)` for each core, column-major, concatenated.
pub fn stack_cores(cores: &[Array2<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for z in cores {
        for q in 0..z.ncols() {
            for p in 0..z.nrows() {
                out.push(z[[p, q]]);
            }
        }
    }
    out
}

pub fn mat_vec(a: ArrayView2<f64>, x: &[f64]) -> Vec<f64> {
    (0..a.nrows()).map(|i| (0..a.ncols()).map(|j| a[[i, j]] * x[j]).sum()).collect()
}

pub fn mat_t_vec(a: ArrayView2<f64>, x: &[f64]) -> Vec<f64> {
    (0..a.ncols()).map(|j| (0..a.nrows()).map(|i| a[[i, j]] * x[i]).sum()).collect()
}

fn layer_jets(params: &MlpParams, mut h: Vec<Jet2>) -> Jet2 {
    let depth = params.layers.len();
    for (l, w) in params.layers.iter().enumerate() {
        let mut next = Vec::with_capacity(w.ncols());
        for j in 0..w.ncols() {
            let mut acc = if params.biased {
                Jet2::constant(w[[h.len(), j]])
            } else {
                Jet2::constant(0.0)
            };
            for (k, hk) in h.iter().enumerate() {
                acc = acc + hk.scale(w[[k, j]]);
            }
            next.push(if l + 1 < depth { acc.activate(params.activation) } else { acc });
        }
        h = next;
    }
    h[0]
}

/// Raw network value at a single point.
pub fn dense_forward(params: &MlpParams, x: &[f64]) -> f64 {
    layer_jets(params, x.iter().map(|&v| Jet2::constant(v)).collect()).value
}

/// Ansatz jet along coordinate `i`, one neuron at a time.
pub fn dense_ansatz_jet(params: &MlpParams, x: &[f64], i: usize) -> Jet2 {
    let seeds = x
        .iter()
        .enumerate()
        .map(|(k, &v)| if k == i { Jet2::variable(v) } else { Jet2::constant(v) })
        .collect();
    let g = layer_jets(params, seeds);
    let norm2: f64 = x.iter().map(|v| v * v).sum();
    Jet2::new(1.0 - norm2, -2.0 * x[i], -2.0) * g
}

pub fn dense_ansatz(params: &MlpParams, x: &[f64]) -> f64 {
    let norm2: f64 = x.iter().map(|v| v * v).sum();
    (1.0 - norm2) * dense_forward(params, x)
}
