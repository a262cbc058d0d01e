use ndarray::Array2;

use super::oracle::{dense_ansatz, dense_ansatz_jet, dense_forward, explicit_params, kronecker_basis};
use super::IdentityReport;
use crate::error::{invalid, Result};
use crate::jets::{Activation, Jet2};
use crate::ledger::AllocationLedger;
use crate::net::{ansatz_jets, forward, MlpParams, PerturbView, Sign};
use crate::optimizer::SdzeConfig;
use crate::rng::{gaussian_matrix, RngStream, Role, StreamKey};
use crate::spatial::{sample_unit_ball, sampled_operator, ExactField, PdeProblem};
use crate::subspace::{plan_reshape, sample_core, LayerSubspace, SplitSide};

const EQUIV_TOL: f64 = 1e-10;
const ORTHO_TOL: f64 = 1e-10;
const JET_TOL: f64 = 1e-6;
const JET_FLOOR: f64 = 1e-3;
const RESIDUAL_TOL: f64 = 1e-10;
const KRONECKER_MAX_ELEMS: usize = 1 << 23;

fn verify_stream(master: u64, step: u64, index: u64) -> RngStream {
    StreamKey::new(master, Role::Verify, step, index).stream()
}

fn pick<T: Copy>(s: &mut RngStream, items: &[T]) -> T {
    items[s.below(items.len() as u64) as usize]
}

/// `max|a − b| / max|b|`.
fn normwise_rel(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn max_identity_gap(q: &Array2<f64>) -> f64 {
    let g = q.t().dot(q);
    g.indexed_iter()
        .map(|((i, j), v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

/// Random network for case `c`. Even cases start with a tall first layer
/// so the reshape has to split it.
fn random_case(master: u64, c: u64) -> Result<(MlpParams, usize)> {
    let mut s = verify_stream(master, c, 0);
    let d = if c.is_multiple_of(2) { pick(&mut s, &[24, 32, 27, 45]) } else { 2 + s.below(10) as usize };
    let depth = 1 + s.below(2) as usize;
    let hidden: Vec<usize> = (0..depth).map(|_| pick(&mut s, &[3, 4, 6, 8, 12, 18])).collect();
    let act = pick(&mut s, &[Activation::Sin, Activation::TanhScaled(1.0)]);
    let biased = s.below(2) == 1;
    let params = MlpParams::init(master ^ (c + 1), d, &hidden, act, biased)?;
    Ok((params, d))
}

/// Implicit perturbed forward and jets against the materialized `θ ± εΔθ`
/// network, over `n_cases` random shapes, plans and ranks.
pub fn implicit_equivalence_check(master: u64, n_cases: u64) -> Result<Vec<IdentityReport>> {
    let ledger = AllocationLedger::new();
    let eps = 0.3;
    let npts = 4;
    let mut reports = Vec::new();
    for c in 0..n_cases {
        let (params, d) = random_case(master, c)?;
        let mut s = verify_stream(master, c, 1);
        let mut subs = Vec::new();
        let mut cores = Vec::new();
        let mut splits = 0;
        for (l, w) in params.layers.iter().enumerate() {
            let plan = plan_reshape(w.nrows(), w.ncols())?;
            if plan.split_side != SplitSide::None {
                splits += 1;
            }
            let rmax = plan.square.0.min(plan.square.1) as u64;
            let r = 1 + s.below(rmax) as usize;
            subs.push(LayerSubspace::generate(master ^ c, l, plan, r, 0)?);
            cores.push(sample_core(&mut s, r)?);
        }
        let x = sample_unit_ball(&mut s, npts, d)?;
        let dims: Vec<usize> = (0..d).collect();
        let mut worst: f64 = 0.0;
        for sign in [Sign::Plus, Sign::Minus] {
            let view = PerturbView::new(&params, &subs, &cores, sign, eps)?;
            let dense = explicit_params(&params, &subs, &cores, sign.factor() * eps);
            let implicit = forward(&view, x.view(), &ledger)?;
            let oracle: Vec<f64> = x.rows().into_iter().map(|row| dense_forward(&dense, &row.to_vec())).collect();
            worst = worst.max(normwise_rel(implicit.as_slice().expect("contiguous"), &oracle));

            let jets = ansatz_jets(&view, x.view(), &dims, &ledger)?;
            let (mut got, mut want) = (Vec::new(), Vec::new());
            for (p, row) in x.rows().into_iter().enumerate() {
                let xs = row.to_vec();
                for (j, &i) in dims.iter().enumerate() {
                    let a = jets.jet(p, j);
                    let b = dense_ansatz_jet(&dense, &xs, i);
                    got.extend([a.value, a.d1, a.d2]);
                    want.extend([b.value, b.d1, b.d2]);
                }
            }
            worst = worst.max(normwise_rel(&got, &want));
        }
        let shapes: Vec<String> = params.layers.iter().map(|w| format!("{}x{}", w.nrows(), w.ncols())).collect();
        reports.push(IdentityReport::absolute(
            format!("case {c} [{}] splits={splits}", shapes.join(",")),
            0.0,
            worst,
            npts as u64,
            EQUIV_TOL,
        ));
    }
    Ok(reports)
}

/// Orthonormality of every basis in force during `steps` training steps,
/// plus the Gram matrix of `V ⊗ U` for layers small enough to materialize.
pub fn orthogonality_check(cfg: &SdzeConfig, params: &MlpParams, steps: u64) -> Result<Vec<IdentityReport>> {
    if cfg.freq == 0 {
        return invalid("refresh frequency must be >= 1");
    }
    let depth = params.depth();
    let mut u_gap = vec![0.0f64; depth];
    let mut v_gap = vec![0.0f64; depth];
    let mut refreshes = 0;
    let mut t = 0;
    while t < steps.max(1) {
        for (l, sub) in cfg.subspaces_at(params, t)?.iter().enumerate() {
            u_gap[l] = u_gap[l].max(max_identity_gap(&sub.u));
            v_gap[l] = v_gap[l].max(max_identity_gap(&sub.v));
        }
        refreshes += 1;
        t += cfg.freq;
    }
    let mut reports = Vec::new();
    for l in 0..depth {
        reports.push(IdentityReport::absolute(format!("layer {l} UᵀU = I"), 0.0, u_gap[l], refreshes, ORTHO_TOL));
        reports.push(IdentityReport::absolute(format!("layer {l} VᵀV = I"), 0.0, v_gap[l], refreshes, ORTHO_TOL));
    }
    for (l, sub) in cfg.subspaces_at(params, 0)?.iter().enumerate() {
        let (mp, np) = sub.plan.square;
        if mp * np * sub.rank * sub.rank > KRONECKER_MAX_ELEMS {
            continue;
        }
        let gap = max_identity_gap(&kronecker_basis(sub));
        reports.push(IdentityReport::absolute(format!("layer {l} (V⊗U)ᵀ(V⊗U) = I"), 0.0, gap, 1, ORTHO_TOL));
    }
    Ok(reports)
}

fn central(f: &dyn Fn(f64) -> f64, h: f64) -> (f64, f64) {
    let (up, mid, down) = (f(h), f(0.0), f(-h));
    ((up - down) / (2.0 * h), (up - 2.0 * mid + down) / (h * h))
}

/// Two Richardson levels on the central first and second differences.
fn richardson(f: &dyn Fn(f64) -> f64, h: f64) -> (f64, f64) {
    let a = central(f, h);
    let b = central(f, h / 2.0);
    let c = central(f, h / 4.0);
    let lvl = |x: f64, y: f64| (4.0 * y - x) / 3.0;
    let (d1a, d1b) = (lvl(a.0, b.0), lvl(b.0, c.0));
    let (d2a, d2b) = (lvl(a.1, b.1), lvl(b.1, c.1));
    ((16.0 * d1b - d1a) / 15.0, (16.0 * d2b - d2a) / 15.0)
}

fn jet_error(jet: Jet2, fd: (f64, f64)) -> f64 {
    let e1 = (jet.d1 - fd.0).abs() / fd.0.abs().max(JET_FLOOR);
    let e2 = (jet.d2 - fd.1).abs() / fd.1.abs().max(JET_FLOOR);
    e1.max(e2)
}

/// Network ansatz jets along every coordinate against finite differences of
/// the dense evaluator, on `n_nets` random networks.
pub fn jets_fd_check(master: u64, n_nets: u64) -> Result<Vec<IdentityReport>> {
    let ledger = AllocationLedger::new();
    let h = 2e-2;
    let mut reports = Vec::new();
    for c in 0..n_nets {
        let mut s = verify_stream(master, c, 2);
        let d = 2 + s.below(7) as usize;
        let hidden = [pick(&mut s, &[4, 8, 16]), pick(&mut s, &[4, 8, 16])];
        let act = pick(&mut s, &[Activation::Sin, Activation::TanhScaled(1.0)]);
        let mut params = MlpParams::init(master.wrapping_add(c), d, &hidden, act, s.below(2) == 1)?;
        for w in params.layers.iter_mut() {
            *w += &gaussian_matrix(&mut s, w.nrows(), w.ncols())?.mapv(|v| 0.3 * v);
        }
        let x = sample_unit_ball(&mut s, 3, d)?;
        let dims: Vec<usize> = (0..d).collect();
        let jets = ansatz_jets(&PerturbView::plain(&params), x.view(), &dims, &ledger)?;
        let mut worst: f64 = 0.0;
        for (p, row) in x.rows().into_iter().enumerate() {
            let xs = row.to_vec();
            for (j, &i) in dims.iter().enumerate() {
                let along = |t: f64| {
                    let mut y = xs.clone();
                    y[i] += t;
                    dense_ansatz(&params, &y)
                };
                worst = worst.max(jet_error(jets.jet(p, j), richardson(&along, h)));
            }
        }
        reports.push(IdentityReport::absolute(
            format!("net {c} ({act:?}, d={d}) jets vs differences"),
            0.0,
            worst,
            (3 * d) as u64,
            JET_TOL,
        ));
    }
    Ok(reports)
}

/// Every-term jet of `u_exact` along `i`, without exploiting term locality.
fn exact_jet_dense(problem: &PdeProblem, x: &[f64], i: usize) -> Jet2 {
    let arity = problem.dim + 1 - problem.coeffs.len();
    let seed = |k: usize| if k == i { Jet2::variable(x[k]) } else { Jet2::constant(x[k]) };
    let mut sum = Jet2::constant(0.0);
    for (t, &c) in problem.coeffs.iter().enumerate() {
        let mut arg = Jet2::constant(1.0);
        for k in t..t + arity {
            arg = arg * seed(k);
        }
        sum = sum + arg.exp().scale(c);
    }
    let mut norm2 = Jet2::constant(0.0);
    for k in 0..x.len() {
        norm2 = norm2 + seed(k) * seed(k);
    }
    (Jet2::constant(1.0) - norm2) * sum
}

/// `ℒu_exact − f` at `n_points` points of the ball, through both the dense
/// jet oracle and the solver's operator path, plus a finite-difference
/// Laplacian at the first few points.
pub fn manufactured_residual_check(problem: &PdeProblem, master: u64, n_points: usize) -> Result<Vec<IdentityReport>> {
    let d = problem.dim;
    let x = sample_unit_ball(&mut verify_stream(master, 0, 3), n_points, d)?;
    let all: Vec<usize> = (0..d).collect();
    let field = ExactField(problem);
    let (mut dense_worst, mut solver_worst, mut fd_worst) = (0.0f64, 0.0f64, 0.0f64);
    let n_fd = n_points.min(10);
    for (p, row) in x.rows().into_iter().enumerate() {
        let xs = row.to_vec();
        let f = problem.rhs(&xs);
        let scale = f.abs().max(1.0);
        let u = problem.exact_solution(&xs);
        let lap: f64 = all.iter().map(|&i| exact_jet_dense(problem, &xs, i).d2).sum();
        dense_worst = dense_worst.max((lap + problem.nonlinearity.apply(u) - f).abs() / scale);
        solver_worst = solver_worst.max((sampled_operator(&field, problem, &xs, &all)? - f).abs() / scale);
        if p < n_fd {
            let mut fd_lap = 0.0;
            for &i in &all {
                let along = |t: f64| {
                    let mut y = xs.clone();
                    y[i] += t;
                    problem.exact_solution(&y)
                };
                fd_lap += richardson(&along, 2e-2).1;
            }
            fd_worst = fd_worst.max((fd_lap + problem.nonlinearity.apply(u) - f).abs() / scale);
        }
    }
    Ok(vec![
        IdentityReport::absolute("residual, dense jets", 0.0, dense_worst, n_points as u64, RESIDUAL_TOL),
        IdentityReport::absolute("residual, operator path", 0.0, solver_worst, n_points as u64, RESIDUAL_TOL),
        IdentityReport::absolute("residual, differenced laplacian", 0.0, fd_worst, n_fd as u64, JET_TOL),
    ])
}
