//! The subspace zeroth-order step and the training loop.
//!
//! Each step evaluates the sampled loss at `θ ± ε·Δθ` and moves along
//! `−α_t·δ̂·Δθ`, with `δ̂ = (ℓ₊ − ℓ₋)/(2ε)`. With the lock on, both passes
//! see the same spatial draw; the naive variant redraws the operator index
//! sets for the minus pass so that spatial noise enters the difference.

use std::time::Instant;

use ndarray::Array2;
use serde::Serialize;

use crate::error::{invalid, Result, SdzeError};
use crate::ledger::{AllocationLedger, Phase};
use crate::net::{MlpParams, PerturbView, Sign};
use crate::rng::{Role, StreamKey};
use crate::spatial::{relative_l2, stochastic_loss, PdeProblem, SpatialSample};
use crate::subspace::{apply_rank_r_update, plan_reshape, sample_core, LayerSubspace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "schedule", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { alpha: f64 },
    /// `γ / (t + m)^p`
    Annealed { gamma: f64, m: f64, p: f64 },
    /// `c / √(t·q)` with `q` the total subspace dimension.
    SqrtTq { c: f64 },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Annealed { p, gamma, m } => {
                if !(p > 0.5 && p <= 1.0) {
                    return Err(SdzeError::Config(format!("annealed lr needs p in (1/2, 1], got {p}")));
                }
                if !(gamma > 0.0) || !(m >= 0.0) {
                    return Err(SdzeError::Config(format!("annealed lr needs gamma > 0, m >= 0 (got {gamma}, {m})")));
                }
            }
            LrSchedule::Constant { alpha } if !(alpha > 0.0) => {
                return Err(SdzeError::Config(format!("constant lr must be > 0, got {alpha}")));
            }
            LrSchedule::SqrtTq { c } if !(c > 0.0) => {
                return Err(SdzeError::Config(format!("sqrt_tq constant must be > 0, got {c}")));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Step size at step `t` (1-based); `q` only matters for `SqrtTq`.
pub fn lr_schedule(schedule: &LrSchedule, t: u64, q: usize) -> Result<f64> {
    schedule.validate()?;
    match *schedule {
        LrSchedule::Constant { alpha } => Ok(alpha),
        LrSchedule::Annealed { gamma, m, p } => {
            if t == 0 {
                return invalid("annealed schedule starts at t = 1");
            }
            Ok(gamma / (t as f64 + m).powf(p))
        }
        LrSchedule::SqrtTq { c } => {
            if t == 0 || q == 0 {
                return invalid("sqrt_tq schedule needs t, q >= 1");
            }
            Ok(c / ((t * q as u64) as f64).sqrt())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdzeConfig {
    pub master: u64,
    pub eps: f64,
    pub lr: LrSchedule,
    pub steps: u64,
    pub rank: usize,
    pub rank_per_layer: Option<Vec<usize>>,
    pub freq: u64,
    pub batch_points: usize,
    pub batch_dims: usize,
    pub crns: bool,
    pub eval_every: u64,
    pub test_points: usize,
    /// Record wall-clock time per step. Off keeps metrics byte-reproducible.
    pub timing: bool,
}

impl SdzeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(SdzeError::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.rank == 0 || self.freq == 0 || self.batch_points == 0 || self.batch_dims == 0 {
            return Err(SdzeError::Config("rank, freq_F, batch_points_B and batch_dims_b must be >= 1".into()));
        }
        if let Some(r) = &self.rank_per_layer {
            if r.contains(&0) {
                return Err(SdzeError::Config("rank_per_layer entries must be >= 1".into()));
            }
        }
        self.lr.validate()
    }

    /// Rank of layer `l`, clamped to the smaller side of its square view.
    pub fn layer_rank(&self, l: usize, shape: (usize, usize)) -> Result<usize> {
        let plan = plan_reshape(shape.0, shape.1)?;
        let want = match &self.rank_per_layer {
            Some(r) => *r.get(l).ok_or_else(|| SdzeError::Config(format!("rank_per_layer has no entry for layer {l}")))?,
            None => self.rank,
        };
        Ok(want.min(plan.square.0.min(plan.square.1)))
    }

    /// Bases in effect after step `t`: those drawn at the last refresh `≤ t`.
    pub fn subspaces_at(&self, params: &MlpParams, t: u64) -> Result<Vec<LayerSubspace>> {
        let base_step = (t / self.freq) * self.freq;
        params
            .layers
            .iter()
            .enumerate()
            .map(|(l, w)| {
                let plan = plan_reshape(w.nrows(), w.ncols())?;
                LayerSubspace::generate(self.master, l, plan, self.layer_rank(l, w.dim())?, base_step)
            })
            .collect()
    }
}

/// Total subspace dimension `q = Σ r_l²`.
pub fn subspace_dim(subspaces: &[LayerSubspace]) -> usize {
    subspaces.iter().map(|s| s.rank * s.rank).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub delta_hat: f64,
    pub loss_plus: f64,
    pub loss_minus: f64,
    pub alpha: f64,
    pub rel_l2: Option<f64>,
    pub wall_ms: Option<f64>,
    pub peak_tmp_elems: usize,
}

/// A scalar objective evaluated through a perturbed network view.
///
/// `alt` selects the independently keyed spatial draw used by the naive
/// (unlocked) minus pass.
pub trait Objective {
    fn loss(&self, view: &PerturbView, t: u64, alt: bool, ledger: &AllocationLedger) -> Result<f64>;

    fn replay(&self, t: u64) -> String;
}

/// The sampled PDE residual loss with per-step spatial draws.
#[derive(Debug, Clone, Copy)]
pub struct PdeObjective<'a> {
    pub problem: &'a PdeProblem,
    pub master: u64,
    pub batch_points: usize,
    pub batch_dims: usize,
}

impl PdeObjective<'_> {
    pub fn sample(&self, t: u64, alt: bool) -> Result<SpatialSample> {
        SpatialSample::draw(self.master, t, 0, self.problem.dim, self.batch_points, self.batch_dims, alt)
    }
}

impl Objective for PdeObjective<'_> {
    fn loss(&self, view: &PerturbView, t: u64, alt: bool, ledger: &AllocationLedger) -> Result<f64> {
        stochastic_loss(view, self.problem, &self.sample(t, alt)?, ledger)
    }

    fn replay(&self, t: u64) -> String {
        match self.sample(t, false) {
            Ok(s) => s.replay_keys(),
            Err(e) => format!("step={t} ({e})"),
        }
    }
}

/// Per-layer cores for step `t`.
pub fn step_cores(master: u64, t: u64, subspaces: &[LayerSubspace]) -> Result<Vec<Array2<f64>>> {
    subspaces
        .iter()
        .map(|s| sample_core(&mut LayerSubspace::core_key(master, t, s.layer).stream(), s.rank))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub delta_hat: f64,
    pub loss_plus: f64,
    pub loss_minus: f64,
}

/// `δ̂` at fixed parameters, subspaces and cores.
pub fn directional_estimate<O: Objective>(
    params: &MlpParams,
    subspaces: &[LayerSubspace],
    cores: &[Array2<f64>],
    objective: &O,
    eps: f64,
    t: u64,
    crns: bool,
    ledger: &AllocationLedger,
) -> Result<Estimate> {
    let view = PerturbView::new(params, subspaces, cores, Sign::Plus, eps)?;
    let loss_plus = objective.loss(&view, t, false, ledger)?;
    let loss_minus = objective.loss(&view.with_sign(Sign::Minus), t, !crns, ledger)?;
    Ok(Estimate {
        delta_hat: (loss_plus - loss_minus) / (2.0 * eps),
        loss_plus,
        loss_minus,
    })
}

fn non_finite(t: u64, est: &Estimate, replay: String) -> SdzeError {
    SdzeError::NonFinite {
        step: t,
        loss_plus: est.loss_plus,
        loss_minus: est.loss_minus,
        replay,
    }
}

fn step_impl<O: Objective>(
    params: &mut MlpParams,
    subspaces: &mut [LayerSubspace],
    objective: &O,
    cfg: &SdzeConfig,
    t: u64,
    crns: bool,
    ledger: &AllocationLedger,
) -> Result<StepRecord> {
    let start = cfg.timing.then(Instant::now);
    ledger.reset();
    for sub in subspaces.iter_mut() {
        sub.maybe_refresh(cfg.master, t, cfg.freq)?;
    }
    let cores = step_cores(cfg.master, t, subspaces)?;
    let est = directional_estimate(params, subspaces, &cores, objective, cfg.eps, t, crns, ledger)?;
    let alpha = lr_schedule(&cfg.lr, t, subspace_dim(subspaces))?;
    if est.delta_hat.is_finite() {
        ledger.set_phase(Phase::Update);
        let scale = -alpha * est.delta_hat;
        for ((w, sub), z) in params.layers.iter_mut().zip(subspaces.iter()).zip(&cores) {
            apply_rank_r_update(w, sub, z, scale, ledger)?;
        }
    } else if crns {
        return Err(non_finite(t, &est, objective.replay(t)));
    }
    Ok(StepRecord {
        step: t,
        delta_hat: est.delta_hat,
        loss_plus: est.loss_plus,
        loss_minus: est.loss_minus,
        alpha,
        rel_l2: None,
        wall_ms: start.map(|s| s.elapsed().as_secs_f64() * 1e3),
        peak_tmp_elems: ledger.report().peak(),
    })
}

/// One locked step: refresh → cores → `ℓ₊`, `ℓ₋` on one spatial draw → update.
pub fn sdze_step<O: Objective>(
    params: &mut MlpParams,
    subspaces: &mut [LayerSubspace],
    objective: &O,
    cfg: &SdzeConfig,
    t: u64,
    ledger: &AllocationLedger,
) -> Result<StepRecord> {
    if !cfg.crns {
        return invalid("sdze_step requires crns = true");
    }
    step_impl(params, subspaces, objective, cfg, t, true, ledger)
}

/// Unlocked variant for ablations. A non-finite `δ̂` is recorded and the
/// update skipped instead of aborting.
pub fn sdze_step_naive<O: Objective>(
    params: &mut MlpParams,
    subspaces: &mut [LayerSubspace],
    objective: &O,
    cfg: &SdzeConfig,
    t: u64,
    ledger: &AllocationLedger,
) -> Result<StepRecord> {
    if cfg.crns {
        return invalid("sdze_step_naive requires crns = false");
    }
    step_impl(params, subspaces, objective, cfg, t, false, ledger)
}

/// `θ ← θ + scale·z` with `z ~ N(0, I)` regenerated from the step's stream.
fn shift_fullspace(params: &mut MlpParams, master: u64, t: u64, scale: f64) {
    let mut z = Vec::new();
    for (l, w) in params.layers.iter_mut().enumerate() {
        z.resize(w.len(), 0.0);
        StreamKey::new(master, Role::FullspaceZ, t, l as u64).stream().fill_normal(&mut z);
        w.iter_mut().zip(&z).for_each(|(wv, zv)| *wv += scale * zv);
    }
}

/// Full-space SPSA baseline. The direction is regenerated for each of the
/// `+ε`, `−ε`, restore and update passes rather than stored.
pub fn fullspace_zo_step<O: Objective>(
    params: &mut MlpParams,
    objective: &O,
    cfg: &SdzeConfig,
    t: u64,
    ledger: &AllocationLedger,
) -> Result<StepRecord> {
    let start = cfg.timing.then(Instant::now);
    ledger.reset();
    let eps = cfg.eps;
    shift_fullspace(params, cfg.master, t, eps);
    let loss_plus = objective.loss(&PerturbView::plain(params), t, false, ledger);
    shift_fullspace(params, cfg.master, t, -2.0 * eps);
    let loss_minus = objective.loss(&PerturbView::plain(params), t, !cfg.crns, ledger);
    shift_fullspace(params, cfg.master, t, eps);
    let (loss_plus, loss_minus) = (loss_plus?, loss_minus?);
    let est = Estimate {
        delta_hat: (loss_plus - loss_minus) / (2.0 * eps),
        loss_plus,
        loss_minus,
    };
    let alpha = lr_schedule(&cfg.lr, t, params.param_count())?;
    if est.delta_hat.is_finite() {
        shift_fullspace(params, cfg.master, t, -alpha * est.delta_hat);
    } else if cfg.crns {
        return Err(non_finite(t, &est, objective.replay(t)));
    }
    Ok(StepRecord {
        step: t,
        delta_hat: est.delta_hat,
        loss_plus: est.loss_plus,
        loss_minus: est.loss_minus,
        alpha,
        rel_l2: None,
        wall_ms: start.map(|s| s.elapsed().as_secs_f64() * 1e3),
        peak_tmp_elems: ledger.report().peak(),
    })
}

/// Parameters, bases and step counter of a run in progress.
#[derive(Debug)]
pub struct Trainer {
    pub cfg: SdzeConfig,
    pub params: MlpParams,
    pub subspaces: Vec<LayerSubspace>,
    /// Last completed step.
    pub step: u64,
    pub ledger: AllocationLedger,
}

impl Trainer {
    pub fn new(cfg: SdzeConfig, params: MlpParams) -> Result<Self> {
        Self::resume(cfg, params, 0)
    }

    /// Continue after `step` completed steps. Bases are regenerated from the
    /// last refresh key, so the trajectory matches an uninterrupted run.
    pub fn resume(cfg: SdzeConfig, params: MlpParams, step: u64) -> Result<Self> {
        cfg.validate()?;
        let subspaces = cfg.subspaces_at(&params, step)?;
        Ok(Self {
            cfg,
            params,
            subspaces,
            step,
            ledger: AllocationLedger::new(),
        })
    }

    pub fn step<O: Objective>(&mut self, objective: &O) -> Result<StepRecord> {
        let t = self.step + 1;
        let crns = self.cfg.crns;
        let rec = step_impl(&mut self.params, &mut self.subspaces, objective, &self.cfg, t, crns, &self.ledger)?;
        self.step = t;
        Ok(rec)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<StepRecord>,
    pub initial_rel_l2: f64,
    pub final_rel_l2: f64,
}

pub fn test_key(master: u64) -> StreamKey {
    StreamKey::new(master, Role::TestPoints, 0, 0)
}

/// Run `cfg.steps` steps from `params`, evaluating relative L2 every
/// `eval_every` steps and at the end. `on_step` sees each record as it is
/// produced along with the current trainer.
pub fn train_with<F>(cfg: &SdzeConfig, problem: &PdeProblem, params: MlpParams, on_step: F) -> Result<History>
where
    F: FnMut(&Trainer, &StepRecord) -> Result<()>,
{
    let mut trainer = Trainer::new(cfg.clone(), params)?;
    continue_training(&mut trainer, problem, on_step)
}

/// Step `trainer` until it reaches `cfg.steps`. The initial relative L2 is
/// taken at the trainer's current parameters.
pub fn continue_training<F>(trainer: &mut Trainer, problem: &PdeProblem, mut on_step: F) -> Result<History>
where
    F: FnMut(&Trainer, &StepRecord) -> Result<()>,
{
    let cfg = trainer.cfg.clone();
    if trainer.step > cfg.steps {
        return invalid(format!("trainer is at step {} beyond the configured {}", trainer.step, cfg.steps));
    }
    let objective = PdeObjective {
        problem,
        master: cfg.master,
        batch_points: cfg.batch_points,
        batch_dims: cfg.batch_dims,
    };
    let key = test_key(cfg.master);
    let initial = relative_l2(&trainer.params, problem, key, cfg.test_points)?;
    let mut history = History {
        records: Vec::with_capacity((cfg.steps - trainer.step) as usize),
        initial_rel_l2: initial,
        final_rel_l2: initial,
    };
    while trainer.step < cfg.steps {
        let mut rec = trainer.step(&objective)?;
        let t = rec.step;
        if t == cfg.steps || (cfg.eval_every > 0 && t % cfg.eval_every == 0) {
            rec.rel_l2 = Some(relative_l2(&trainer.params, problem, key, cfg.test_points)?);
        }
        on_step(trainer, &rec)?;
        history.records.push(rec);
    }
    if let Some(v) = history.records.last().and_then(|r| r.rel_l2) {
        history.final_rel_l2 = v;
    }
    Ok(history)
}

pub fn train(cfg: &SdzeConfig, problem: &PdeProblem, params: MlpParams) -> Result<History> {
    train_with(cfg, problem, params, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jets::Activation;

    #[test]
    fn schedule_formulas() {
        let a = LrSchedule::Annealed { gamma: 1.0, m: 0.0, p: 1.0 };
        assert_eq!(lr_schedule(&a, 1, 0).unwrap(), 1.0);
        assert!((lr_schedule(&a, 3, 0).unwrap() - 1.0 / 3.0).abs() < 1e-16);
        assert_eq!(lr_schedule(&LrSchedule::SqrtTq { c: 1.0 }, 4, 4).unwrap(), 0.25);
        assert_eq!(lr_schedule(&LrSchedule::Constant { alpha: 0.1 }, 0, 0).unwrap(), 0.1);
    }

    #[test]
    fn schedule_rejects_bad_exponent() {
        let a = LrSchedule::Annealed { gamma: 1.0, m: 0.0, p: 0.4 };
        assert!(matches!(lr_schedule(&a, 1, 0), Err(SdzeError::Config(_))));
        let a = LrSchedule::Annealed { gamma: 1.0, m: 0.0, p: 1.1 };
        assert!(a.validate().is_err());
    }

    struct Quadratic {
        h: Array2<f64>,
    }

    impl Objective for Quadratic {
        fn loss(&self, view: &PerturbView, _t: u64, _alt: bool, ledger: &AllocationLedger) -> Result<f64> {
            let mut p = view.params.clone();
            if view.sign != Sign::Zero {
                let s = view.sign.factor() * view.eps;
                for ((w, sub), z) in p.layers.iter_mut().zip(view.subspaces).zip(view.cores) {
                    apply_rank_r_update(w, sub, z, s, ledger)?;
                }
            }
            let th = ndarray::Array1::from(p.flatten());
            Ok(th.dot(&self.h.dot(&th)))
        }

        fn replay(&self, t: u64) -> String {
            format!("quadratic step {t}")
        }
    }

    fn small_cfg(eps: f64) -> SdzeConfig {
        SdzeConfig {
            master: 5,
            eps,
            lr: LrSchedule::Constant { alpha: 0.01 },
            steps: 3,
            rank: 2,
            rank_per_layer: None,
            freq: 2,
            batch_points: 4,
            batch_dims: 2,
            crns: true,
            eval_every: 1,
            test_points: 16,
            timing: false,
        }
    }

    #[test]
    fn quadratic_delta_is_eps_independent() {
        let params = MlpParams::init(1, 4, &[4], Activation::Sin, false).unwrap();
        let p = params.param_count();
        let h = Array2::from_shape_fn((p, p), |(i, j)| if i == j { 1.0 + i as f64 * 0.1 } else { 0.0 });
        let q = Quadratic { h };
        let deltas: Vec<f64> = [1e-1, 1e-3]
            .iter()
            .map(|&eps| {
                let cfg = small_cfg(eps);
                let subs = cfg.subspaces_at(&params, 0).unwrap();
                let cores = step_cores(cfg.master, 1, &subs).unwrap();
                directional_estimate(&params, &subs, &cores, &q, eps, 1, true, &AllocationLedger::new())
                    .unwrap()
                    .delta_hat
            })
            .collect();
        assert!((deltas[0] - deltas[1]).abs() <= 1e-7 * deltas[0].abs().max(1.0));
    }

    #[test]
    fn step_requires_matching_mode() {
        let mut params = MlpParams::init(1, 4, &[4], Activation::Sin, false).unwrap();
        let cfg = small_cfg(1e-3);
        let mut subs = cfg.subspaces_at(&params, 0).unwrap();
        let q = Quadratic { h: Array2::eye(params.param_count()) };
        let l = AllocationLedger::new();
        assert!(sdze_step_naive(&mut params, &mut subs, &q, &cfg, 1, &l).is_err());
        assert!(sdze_step(&mut params, &mut subs, &q, &cfg, 1, &l).is_ok());
    }

    #[test]
    fn zero_steps_gives_empty_history() {
        let problem = PdeProblem::new(
            1,
            4,
            crate::spatial::Nonlinearity::None,
            crate::spatial::SolutionKind::TwoBody,
            crate::spatial::Normalization::Raw,
        )
        .unwrap();
        let params = MlpParams::init(1, 4, &[4], Activation::Sin, false).unwrap();
        let mut cfg = small_cfg(1e-3);
        cfg.steps = 0;
        let h = train(&cfg, &problem, params).unwrap();
        assert!(h.records.is_empty());
        assert_eq!(h.initial_rel_l2, h.final_rel_l2);
    }

    #[test]
    fn rank_is_clamped_per_layer() {
        let mut cfg = small_cfg(1e-3);
        cfg.rank = 16;
        assert_eq!(cfg.layer_rank(2, (128, 1)).unwrap(), 8);
        assert_eq!(cfg.layer_rank(1, (128, 128)).unwrap(), 16);
        cfg.rank_per_layer = Some(vec![3]);
        assert!(cfg.layer_rank(1, (4, 4)).is_err());
    }
}
