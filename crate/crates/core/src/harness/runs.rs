use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::RunConfig;
use super::metrics::{MetricsWriter, TrainRow};
use super::suites::{run_suite, Suite};
use super::worker_pool;
use crate::error::{invalid, Result, SdzeError};
use crate::optimizer::{continue_training, Trainer};
use crate::verify::{crns_variance_sweep, delta_hat_moments, CrnsSweep, IdentityReport};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_ECHO: &str = "config.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:08}.ckpt"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub config_hash: String,
    pub start_step: u64,
    pub steps: u64,
    pub initial_rel_l2: f64,
    pub final_rel_l2: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Train per `cfg` into `out`: config echo, metrics CSV, checkpoints and a
/// summary. With `resume`, training continues from that checkpoint and the
/// CSV holds only the steps run here.
pub fn run_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    fs::create_dir_all(out.join("checkpoints"))?;
    fs::write(out.join(CONFIG_ECHO), cfg.to_json_pretty() + "\n")?;
    let problem = cfg.problem()?;
    let sdze = cfg.sdze_config();
    let hash = cfg.hash();

    let mut trainer = match resume {
        None => {
            let params = cfg.init_params()?;
            save_checkpoint(&checkpoint_path(out, 0), &params, 0, cfg.seed)?;
            Trainer::new(sdze, params)?
        }
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.seed != cfg.seed {
                return Err(SdzeError::Checkpoint(format!("checkpoint seed {} does not match config seed {}", ck.seed, cfg.seed)));
            }
            let expected: Vec<_> = cfg.init_params()?.layers.iter().map(|w| w.dim()).collect();
            let found: Vec<_> = ck.layers.iter().map(|w| w.dim()).collect();
            if expected != found {
                return Err(SdzeError::Checkpoint(format!("checkpoint layers {found:?} do not match config {expected:?}")));
            }
            let step = ck.step;
            Trainer::resume(sdze, ck.into_params(cfg.activation()?, cfg.net.biased)?, step)?
        }
    };
    let start_step = trainer.step;
    let mut csv = MetricsWriter::create(&out.join(METRICS_FILE), cfg.seed, &hash)?;
    let history = continue_training(&mut trainer, &problem, |tr, rec| {
        csv.row(&TrainRow::from(rec))?;
        if cfg.checkpoint_every > 0 && rec.step % cfg.checkpoint_every == 0 {
            save_checkpoint(&checkpoint_path(out, rec.step), &tr.params, rec.step, cfg.seed)?;
        }
        Ok(())
    })?;
    csv.finish()?;
    save_checkpoint(&out.join(FINAL_CHECKPOINT), &trainer.params, trainer.step, cfg.seed)?;
    let summary = TrainSummary {
        seed: cfg.seed,
        config_hash: hash,
        start_step,
        steps: trainer.step,
        initial_rel_l2: history.initial_rel_l2,
        final_rel_l2: history.final_rel_l2,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub rank: usize,
    #[serde(rename = "freq_F")]
    pub freq: u64,
    pub initial_rel_l2: f64,
    pub final_rel_l2: f64,
}

/// Spread of final relative L2 across ranks (worst over frequencies) and
/// across frequencies (worst over ranks).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Robustness {
    pub rank_spread: f64,
    pub freq_spread: f64,
    pub rank_robust: bool,
}

fn spread<I: Iterator<Item = f64>>(it: I) -> f64 {
    let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo.is_finite() {
        hi - lo
    } else {
        0.0
    }
}

/// Largest within-group spread, grouping rows by `key`.
fn worst_spread(rows: &[GridRow], key: impl Fn(&GridRow) -> u64) -> f64 {
    let mut groups: Vec<u64> = rows.iter().map(&key).collect();
    groups.sort_unstable();
    groups.dedup();
    groups
        .iter()
        .map(|g| spread(rows.iter().filter(|r| key(r) == *g).map(|r| r.final_rel_l2)))
        .fold(0.0, f64::max)
}

pub fn robustness(rows: &[GridRow]) -> Robustness {
    let rank_spread = worst_spread(rows, |r| r.freq);
    let freq_spread = worst_spread(rows, |r| r.rank as u64);
    Robustness {
        rank_spread,
        freq_spread,
        rank_robust: rank_spread <= freq_spread,
    }
}

/// Every `(r, F)` cell trained from the same initialization, one subdirectory each.
pub fn run_sweep_rank_freq(cfg: &RunConfig, ranks: &[usize], freqs: &[u64], out: &Path) -> Result<(Vec<GridRow>, Robustness)> {
    if ranks.is_empty() || freqs.is_empty() {
        return invalid("rank and frequency grids must be non-empty");
    }
    fs::create_dir_all(out)?;
    let cells: Vec<(usize, u64)> = ranks.iter().flat_map(|&r| freqs.iter().map(move |&f| (r, f))).collect();
    let results: Vec<Result<GridRow>> = worker_pool()?.install(|| {
        use rayon::prelude::*;
        cells
            .par_iter()
            .map(|&(rank, freq)| {
                let mut c = cfg.clone();
                c.sdze.rank = rank;
                c.sdze.rank_per_layer = None;
                c.sdze.freq = freq;
                let s = run_train(&c, &out.join(format!("r{rank}_F{freq}")), None)?;
                Ok(GridRow {
                    rank,
                    freq,
                    initial_rel_l2: s.initial_rel_l2,
                    final_rel_l2: s.final_rel_l2,
                })
            })
            .collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut csv = MetricsWriter::create(&out.join("grid.csv"), cfg.seed, &cfg.hash())?;
    for r in &rows {
        csv.row(r)?;
    }
    csv.finish()?;
    let rob = robustness(&rows);
    write_json(&out.join("robustness.json"), &rob)?;
    Ok((rows, rob))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchRow {
    #[serde(rename = "batch_points_B")]
    pub batch_points: usize,
    #[serde(rename = "batch_dims_b")]
    pub batch_dims: usize,
    pub delta_hat_variance: f64,
    pub delta_hat_mean: f64,
    pub replicates: u64,
    pub final_rel_l2: f64,
}

/// `(B, b)` pairs sharing one product: `δ̂` spread at the initial parameters,
/// then a short run of `cfg.steps` steps.
pub fn run_sweep_batch(cfg: &RunConfig, pairs: &[(usize, usize)], replicates: u64, out: &Path) -> Result<Vec<BatchRow>> {
    let Some(&(b0, d0)) = pairs.first() else {
        return invalid("batch sweep needs at least one (B, b) pair");
    };
    if let Some(&(b, d)) = pairs.iter().find(|&&(b, d)| b * d != b0 * d0) {
        return invalid(format!("all pairs must share B*b = {}, but {b}x{d} gives {}", b0 * d0, b * d));
    }
    if replicates < 2 {
        return invalid("batch sweep needs at least two replicates");
    }
    fs::create_dir_all(out)?;
    let problem = cfg.problem()?;
    let params = cfg.init_params()?;
    let results: Vec<Result<BatchRow>> = worker_pool()?.install(|| {
        use rayon::prelude::*;
        pairs
            .par_iter()
            .map(|&(bp, bd)| {
                let mut c = cfg.clone();
                c.sdze.batch_points = bp;
                c.sdze.batch_dims = bd;
                let sdze = c.sdze_config();
                sdze.validate()?;
                let (m, _) = delta_hat_moments(&problem, &params, &sdze, &[(sdze.eps, sdze.crns)], replicates)?.remove(0);
                let s = run_train(&c, &out.join(format!("B{bp}_b{bd}")), None)?;
                Ok(BatchRow {
                    batch_points: bp,
                    batch_dims: bd,
                    delta_hat_variance: m.variance(),
                    delta_hat_mean: m.mean,
                    replicates,
                    final_rel_l2: s.final_rel_l2,
                })
            })
            .collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut csv = MetricsWriter::create(&out.join("batch.csv"), cfg.seed, &cfg.hash())?;
    for r in &rows {
        csv.row(r)?;
    }
    csv.finish()?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
struct Slopes {
    crns_slope: f64,
    naive_slope: f64,
}

/// Lock ablation at the configuration's initial parameters.
pub fn run_ablate_crns(cfg: &RunConfig, eps_list: &[f64], replicates: u64, out: &Path) -> Result<CrnsSweep> {
    fs::create_dir_all(out)?;
    let problem = cfg.problem()?;
    let params = cfg.init_params()?;
    let sweep = crns_variance_sweep(&problem, &params, &cfg.sdze_config(), eps_list, replicates)?;
    let mut csv = MetricsWriter::create(&out.join("crns.csv"), cfg.seed, &cfg.hash())?;
    for r in &sweep.rows {
        csv.row(r)?;
    }
    csv.finish()?;
    let slopes = Slopes {
        crns_slope: sweep.crns_slope,
        naive_slope: sweep.naive_slope,
    };
    write_json(&out.join("crns_slopes.json"), &slopes)?;
    Ok(sweep)
}

/// One suite: `<suite>.csv` and `<suite>.json` in `out`.
pub fn run_verify(suite: Suite, seed: u64, out: &Path) -> Result<Vec<IdentityReport>> {
    fs::create_dir_all(out)?;
    let reports = run_suite(suite, seed)?;
    let hash = format!("suite:{suite}");
    let mut csv = MetricsWriter::create(&out.join(format!("{suite}.csv")), seed, &hash)?;
    for r in &reports {
        csv.row(r)?;
    }
    csv.finish()?;
    write_json(&out.join(format!("{suite}.json")), &reports)?;
    Ok(reports)
}
