use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sdze_core::harness::{
    run_ablate_crns, run_sweep_batch, run_sweep_rank_freq, run_train, run_verify, RunConfig, Suite,
};

#[derive(Parser)]
#[command(name = "sdze", version, about = "Backprop-free PINN training with subspace zeroth-order estimates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configuration's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run a verification suite, or `all` of them.
    Verify {
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out/verify")]
        out: PathBuf,
    },
    /// Train every (rank, F) cell of a grid.
    SweepRankFreq {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        ranks: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        freqs: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare (B, b) pairs with a common product, e.g. `100x1,10x10,1x100`.
    SweepBatch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', value_parser = parse_pair, required = true)]
        pairs: Vec<(usize, usize)>,
        #[arg(long, default_value_t = 200)]
        reps: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Variance of the directional derivative with and without the lock.
    AblateCrns {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1e-1,1e-2,1e-3,1e-4")]
        eps: Vec<f64>,
        #[arg(long, default_value_t = 500)]
        reps: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (b, d) = s.split_once('x').ok_or_else(|| format!("expected BxB' like 10x10, got `{s}`"))?;
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("bad number `{t}` in `{s}`: {e}"));
    Ok((num(b)?, num(d)?))
}

fn load(path: &Path) -> Result<RunConfig> {
    RunConfig::from_path(path).with_context(|| format!("loading {}", path.display()))
}

fn out_dir(cfg: &RunConfig, out: Option<PathBuf>, fallback: &str) -> PathBuf {
    out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from(fallback))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, seed, out, resume } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = out_dir(&cfg, out, "out/train");
            let s = run_train(&cfg, &out, resume.as_deref())?;
            println!(
                "trained steps {}..{} seed {} hash {}: rel L2 {:.4e} -> {:.4e} ({})",
                s.start_step,
                s.steps,
                s.seed,
                &s.config_hash[..12],
                s.initial_rel_l2,
                s.final_rel_l2,
                out.display()
            );
            Ok(true)
        }
        Command::Verify { suite, seed, out } => {
            let suites = if suite == "all" { Suite::ALL.to_vec() } else { vec![suite.parse::<Suite>()?] };
            let mut all_pass = true;
            for s in suites {
                let reports = run_verify(s, seed, &out)?;
                for r in &reports {
                    println!(
                        "{} {s}: {} theoretical={:.3e} empirical={:.3e} tol={:.1e}",
                        if r.pass { "PASS" } else { "FAIL" },
                        r.quantity,
                        r.theoretical,
                        r.empirical,
                        r.tolerance
                    );
                    all_pass &= r.pass;
                }
            }
            Ok(all_pass)
        }
        Command::SweepRankFreq { config, ranks, freqs, out } => {
            let cfg = load(&config)?;
            let out = out_dir(&cfg, out, "out/sweep-rank-freq");
            let (rows, rob) = run_sweep_rank_freq(&cfg, &ranks, &freqs, &out)?;
            for r in &rows {
                println!("r={:<4} F={:<6} rel L2 {:.4e} -> {:.4e}", r.rank, r.freq, r.initial_rel_l2, r.final_rel_l2);
            }
            println!(
                "spread over ranks {:.3e}, over frequencies {:.3e}, rank-robust: {}",
                rob.rank_spread, rob.freq_spread, rob.rank_robust
            );
            Ok(true)
        }
        Command::SweepBatch { config, pairs, reps, out } => {
            let cfg = load(&config)?;
            let out = out_dir(&cfg, out, "out/sweep-batch");
            for r in run_sweep_batch(&cfg, &pairs, reps, &out)? {
                println!(
                    "B={:<5} b={:<5} Var(delta)={:.4e} final rel L2 {:.4e}",
                    r.batch_points, r.batch_dims, r.delta_hat_variance, r.final_rel_l2
                );
            }
            Ok(true)
        }
        Command::AblateCrns { config, eps, reps, out } => {
            if eps.iter().any(|e| !(*e > 0.0)) {
                bail!("every eps must be positive");
            }
            let cfg = load(&config)?;
            let out = out_dir(&cfg, out, "out/ablate-crns");
            let sweep = run_ablate_crns(&cfg, &eps, reps, &out)?;
            for r in &sweep.rows {
                println!("{:<5} eps={:.0e} Var={:.4e} non-finite={}", r.mode, r.eps, r.variance, r.non_finite);
            }
            println!("slopes: crns {:.3}, naive {:.3}", sweep.crns_slope, sweep.naive_slope);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
