//! Run configuration loaded from JSON.
//!
//! Validation walks the raw document and collects every problem before
//! giving up, so one failed load names all offending keys by dotted path.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Result, SdzeError};
use crate::jets::Activation;
use crate::net::MlpParams;
use crate::optimizer::{LrSchedule, SdzeConfig};
use crate::spatial::{Nonlinearity, Normalization, PdeProblem, SolutionKind};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PdeBlock {
    pub kind: String,
    pub dim: usize,
    pub solution: String,
    pub normalization: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetBlock {
    /// Hidden widths; input is `pde.dim`, output is 1.
    pub widths: Vec<usize>,
    pub activation: String,
    pub tanh_scale: f64,
    pub biased: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SdzeBlock {
    pub rank: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank_per_layer: Option<Vec<usize>>,
    #[serde(rename = "freq_F")]
    pub freq: u64,
    pub eps: f64,
    pub lr: LrSchedule,
    #[serde(rename = "batch_points_B")]
    pub batch_points: usize,
    #[serde(rename = "batch_dims_b")]
    pub batch_dims: usize,
    pub crns: bool,
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: u64,
    pub eval_every: u64,
    pub test_points: usize,
    /// 0 writes only the initial and final checkpoints.
    pub checkpoint_every: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub pde: PdeBlock,
    pub net: NetBlock,
    pub sdze: SdzeBlock,
}

/// Collects problems while walking the document.
struct Walker {
    errors: Vec<String>,
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

impl Walker {
    fn object<'v>(&mut self, v: Option<&'v Value>, path: &str, allowed: &[&str]) -> Option<&'v Map<String, Value>> {
        match v {
            None => {
                self.errors.push(format!("missing key `{path}`"));
                None
            }
            Some(Value::Object(m)) => {
                for k in m.keys() {
                    if !allowed.contains(&k.as_str()) {
                        self.errors.push(format!("unknown key `{}`", join(path, k)));
                    }
                }
                Some(m)
            }
            Some(_) => {
                self.errors.push(format!("`{}` must be an object", if path.is_empty() { "<root>" } else { path }));
                None
            }
        }
    }

    fn field<T>(
        &mut self,
        obj: Option<&Map<String, Value>>,
        path: &str,
        key: &str,
        default: Option<T>,
        what: &str,
        parse: impl Fn(&Value) -> Option<T>,
    ) -> Option<T> {
        let obj = obj?;
        let full = join(path, key);
        match obj.get(key) {
            None => {
                if default.is_none() {
                    self.errors.push(format!("missing key `{full}`"));
                }
                default
            }
            Some(v) => {
                let out = parse(v);
                if out.is_none() {
                    self.errors.push(format!("`{full}` must be {what}, got {v}"));
                }
                out
            }
        }
    }

    fn u64(&mut self, obj: Option<&Map<String, Value>>, path: &str, key: &str, default: Option<u64>) -> Option<u64> {
        self.field(obj, path, key, default, "a non-negative integer", Value::as_u64)
    }

    fn usize(&mut self, obj: Option<&Map<String, Value>>, path: &str, key: &str, default: Option<usize>) -> Option<usize> {
        self.field(obj, path, key, default, "a non-negative integer", |v| v.as_u64().map(|n| n as usize))
    }

    fn f64(&mut self, obj: Option<&Map<String, Value>>, path: &str, key: &str, default: Option<f64>) -> Option<f64> {
        self.field(obj, path, key, default, "a number", Value::as_f64)
    }

    fn bool(&mut self, obj: Option<&Map<String, Value>>, path: &str, key: &str, default: Option<bool>) -> Option<bool> {
        self.field(obj, path, key, default, "a boolean", Value::as_bool)
    }

    fn tag(
        &mut self,
        obj: Option<&Map<String, Value>>,
        path: &str,
        key: &str,
        default: Option<&str>,
        allowed: &[&str],
    ) -> Option<String> {
        let what = format!("one of {}", allowed.join(", "));
        self.field(obj, path, key, default.map(str::to_string), &what, |v| {
            v.as_str().filter(|s| allowed.contains(s)).map(str::to_string)
        })
    }

    fn usize_list(&mut self, obj: Option<&Map<String, Value>>, path: &str, key: &str) -> Option<Option<Vec<usize>>> {
        let parse = |v: &Value| -> Option<Option<Vec<usize>>> {
            if v.is_null() {
                return Some(None);
            }
            v.as_array()?.iter().map(|x| x.as_u64().map(|n| n as usize)).collect::<Option<Vec<_>>>().map(Some)
        };
        self.field(obj, path, key, Some(None), "a list of non-negative integers", parse)
    }

    fn check(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.errors.push(msg());
        }
    }
}

const ROOT_KEYS: &[&str] = &["seed", "steps", "eval_every", "test_points", "checkpoint_every", "output_dir", "pde", "net", "sdze"];
const PDE_KEYS: &[&str] = &["kind", "dim", "solution", "normalization"];
const NET_KEYS: &[&str] = &["depth", "widths", "activation", "tanh_scale", "biased"];
const SDZE_KEYS: &[&str] = &[
    "rank",
    "rank_per_layer",
    "freq_F",
    "eps",
    "lr",
    "batch_points_B",
    "batch_dims_b",
    "crns",
    "timing",
];

fn lr_block(w: &mut Walker, v: Option<&Value>) -> Option<LrSchedule> {
    let path = "sdze.lr";
    let kind = v.and_then(|v| v.get("schedule")).and_then(Value::as_str);
    let built = match kind {
        Some("constant") => {
            let obj = w.object(v, path, &["schedule", "alpha"]);
            w.f64(obj, path, "alpha", None).map(|alpha| LrSchedule::Constant { alpha })
        }
        Some("annealed") => {
            let obj = w.object(v, path, &["schedule", "gamma", "m", "p"]);
            let gamma = w.f64(obj, path, "gamma", None);
            let m = w.f64(obj, path, "m", Some(0.0));
            let p = w.f64(obj, path, "p", None);
            gamma.zip(m).zip(p).map(|((gamma, m), p)| LrSchedule::Annealed { gamma, m, p })
        }
        Some("sqrt_tq") => {
            let obj = w.object(v, path, &["schedule", "c"]);
            w.f64(obj, path, "c", None).map(|c| LrSchedule::SqrtTq { c })
        }
        _ => {
            let obj = w.object(v, path, &["schedule"]);
            w.tag(obj, path, "schedule", None, &["constant", "annealed", "sqrt_tq"]);
            None
        }
    };
    if let Some(Err(e)) = built.as_ref().map(LrSchedule::validate) {
        w.errors.push(format!("`{path}`: {e}"));
    }
    built
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text)?;
        Self::from_value(&doc)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SdzeError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn from_value(doc: &Value) -> Result<Self> {
        let mut w = Walker { errors: Vec::new() };
        let root = w.object(Some(doc), "", ROOT_KEYS);
        let seed = w.u64(root, "", "seed", Some(0));
        let steps = w.u64(root, "", "steps", None);
        let eval_every = w.u64(root, "", "eval_every", Some(0));
        let test_points = w.usize(root, "", "test_points", Some(1000));
        let checkpoint_every = w.u64(root, "", "checkpoint_every", Some(0));
        let output_dir = w.field(root, "", "output_dir", Some(None), "a string or null", |v| match v {
            Value::Null => Some(None),
            Value::String(s) => Some(Some(PathBuf::from(s))),
            _ => None,
        });

        let pde = root.and_then(|r| w.object(r.get("pde"), "pde", PDE_KEYS));
        let kind = w.tag(pde, "pde", "kind", Some("poisson"), &["poisson", "allen_cahn", "sine_gordon"]);
        let dim = w.usize(pde, "pde", "dim", None);
        let solution = w.tag(pde, "pde", "solution", Some("two_body"), &["two_body", "three_body"]);
        let normalization = w.tag(pde, "pde", "normalization", Some("dim_normalized"), &["raw", "dim_normalized"]);

        let net = root.and_then(|r| w.object(r.get("net"), "net", NET_KEYS));
        let widths = w.field(net, "net", "widths", None, "a non-empty list of positive integers", |v| {
            let ws = v.as_array()?.iter().map(|x| x.as_u64().map(|n| n as usize)).collect::<Option<Vec<_>>>()?;
            (!ws.is_empty() && !ws.contains(&0)).then_some(ws)
        });
        let depth = w.usize(net, "net", "depth", Some(0));
        if let (Some(ws), Some(dp)) = (&widths, depth) {
            w.check(dp == 0 || dp == ws.len() + 1, || {
                format!("`net.depth` is {dp} but `net.widths` gives {} layers", ws.len() + 1)
            });
        }
        let activation = w.tag(net, "net", "activation", Some("sin"), &["sin", "tanh"]);
        let tanh_scale = w.f64(net, "net", "tanh_scale", Some(1.0));
        let biased = w.bool(net, "net", "biased", Some(false));

        let sd = root.and_then(|r| w.object(r.get("sdze"), "sdze", SDZE_KEYS));
        let rank = w.usize(sd, "sdze", "rank", None);
        let rank_per_layer = w.usize_list(sd, "sdze", "rank_per_layer");
        let freq = w.u64(sd, "sdze", "freq_F", None);
        let eps = w.f64(sd, "sdze", "eps", None);
        let lr = match sd {
            Some(m) => lr_block(&mut w, m.get("lr")),
            None => None,
        };
        let batch_points = w.usize(sd, "sdze", "batch_points_B", None);
        let batch_dims = w.usize(sd, "sdze", "batch_dims_b", None);
        let crns = w.bool(sd, "sdze", "crns", Some(true));
        let timing = w.bool(sd, "sdze", "timing", Some(false));

        if let Some(f) = freq {
            w.check(f >= 1, || "`sdze.freq_F` must be >= 1".to_string());
        }
        if let Some(e) = eps {
            w.check(e > 0.0 && e.is_finite(), || format!("`sdze.eps` must be > 0, got {e}"));
        }
        if let Some(r) = rank {
            w.check(r >= 1, || "`sdze.rank` must be >= 1".to_string());
        }
        if let Some(b) = batch_points {
            w.check(b >= 1, || "`sdze.batch_points_B` must be >= 1".to_string());
        }
        if let (Some(b), Some(d)) = (batch_dims, dim) {
            w.check(b >= 1 && b <= d, || format!("`sdze.batch_dims_b` must be in 1..={d}, got {b}"));
        }
        if let (Some(Some(rl)), Some(ws)) = (&rank_per_layer, &widths) {
            w.check(rl.len() == ws.len() + 1, || {
                format!("`sdze.rank_per_layer` needs {} entries, got {}", ws.len() + 1, rl.len())
            });
            w.check(!rl.contains(&0), || "`sdze.rank_per_layer` entries must be >= 1".to_string());
        }
        if let (Some(d), Some(sol)) = (dim, &solution) {
            let need = if sol == "three_body" { 3 } else { 2 };
            w.check(d >= need, || format!("`pde.dim` must be >= {need} for {sol}, got {d}"));
        }
        if let Some(t) = test_points {
            w.check(t >= 1, || "`test_points` must be >= 1".to_string());
        }
        if let Some(c) = tanh_scale {
            w.check(c > 0.0, || format!("`net.tanh_scale` must be > 0, got {c}"));
        }

        if !w.errors.is_empty() {
            return Err(SdzeError::Validation(w.errors));
        }
        let missing = || SdzeError::Validation(vec!["incomplete configuration".to_string()]);
        Ok(RunConfig {
            seed: seed.ok_or_else(missing)?,
            steps: steps.ok_or_else(missing)?,
            eval_every: eval_every.ok_or_else(missing)?,
            test_points: test_points.ok_or_else(missing)?,
            checkpoint_every: checkpoint_every.ok_or_else(missing)?,
            output_dir: output_dir.ok_or_else(missing)?,
            pde: PdeBlock {
                kind: kind.ok_or_else(missing)?,
                dim: dim.ok_or_else(missing)?,
                solution: solution.ok_or_else(missing)?,
                normalization: normalization.ok_or_else(missing)?,
            },
            net: NetBlock {
                widths: widths.ok_or_else(missing)?,
                activation: activation.ok_or_else(missing)?,
                tanh_scale: tanh_scale.ok_or_else(missing)?,
                biased: biased.ok_or_else(missing)?,
            },
            sdze: SdzeBlock {
                rank: rank.ok_or_else(missing)?,
                rank_per_layer: rank_per_layer.ok_or_else(missing)?,
                freq: freq.ok_or_else(missing)?,
                eps: eps.ok_or_else(missing)?,
                lr: lr.ok_or_else(missing)?,
                batch_points: batch_points.ok_or_else(missing)?,
                batch_dims: batch_dims.ok_or_else(missing)?,
                crns: crns.ok_or_else(missing)?,
                timing: timing.ok_or_else(missing)?,
            },
        })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON echo, without `output_dir`, as hex.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let digest = Sha256::digest(serde_json::to_vec(&c).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn problem(&self) -> Result<PdeProblem> {
        PdeProblem::new(
            self.seed,
            self.pde.dim,
            Nonlinearity::parse(&self.pde.kind)?,
            SolutionKind::parse(&self.pde.solution)?,
            Normalization::parse(&self.pde.normalization)?,
        )
    }

    pub fn activation(&self) -> Result<Activation> {
        Activation::parse(&self.net.activation, self.net.tanh_scale)
    }

    pub fn init_params(&self) -> Result<MlpParams> {
        MlpParams::init(self.seed, self.pde.dim, &self.net.widths, self.activation()?, self.net.biased)
    }

    pub fn sdze_config(&self) -> SdzeConfig {
        SdzeConfig {
            master: self.seed,
            eps: self.sdze.eps,
            lr: self.sdze.lr,
            steps: self.steps,
            rank: self.sdze.rank,
            rank_per_layer: self.sdze.rank_per_layer.clone(),
            freq: self.sdze.freq,
            batch_points: self.sdze.batch_points,
            batch_dims: self.sdze.batch_dims,
            crns: self.sdze.crns,
            eval_every: self.eval_every,
            test_points: self.test_points,
            timing: self.sdze.timing,
        }
    }
}
