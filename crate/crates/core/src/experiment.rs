//! Risk estimation, method comparison and the experiment config format.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{self, BaselineError, KrrConfig, NnConfig};
use crate::model::{ModelError, ModelParams};
use crate::pretrain::{self, SgdConfig, Stage2Solver, TrainConfig, TrainError, TrainingReport};
use crate::rng::{self, Purpose, Stream};
use crate::scalar::Real;
use crate::task::{sample_examples, sample_task, CoeffScheme, Context, ProblemConfig, TaskError, TaskSpec};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Anything that maps a context and query points to predictions. Predictors
/// only ever see validation prompts.
pub trait Predictor<T: Real>: Sync {
    fn method(&self) -> &str;

    fn predict(&self, ctx: &Context<'_, T>, queries: ArrayView2<'_, T>, rng: &mut Stream)
        -> Result<Array1<T>, ExperimentError>;
}

pub struct Transformer<'a, T>(pub &'a ModelParams<T>);

impl<T: Real> Predictor<T> for Transformer<'_, T> {
    fn method(&self) -> &str {
        "transformer"
    }

    fn predict(&self, ctx: &Context<'_, T>, queries: ArrayView2<'_, T>, _: &mut Stream) -> Result<Array1<T>, ExperimentError> {
        Ok(self.0.predict(ctx, queries)?)
    }
}

pub struct Krr(pub KrrConfig);

impl<T: Real> Predictor<T> for Krr {
    fn method(&self) -> &str {
        "krr"
    }

    fn predict(&self, ctx: &Context<'_, T>, queries: ArrayView2<'_, T>, _: &mut Stream) -> Result<Array1<T>, ExperimentError> {
        Ok(baselines::krr_fit_predict(&self.0, ctx, queries)?)
    }
}

pub struct Network(pub NnConfig);

impl<T: Real> Predictor<T> for Network {
    fn method(&self) -> &str {
        match self.0.optimizer {
            baselines::NnOptimizer::Adam => "nn_adam",
            baselines::NnOptimizer::OneStepGd => "nn_one_step",
        }
    }

    fn predict(&self, ctx: &Context<'_, T>, queries: ArrayView2<'_, T>, rng: &mut Stream) -> Result<Array1<T>, ExperimentError> {
        Ok(baselines::nn_fit_predict(&self.0, ctx, queries, rng)?)
    }
}

/// Predicts 0 everywhere.
pub struct Zero;

impl<T: Real> Predictor<T> for Zero {
    fn method(&self) -> &str {
        "zero"
    }

    fn predict(&self, _: &Context<'_, T>, queries: ArrayView2<'_, T>, _: &mut Stream) -> Result<Array1<T>, ExperimentError> {
        Ok(Array1::zeros(queries.nrows()))
    }
}

/// Fixed validation tasks: one long context per task (shorter contexts are
/// prefixes) and a separate set of queries, shared by every method and
/// context length.
pub struct ValidationSet<T> {
    pub tasks: Vec<TaskSpec<T>>,
    pub contexts: Vec<(Array2<T>, Array1<T>)>,
    pub queries: Vec<(Array2<T>, Array1<T>)>,
    pub tau: f64,
    pub seed: u64,
}

impl<T: Real> ValidationSet<T> {
    pub fn sample(
        problem: &ProblemConfig,
        tasks: usize,
        max_context: usize,
        queries: usize,
        seed: u64,
    ) -> Result<Self, ExperimentError> {
        problem.validate()?;
        if tasks == 0 || queries == 0 || max_context == 0 {
            return Err(ExperimentError::Config("validation needs tasks, queries and context >= 1".into()));
        }
        let drawn: Vec<_> = (0..tasks)
            .into_par_iter()
            .map(|t| {
                let mut r = rng::stream(seed, Purpose::Validation, t as u64);
                let task = sample_task::<T, _>(problem, &mut r).expect("validated problem");
                let ctx = sample_examples(&task, max_context, problem.tau, &mut r);
                let mut rq = rng::stream(seed, Purpose::ValidationQueries, t as u64);
                let q = sample_examples(&task, queries, problem.tau, &mut rq);
                (task, ctx, q)
            })
            .collect();
        let mut out = Self {
            tasks: Vec::with_capacity(tasks),
            contexts: Vec::with_capacity(tasks),
            queries: Vec::with_capacity(tasks),
            tau: problem.tau,
            seed,
        };
        for (t, c, q) in drawn {
            out.tasks.push(t);
            out.contexts.push(c);
            out.queries.push(q);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn max_context(&self) -> usize {
        self.contexts.first().map_or(0, |c| c.1.len())
    }

    pub fn context(&self, task: usize, n: usize) -> Context<'_, T> {
        let (x, y) = &self.contexts[task];
        Context { x: x.view(), y: y.view() }.prefix(n)
    }
}

/// Mean absolute error and its task-clustered standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Score `f(task_index, context, queries)` on the first `n_star` examples of
/// every validation context. The standard error treats the per-task mean
/// error as the unit of replication.
pub fn estimate_risk_by<T, F>(set: &ValidationSet<T>, n_star: usize, f: F) -> Result<RiskEstimate, ExperimentError>
where
    T: Real,
    F: Fn(usize, &Context<'_, T>, ArrayView2<'_, T>) -> Result<Array1<T>, ExperimentError> + Sync,
{
    if set.is_empty() {
        return Err(ExperimentError::Config("empty validation set".into()));
    }
    if n_star == 0 || n_star > set.max_context() {
        return Err(ExperimentError::Config(format!(
            "context length {n_star} outside 1..={}",
            set.max_context()
        )));
    }
    let per_task: Vec<f64> = (0..set.len())
        .into_par_iter()
        .map(|t| {
            let ctx = set.context(t, n_star);
            let (qx, qy) = &set.queries[t];
            let pred = f(t, &ctx, qx.view())?;
            let s: f64 = pred.iter().zip(qy).map(|(p, y)| (*p - *y).abs().as_f64()).sum();
            Ok(s / qy.len() as f64)
        })
        .collect::<Result<_, ExperimentError>>()?;
    let n = per_task.len() as f64;
    let mean = per_task.iter().sum::<f64>() / n;
    let var = per_task.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(RiskEstimate {
        mean,
        stderr: (var / n).sqrt(),
    })
}

/// In-context risk of a predictor at context length `n_star`. Randomized
/// predictors get stream `(seed, Baseline, task)` salted by `n_star`.
pub fn estimate_icl_risk<T: Real, P: Predictor<T> + ?Sized>(
    predictor: &P,
    set: &ValidationSet<T>,
    n_star: usize,
    seed: u64,
) -> Result<RiskEstimate, ExperimentError> {
    let salt = rng::derive_seed(seed, n_star as u64);
    estimate_risk_by(set, n_star, |t, ctx, q| {
        let mut r = rng::stream(salt, Purpose::Baseline, t as u64);
        predictor.predict(ctx, q, &mut r)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskPoint {
    pub context_length: usize,
    pub risk_mean: f64,
    pub risk_stderr: f64,
    pub excess_risk: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskCurve {
    pub method: String,
    pub config_hash: String,
    pub seed: u64,
    pub d: usize,
    pub r: usize,
    pub q: u32,
    pub p: u32,
    pub m: usize,
    /// Sorted by context length.
    pub points: Vec<RiskPoint>,
}

impl RiskCurve {
    pub fn at(&self, context_length: usize) -> Option<&RiskPoint> {
        self.points.iter().find(|p| p.context_length == context_length)
    }

    /// Whether each step to a longer context raises the risk by at most `k`
    /// joint standard errors.
    pub fn is_non_increasing_within(&self, k: f64) -> bool {
        self.points.windows(2).all(|w| {
            let joint = (w[0].risk_stderr.powi(2) + w[1].risk_stderr.powi(2)).sqrt();
            w[1].risk_mean <= w[0].risk_mean + k * joint
        })
    }
}

/// Identifies a curve within a run.
#[derive(Debug, Clone)]
pub struct CurveMeta {
    pub config_hash: String,
    pub seed: u64,
    pub problem: ProblemConfig,
    pub m: usize,
}

pub fn risk_curve<T: Real, P: Predictor<T> + ?Sized>(
    predictor: &P,
    set: &ValidationSet<T>,
    grid: &[usize],
    meta: &CurveMeta,
) -> Result<RiskCurve, ExperimentError> {
    let mut grid = grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let mut points = Vec::with_capacity(grid.len());
    for &n in &grid {
        let start = Instant::now();
        let est = estimate_icl_risk(predictor, set, n, meta.seed)?;
        points.push(RiskPoint {
            context_length: n,
            risk_mean: est.mean,
            risk_stderr: est.stderr,
            excess_risk: est.mean - set.tau,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(RiskCurve {
        method: predictor.method().to_string(),
        config_hash: meta.config_hash.clone(),
        seed: meta.seed,
        d: meta.problem.d,
        r: meta.problem.r,
        q: meta.problem.q,
        p: meta.problem.p,
        m: meta.m,
        points,
    })
}

/// One CSV row. Field order is the file's column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CsvRow {
    config_hash: String,
    seed: u64,
    method: String,
    d: usize,
    r: usize,
    #[serde(rename = "Q")]
    q: u32,
    #[serde(rename = "P")]
    p: u32,
    m: usize,
    context_length: usize,
    risk_mean: f64,
    risk_stderr: f64,
    excess_risk: f64,
    wall_ms: f64,
}

pub const CSV_HEADER: &str = "config_hash,seed,method,d,r,Q,P,m,context_length,risk_mean,risk_stderr,excess_risk,wall_ms";

pub fn write_curves_csv<W: Write>(curves: &[RiskCurve], out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    if curves.iter().all(|c| c.points.is_empty()) {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for c in curves {
        for p in &c.points {
            w.serialize(CsvRow {
                config_hash: c.config_hash.clone(),
                seed: c.seed,
                method: c.method.clone(),
                d: c.d,
                r: c.r,
                q: c.q,
                p: c.p,
                m: c.m,
                context_length: p.context_length,
                risk_mean: p.risk_mean,
                risk_stderr: p.risk_stderr,
                excess_risk: p.excess_risk,
                wall_ms: p.wall_ms,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parse curves written by [`write_curves_csv`]. Rows are grouped by
/// `(config_hash, seed, method, d, r, Q, P, m)` in order of first appearance.
pub fn read_curves_csv<R: Read>(input: R) -> Result<Vec<RiskCurve>, ExperimentError> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(ExperimentError::Config(format!("unexpected csv header '{}'", header.join(","))));
    }
    let mut curves: Vec<RiskCurve> = Vec::new();
    for row in rd.deserialize::<CsvRow>() {
        let row = row?;
        let point = RiskPoint {
            context_length: row.context_length,
            risk_mean: row.risk_mean,
            risk_stderr: row.risk_stderr,
            excess_risk: row.excess_risk,
            wall_ms: row.wall_ms,
        };
        let found = curves.iter_mut().find(|c| {
            c.config_hash == row.config_hash
                && c.seed == row.seed
                && c.method == row.method
                && (c.d, c.r, c.q, c.p, c.m) == (row.d, row.r, row.q, row.p, row.m)
        });
        match found {
            Some(c) => c.points.push(point),
            None => curves.push(RiskCurve {
                method: row.method,
                config_hash: row.config_hash,
                seed: row.seed,
                d: row.d,
                r: row.r,
                q: row.q,
                p: row.p,
                m: row.m,
                points: vec![point],
            }),
        }
    }
    for c in &mut curves {
        c.points.sort_by_key(|p| p.context_length);
    }
    Ok(curves)
}

/// `round(2^{k/2})` for `k = 9..=18`: 23 up to 512.
pub fn default_context_grid() -> Vec<usize> {
    (9..=18).map(|k| 2f64.powf(f64::from(k) / 2.0).round() as usize).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Every knob of a run, read from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub d: usize,
    pub r: usize,
    pub q: u32,
    pub p: u32,
    pub tau: f64,
    pub coeffs: CoeffScheme,
    pub rotation_seed: Option<u64>,
    pub m: usize,
    pub t1: usize,
    pub n1: usize,
    pub t2: usize,
    pub n2: usize,
    pub eta1: Option<f64>,
    pub gamma: Option<f64>,
    pub c_eta: f64,
    pub c_gamma: f64,
    pub lambda2: f64,
    pub eta1_autoscale: bool,
    pub solver: Stage2Solver,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub sgd_batch: usize,
    pub sgd_step: f64,
    pub sgd_epochs: usize,
    pub precision: Precision,
    pub n_star: Vec<usize>,
    pub val_tasks: usize,
    pub val_queries: usize,
    pub krr_bandwidth_sq: Option<f64>,
    pub krr_ridge: f64,
    pub nn_width: usize,
    pub nn_one_step_lr: Option<f64>,
    pub nn_ridge: f64,
    pub d_list: Vec<usize>,
    pub r_list: Vec<usize>,
    pub seed: Option<u64>,
}

impl Default for ExperimentConfig {
    /// The desk-scale simplified-architecture comparison.
    fn default() -> Self {
        let base = TrainConfig::desk(ProblemConfig::new(32, 2, 2, 2, 0.0, CoeffScheme::he2_link()), 0);
        Self {
            d: 32,
            r: 2,
            q: 2,
            p: 2,
            tau: 0.0,
            coeffs: CoeffScheme::he2_link(),
            rotation_seed: None,
            m: base.m,
            t1: base.t1,
            n1: base.n1,
            t2: base.t2,
            n2: base.n2,
            eta1: None,
            gamma: None,
            c_eta: base.c_eta,
            c_gamma: base.c_gamma,
            lambda2: base.lambda2,
            eta1_autoscale: false,
            solver: base.solver,
            cg_tol: base.cg_tol,
            cg_max_iter: base.cg_max_iter,
            sgd_batch: base.sgd.batch,
            sgd_step: base.sgd.step,
            sgd_epochs: base.sgd.epochs,
            precision: Precision::F64,
            n_star: default_context_grid(),
            val_tasks: 128,
            val_queries: 128,
            krr_bandwidth_sq: None,
            krr_ridge: KrrConfig::default().ridge,
            nn_width: base.m,
            nn_one_step_lr: None,
            nn_ridge: NnConfig::adam().second_layer_ridge,
            d_list: vec![16, 32],
            r_list: vec![2],
            seed: None,
        }
    }
}

fn parse_list(v: &str) -> Result<Vec<usize>, String> {
    v.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| format!("'{s}': {e}")))
        .collect()
}

fn parse_opt<X: std::str::FromStr>(v: &str) -> Result<Option<X>, String>
where
    X::Err: std::fmt::Display,
{
    if v == "auto" || v == "none" {
        Ok(None)
    } else {
        v.parse().map(Some).map_err(|e| format!("'{v}': {e}"))
    }
}

fn parse_coeffs(v: &str) -> Result<CoeffScheme, String> {
    match v {
        "sphere" => Ok(CoeffScheme::SphereNormalized),
        "he2" => Ok(CoeffScheme::he2_link()),
        _ => match v.strip_prefix("fixed:") {
            Some(list) => list
                .split(';')
                .map(|s| s.trim().parse::<f64>().map_err(|e| format!("'{s}': {e}")))
                .collect::<Result<_, _>>()
                .map(CoeffScheme::Fixed),
            None => Err(format!("unknown coeffs '{v}' (sphere|he2|fixed:c_Q;...;c_P)")),
        },
    }
}

fn show_opt<X: std::fmt::Display>(v: &Option<X>) -> String {
    v.as_ref().map_or("auto".to_string(), ToString::to_string)
}

fn show_list(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "d", "r", "q", "p", "tau", "coeffs", "rotation_seed", "m", "t1", "n1", "t2", "n2", "eta1", "gamma", "c_eta",
        "c_gamma", "lambda2", "eta1_autoscale", "solver", "cg_tol", "cg_max_iter", "sgd_batch", "sgd_step",
        "sgd_epochs", "precision", "n_star", "val_tasks", "val_queries", "krr_bandwidth_sq", "krr_ridge", "nn_width",
        "nn_one_step_lr", "nn_ridge", "d_list", "r_list", "seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ExperimentError> {
        let v = value.trim();
        let num = |s: &str| -> Result<f64, String> { s.parse::<f64>().map_err(|e| format!("'{s}': {e}")) };
        let int = |s: &str| -> Result<usize, String> { s.parse::<usize>().map_err(|e| format!("'{s}': {e}")) };
        let res: Result<(), String> = (|| {
            match key {
                "d" => self.d = int(v)?,
                "r" => self.r = int(v)?,
                "q" => self.q = int(v)? as u32,
                "p" => self.p = int(v)? as u32,
                "tau" => self.tau = num(v)?,
                "coeffs" => self.coeffs = parse_coeffs(v)?,
                "rotation_seed" => self.rotation_seed = parse_opt(v)?,
                "m" => self.m = int(v)?,
                "t1" => self.t1 = int(v)?,
                "n1" => self.n1 = int(v)?,
                "t2" => self.t2 = int(v)?,
                "n2" => self.n2 = int(v)?,
                "eta1" => self.eta1 = parse_opt(v)?,
                "gamma" => self.gamma = parse_opt(v)?,
                "c_eta" => self.c_eta = num(v)?,
                "c_gamma" => self.c_gamma = num(v)?,
                "lambda2" => self.lambda2 = num(v)?,
                "eta1_autoscale" => self.eta1_autoscale = v.parse().map_err(|e| format!("'{v}': {e}"))?,
                "solver" => self.solver = v.parse()?,
                "cg_tol" => self.cg_tol = num(v)?,
                "cg_max_iter" => self.cg_max_iter = int(v)?,
                "sgd_batch" => self.sgd_batch = int(v)?,
                "sgd_step" => self.sgd_step = num(v)?,
                "sgd_epochs" => self.sgd_epochs = int(v)?,
                "precision" => {
                    self.precision = match v {
                        "f32" => Precision::F32,
                        "f64" => Precision::F64,
                        _ => return Err(format!("unknown precision '{v}' (f32|f64)")),
                    }
                }
                "n_star" => self.n_star = parse_list(v)?,
                "val_tasks" => self.val_tasks = int(v)?,
                "val_queries" => self.val_queries = int(v)?,
                "krr_bandwidth_sq" => self.krr_bandwidth_sq = parse_opt(v)?,
                "krr_ridge" => self.krr_ridge = num(v)?,
                "nn_width" => self.nn_width = int(v)?,
                "nn_one_step_lr" => self.nn_one_step_lr = parse_opt(v)?,
                "nn_ridge" => self.nn_ridge = num(v)?,
                "d_list" => self.d_list = parse_list(v)?,
                "r_list" => self.r_list = parse_list(v)?,
                "seed" => self.seed = parse_opt(v)?,
                _ => return Err(format!("unknown key '{key}'")),
            }
            Ok(())
        })();
        res.map_err(|e| ExperimentError::Config(format!("{key}: {e}")))
    }

    /// Apply a `key = value` file on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ExperimentError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split_once('#').map_or(line, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ExperimentError::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "d" => self.d.to_string(),
            "r" => self.r.to_string(),
            "q" => self.q.to_string(),
            "p" => self.p.to_string(),
            "tau" => self.tau.to_string(),
            "coeffs" => match &self.coeffs {
                CoeffScheme::SphereNormalized => "sphere".into(),
                CoeffScheme::Fixed(c) => {
                    format!("fixed:{}", c.iter().map(ToString::to_string).collect::<Vec<_>>().join(";"))
                }
            },
            "rotation_seed" => show_opt(&self.rotation_seed),
            "m" => self.m.to_string(),
            "t1" => self.t1.to_string(),
            "n1" => self.n1.to_string(),
            "t2" => self.t2.to_string(),
            "n2" => self.n2.to_string(),
            "eta1" => show_opt(&self.eta1),
            "gamma" => show_opt(&self.gamma),
            "c_eta" => self.c_eta.to_string(),
            "c_gamma" => self.c_gamma.to_string(),
            "lambda2" => self.lambda2.to_string(),
            "eta1_autoscale" => self.eta1_autoscale.to_string(),
            "solver" => match self.solver {
                Stage2Solver::Direct => "direct",
                Stage2Solver::Cg => "cg",
                Stage2Solver::Sgd => "sgd",
            }
            .into(),
            "cg_tol" => self.cg_tol.to_string(),
            "cg_max_iter" => self.cg_max_iter.to_string(),
            "sgd_batch" => self.sgd_batch.to_string(),
            "sgd_step" => self.sgd_step.to_string(),
            "sgd_epochs" => self.sgd_epochs.to_string(),
            "precision" => match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            }
            .into(),
            "n_star" => show_list(&self.n_star),
            "val_tasks" => self.val_tasks.to_string(),
            "val_queries" => self.val_queries.to_string(),
            "krr_bandwidth_sq" => show_opt(&self.krr_bandwidth_sq),
            "krr_ridge" => self.krr_ridge.to_string(),
            "nn_width" => self.nn_width.to_string(),
            "nn_one_step_lr" => show_opt(&self.nn_one_step_lr),
            "nn_ridge" => self.nn_ridge.to_string(),
            "d_list" => show_list(&self.d_list),
            "r_list" => show_list(&self.r_list),
            "seed" => show_opt(&self.seed),
            _ => return None,
        })
    }

    /// Every key in a fixed order; parsing this text gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    /// First 16 hex digits of SHA-256 over every key except `seed`.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for k in Self::KEYS.iter().filter(|k| **k != "seed") {
            h.update(format!("{k}={}\n", self.get(k).expect("listed key")));
        }
        h.finalize().iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn seed(&self) -> Result<u64, ExperimentError> {
        self.seed.ok_or_else(|| ExperimentError::Config("seed is required".into()))
    }

    pub fn problem(&self) -> Result<ProblemConfig, ExperimentError> {
        let mut p = ProblemConfig::new(self.d, self.r, self.q, self.p, self.tau, self.coeffs.clone());
        if let Some(s) = self.rotation_seed {
            p = p.with_rotation(s);
        }
        p.validate()?;
        Ok(p)
    }

    pub fn train_config(&self) -> Result<TrainConfig, ExperimentError> {
        let mut t = TrainConfig::new(self.problem()?, self.m, self.t1, self.n1, self.t2, self.n2, self.seed()?);
        t.eta1 = self.eta1;
        t.gamma = self.gamma;
        t.c_eta = self.c_eta;
        t.c_gamma = self.c_gamma;
        t.lambda2 = self.lambda2;
        t.eta1_autoscale = self.eta1_autoscale;
        t.solver = self.solver;
        t.cg_tol = self.cg_tol;
        t.cg_max_iter = self.cg_max_iter;
        t.sgd = SgdConfig {
            batch: self.sgd_batch,
            step: self.sgd_step,
            epochs: self.sgd_epochs,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn krr(&self) -> KrrConfig {
        KrrConfig {
            bandwidth_sq: self.krr_bandwidth_sq,
            ridge: self.krr_ridge,
            ..KrrConfig::default()
        }
    }

    pub fn one_step_nn(&self) -> NnConfig {
        NnConfig {
            one_step_lr: self.nn_one_step_lr,
            second_layer_ridge: self.nn_ridge,
            ..NnConfig::one_step(self.nn_width)
        }
    }

    pub fn with_dims(&self, d: usize, r: usize) -> Self {
        Self { d, r, ..self.clone() }
    }

    fn meta(&self) -> Result<CurveMeta, ExperimentError> {
        Ok(CurveMeta {
            config_hash: self.hash(),
            seed: self.seed()?,
            problem: self.problem()?,
            m: self.m,
        })
    }

    fn validation<T: Real>(&self) -> Result<ValidationSet<T>, ExperimentError> {
        let max = *self
            .n_star
            .iter()
            .max()
            .ok_or_else(|| ExperimentError::Config("n_star grid is empty".into()))?;
        ValidationSet::sample(&self.problem()?, self.val_tasks, max, self.val_queries, self.seed()?)
    }
}

/// Curves of several predictors on one shared validation set.
pub fn compare_methods<T: Real>(
    cfg: &ExperimentConfig,
    predictors: &[&dyn Predictor<T>],
) -> Result<Vec<RiskCurve>, ExperimentError> {
    let set = cfg.validation::<T>()?;
    let meta = cfg.meta()?;
    predictors.iter().map(|p| risk_curve(*p, &set, &cfg.n_star, &meta)).collect()
}

pub struct F2Result<T> {
    pub model: ModelParams<T>,
    pub report: TrainingReport,
    /// transformer, krr, nn_one_step
    pub curves: Vec<RiskCurve>,
}

/// Evaluate a pretrained transformer against kernel ridge regression and a
/// one-step-trained network.
pub fn f2_curves<T: Real>(cfg: &ExperimentConfig, model: &ModelParams<T>) -> Result<Vec<RiskCurve>, ExperimentError> {
    let tf = Transformer(model);
    let krr = Krr(cfg.krr());
    let nn = Network(cfg.one_step_nn());
    compare_methods(cfg, &[&tf, &krr, &nn])
}

/// Pretrain once, then compare the three methods across the context grid.
pub fn run_f2_comparison<T: Real>(cfg: &ExperimentConfig) -> Result<F2Result<T>, ExperimentError> {
    let (model, report) = pretrain::pretrain::<T>(&cfg.train_config()?)?;
    let curves = f2_curves(cfg, &model)?;
    Ok(F2Result { model, report, curves })
}

/// One pretraining per `(d, r)`; transformer and kernel ridge curves for
/// each.
pub fn run_dimension_sweep<T: Real>(cfg: &ExperimentConfig) -> Result<Vec<RiskCurve>, ExperimentError> {
    let mut out = Vec::new();
    for &r in &cfg.r_list {
        for &d in &cfg.d_list {
            if r > d {
                return Err(ExperimentError::Config(format!("r = {r} exceeds d = {d}")));
            }
            let sub = cfg.with_dims(d, r);
            let (model, _) = pretrain::pretrain::<T>(&sub.train_config()?)?;
            let tf = Transformer(&model);
            let krr = Krr(sub.krr());
            out.extend(compare_methods(&sub, &[&tf, &krr])?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn context_grid() {
        assert_eq!(default_context_grid(), vec![23, 32, 45, 64, 91, 128, 181, 256, 362, 512]);
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.apply_text("# comment\nseed = 9\ncoeffs = fixed:1.5;-0.25\neta1 = 3.5\nn_star = 8,16\n").unwrap();
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut other = c.clone();
        other.seed = Some(10);
        assert_eq!(other.hash(), c.hash());
        other.m = 7;
        assert_ne!(other.hash(), c.hash());
        assert!(ExperimentConfig::parse("bogus = 1").is_err());
        assert!(ExperimentConfig::parse("m = -3").is_err());
        assert!(ExperimentConfig::parse("just text").is_err());
        let inline = ExperimentConfig::parse("m = 12   # width\ncoeffs = sphere # or he2\n").unwrap();
        assert_eq!((inline.m, inline.coeffs.clone()), (12, CoeffScheme::SphereNormalized));
    }
}
