//! Two-stage pretraining: one gradient step on the MLP weights, then ridge
//! regression on the attention matrix.

use std::time::Instant;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, parallel_pairwise_sum, LinalgError};
use crate::model::{Gamma, ModelError, ModelParams};
use crate::rng::{self, Purpose};
use crate::scalar::Real;
use crate::task::{sample_prompt, sample_task, ProblemConfig, Prompt, TaskError};

/// Largest width for which the primal normal equations are formed.
pub const DIRECT_MAX_WIDTH: usize = 32;

const SAMPLE_BLOCK: usize = 128;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("conjugate gradient did not converge after {iterations} iterations (relative residual {residual:e})")]
    CgNotConverged { iterations: usize, residual: f64 },
    #[error("stage-2 SGD diverged in epoch {epoch} (objective {objective:e})")]
    SgdDiverged { epoch: usize, objective: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage2Solver {
    Direct,
    Cg,
    Sgd,
}

impl std::str::FromStr for Stage2Solver {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "direct" => Ok(Self::Direct),
            "cg" => Ok(Self::Cg),
            "sgd" => Ok(Self::Sgd),
            other => Err(format!("unknown stage-2 solver '{other}' (direct|cg|sgd)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub batch: usize,
    pub step: f64,
    pub epochs: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            step: 0.01,
            epochs: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub problem: ProblemConfig,
    pub m: usize,
    pub t1: usize,
    pub n1: usize,
    pub t2: usize,
    pub n2: usize,
    /// Explicit Stage-I learning rate; `None` uses the width/dimension scaling.
    pub eta1: Option<f64>,
    /// Explicit Gamma initialization scale; `None` uses the scaling rule.
    pub gamma: Option<f64>,
    pub c_eta: f64,
    pub c_gamma: f64,
    pub lambda2: f64,
    pub seed: u64,
    pub eta1_autoscale: bool,
    pub solver: Stage2Solver,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub sgd: SgdConfig,
}

impl TrainConfig {
    pub fn new(problem: ProblemConfig, m: usize, t1: usize, n1: usize, t2: usize, n2: usize, seed: u64) -> Self {
        Self {
            problem,
            m,
            t1,
            n1,
            t2,
            n2,
            eta1: None,
            gamma: None,
            c_eta: 1.0,
            c_gamma: 1.0,
            lambda2: 0.1,
            seed,
            eta1_autoscale: false,
            solver: Stage2Solver::Cg,
            cg_tol: 1e-8,
            cg_max_iter: 20_000,
            sgd: SgdConfig::default(),
        }
    }

    /// Laptop-sized version of the simplified-architecture experiment.
    pub fn desk(problem: ProblemConfig, seed: u64) -> Self {
        Self::new(problem, 2000, 20_000, 2000, 1000, 256, seed)
    }

    /// `gamma = c_gamma / (m^{3/2} r^{1/2} d^Q)` unless set explicitly.
    pub fn gamma_value(&self) -> f64 {
        self.gamma.unwrap_or_else(|| {
            let p = &self.problem;
            self.c_gamma / ((self.m as f64).powf(1.5) * (p.r as f64).sqrt() * (p.d as f64).powi(p.q as i32))
        })
    }

    /// `eta1 = c_eta m^{3/2} r d^{2Q - 1/2}` unless set explicitly.
    pub fn eta1_value(&self) -> f64 {
        self.eta1.unwrap_or_else(|| {
            let p = &self.problem;
            self.c_eta * (self.m as f64).powf(1.5) * p.r as f64 * (p.d as f64).powf(2.0 * p.q as f64 - 0.5)
        })
    }

    /// Stage-I weight decay, tied to the learning rate.
    pub fn lambda1(&self) -> f64 {
        1.0 / self.eta1_value()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.problem.validate()?;
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.m == 0 {
            return bad("width m must be >= 1".into());
        }
        if self.t1 == 0 || self.n1 == 0 {
            return bad(format!("stage 1 needs T1, N1 >= 1 (got {}, {})", self.t1, self.n1));
        }
        if self.t2 == 0 || self.n2 == 0 {
            return bad(format!("stage 2 needs T2, N2 >= 1 (got {}, {})", self.t2, self.n2));
        }
        if !(self.lambda2 > 0.0) {
            return bad(format!("lambda2 must be > 0, got {}", self.lambda2));
        }
        if !(self.eta1_value() > 0.0) || !self.eta1_value().is_finite() {
            return bad(format!("eta1 must be positive and finite, got {}", self.eta1_value()));
        }
        if !(self.gamma_value() >= 0.0) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma_value()));
        }
        if self.solver == Stage2Solver::Direct && self.m > DIRECT_MAX_WIDTH {
            return bad(format!("direct solver supports m <= {DIRECT_MAX_WIDTH}, got {}", self.m));
        }
        if self.solver == Stage2Solver::Sgd && (self.sgd.batch == 0 || !(self.sgd.step > 0.0)) {
            return bad("sgd needs batch >= 1 and step > 0".into());
        }
        Ok(())
    }
}

/// Rows uniform on the sphere, biases uniform on `[-1, 1]`, diagonal Gamma
/// with entries `+-gamma`. Each neuron draws from its own stream, so a
/// narrower network is a prefix of a wider one.
pub fn init_params<T: Real>(cfg: &TrainConfig) -> Result<ModelParams<T>, TrainError> {
    cfg.validate()?;
    let (m, d) = (cfg.m, cfg.problem.d);
    let gamma = cfg.gamma_value();
    let mut w = Array2::<T>::zeros((m, d));
    let mut b = Array1::<T>::zeros(m);
    let mut g = Array1::<T>::zeros(m);
    for j in 0..m {
        let row: Vec<T> = rng::unit_sphere(&mut rng::stream(cfg.seed, Purpose::InitWeights, j as u64), d);
        w.row_mut(j).assign(&Array1::from_vec(row));
        b[j] = rng::uniform(&mut rng::stream(cfg.seed, Purpose::InitBias, j as u64), -1.0, 1.0);
        g[j] = T::from_f64_lossy(gamma * rng::sign(&mut rng::stream(cfg.seed, Purpose::InitGamma, j as u64)));
    }
    Ok(ModelParams::new(w, b, Gamma::Diagonal(g))?)
}

fn diagonal_of<T: Real>(params: &ModelParams<T>) -> Result<ArrayView1<'_, T>, TrainError> {
    match &params.gamma {
        Gamma::Diagonal(g) => Ok(g.view()),
        _ => Err(TrainError::InvalidConfig("stage 1 expects a diagonal Gamma".into())),
    }
}

/// Model output on the query and its gradient with respect to `W`, for a
/// diagonal Gamma:
/// `grad_j = Gamma_jj [ (1/N sum_i y_i relu'(z_ij) x_i) relu(z_qj) + u_j relu'(z_qj) x_q ]`.
pub fn output_and_gradient<T: Real>(
    params: &ModelParams<T>,
    gdiag: ArrayView1<'_, T>,
    prompt: &Prompt<T>,
) -> (T, Array2<T>) {
    let n = prompt.len();
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let m = params.m();
    let d = params.d();
    let b = params.b.as_slice().expect("contiguous bias");
    let wt = params.w.t();
    let mut u = vec![T::zero(); m];
    let mut grad = Array2::<T>::zeros((m, d));
    // samples are processed in blocks so the m-wide activations stay in cache
    for start in (0..n).step_by(SAMPLE_BLOCK) {
        let end = (start + SAMPLE_BLOCK).min(n);
        let xc = prompt.x.slice(ndarray::s![start..end, ..]);
        // overwritten in place with the masked labels y_i 1[z_ij > 0]
        let mut mask = xc.dot(&wt);
        for (mut row, &yi) in mask.rows_mut().into_iter().zip(prompt.y.slice(ndarray::s![start..end])) {
            let row = row.as_slice_mut().expect("row-major");
            for ((mij, &bj), uj) in row.iter_mut().zip(b).zip(u.iter_mut()) {
                let z = *mij + bj;
                let keep = if z > T::zero() { yi } else { T::zero() };
                *uj += keep * z;
                *mij = keep;
            }
        }
        general_mat_mul(T::one(), &mask.t(), &xc, T::one(), &mut grad);
    }
    let u = Array1::from_vec(u) * inv_n;
    grad *= inv_n;
    let zq = params.w.dot(&prompt.query_x) + &params.b;
    let mut f = T::zero();
    for (j, mut row) in grad.axis_iter_mut(Axis(0)).enumerate() {
        let (v, on) = (zq[j].relu(), zq[j].relu_prime());
        f += gdiag[j] * v * u[j];
        row *= gdiag[j] * v;
        if on > T::zero() {
            row.scaled_add(gdiag[j] * u[j], &prompt.query_x);
        }
    }
    (f, grad)
}

/// `sum_t (y_t - f_t) grad_W f_t` over the given prompt source.
fn correlation_sum<T, F>(params: &ModelParams<T>, tasks: usize, draw: F) -> Result<Array2<T>, TrainError>
where
    T: Real,
    F: Fn(usize) -> Prompt<T> + Sync,
{
    let gdiag = diagonal_of(params)?;
    Ok(parallel_pairwise_sum(tasks, |t| {
        let prompt = draw(t);
        let (f, mut g) = output_and_gradient(params, gdiag, &prompt);
        g *= prompt.query_y - f;
        g
    })
    .unwrap_or_else(|| Array2::zeros(params.w.dim())))
}

/// `(1/T) sum_t (y_t - f_t)^2` on the query pairs.
pub fn empirical_loss<T: Real>(params: &ModelParams<T>, prompts: &[Prompt<T>]) -> Result<T, TrainError> {
    let mut acc = T::zero();
    for p in prompts {
        let r = p.query_y - params.forward(p)?;
        acc += r * r;
    }
    Ok(acc / T::from_usize(prompts.len()).unwrap())
}

/// Gradient of [`empirical_loss`] with respect to `W` (diagonal Gamma only).
pub fn loss_gradient<T: Real>(params: &ModelParams<T>, prompts: &[Prompt<T>]) -> Result<Array2<T>, TrainError> {
    let s = correlation_sum(params, prompts.len(), |t| prompts[t].clone())?;
    Ok(s * T::from_f64_lossy(-2.0 / prompts.len() as f64))
}

/// `W - eta (grad + lambda1 W)` with `lambda1 = 1 / eta`.
pub fn apply_stage1_update<T: Real>(w0: &Array2<T>, grad: &Array2<T>, eta1: f64) -> Array2<T> {
    let eta = T::from_f64_lossy(eta1);
    let lambda1 = T::from_f64_lossy(1.0 / eta1);
    let mut step = grad + &(w0 * lambda1);
    step *= eta;
    w0 - &step
}

#[derive(Debug, Clone, Serialize)]
pub struct Stage1Report {
    pub eta1: f64,
    pub lambda1: f64,
    pub gamma: f64,
    /// Factor applied to `eta1` by the autoscale guard (1 when off or inactive).
    pub autoscale_factor: f64,
    pub max_row_norm: f64,
    pub mean_row_norm: f64,
    pub wall_ms: f64,
}

fn stage1_prompt<T: Real>(cfg: &TrainConfig, t: usize) -> Prompt<T> {
    let mut rng = rng::stream(cfg.seed, Purpose::Stage1Data, t as u64);
    let task = sample_task(&cfg.problem, &mut rng).expect("validated config");
    sample_prompt(&task, cfg.n1, &cfg.problem, &mut rng).expect("validated config")
}

/// One full-batch gradient step on `W` over `T1` fresh prompts, with weight
/// decay `1/eta1`. `b` and Gamma are left untouched.
pub fn stage1_step<T: Real>(
    params: &ModelParams<T>,
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, Stage1Report), TrainError> {
    cfg.validate()?;
    let start = Instant::now();
    let s = correlation_sum(params, cfg.t1, |t| stage1_prompt(cfg, t))?;
    let grad = s * T::from_f64_lossy(-2.0 / cfg.t1 as f64);
    let mut eta1 = cfg.eta1_value();
    let mut w1 = apply_stage1_update(&params.w, &grad, eta1);
    let norms: Vec<f64> = w1.rows().into_iter().map(|r| r.dot(&r).sqrt().as_f64()).collect();
    let mut max_norm = norms.iter().cloned().fold(0.0, f64::max);
    let mut mean_norm = norms.iter().sum::<f64>() / norms.len() as f64;
    let mut factor = 1.0;
    if cfg.eta1_autoscale && max_norm > 1.0 {
        // w1 is linear in eta1 once the decay term cancels
        factor = 1.0 / max_norm;
        eta1 *= factor;
        w1 *= T::from_f64_lossy(factor);
        max_norm *= factor;
        mean_norm *= factor;
    }
    let report = Stage1Report {
        eta1,
        lambda1: 1.0 / eta1,
        gamma: cfg.gamma_value(),
        autoscale_factor: factor,
        max_row_norm: max_norm,
        mean_row_norm: mean_norm,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((ModelParams::new(w1, params.b.clone(), params.gamma.clone())?, report))
}

/// Fresh biases uniform on `[-log d, log d]`, one stream per neuron.
pub fn reinit_bias<T: Real>(cfg: &TrainConfig) -> Result<Array1<T>, TrainError> {
    let d = cfg.problem.d;
    if d < 2 {
        return Err(TrainError::InvalidConfig(format!("bias re-initialization needs d >= 2, got {d}")));
    }
    let h = (d as f64).ln();
    Ok(Array1::from_iter((0..cfg.m).map(|j| {
        rng::uniform(&mut rng::stream(cfg.seed, Purpose::BiasReinit, j as u64), -h, h)
    })))
}

/// Per-prompt features for the attention regression: row `t` of `u` is
/// `(1/N) sum_i y_i phi(x_i)` and row `t` of `v` is `phi(x)` for prompt `t`.
#[derive(Debug, Clone)]
pub struct Stage2Data<T> {
    pub u: Array2<T>,
    pub v: Array2<T>,
    pub y: Array1<T>,
    /// `max |<w_j, z>|` over every Stage-II input `z` and neuron `j`.
    pub max_projection: f64,
}

impl<T: Real> Stage2Data<T> {
    /// Build from explicit prompts.
    pub fn from_prompts(features: &ModelParams<T>, prompts: &[Prompt<T>]) -> Result<Self, TrainError> {
        Self::build(features, prompts.len(), |t| prompts[t].clone())
    }

    fn build<F>(features: &ModelParams<T>, tasks: usize, draw: F) -> Result<Self, TrainError>
    where
        F: Fn(usize) -> Prompt<T> + Sync,
    {
        let rows: Vec<(Array1<T>, Array1<T>, T, f64)> = (0..tasks)
            .into_par_iter()
            .map(|t| {
                let p = draw(t);
                let proj = p.x.dot(&features.w.t());
                let qproj = features.w.dot(&p.query_x);
                let maxp = proj
                    .iter()
                    .chain(qproj.iter())
                    .fold(0.0f64, |a, &x| a.max(x.as_f64().abs()));
                let u = features.context_vector(&p.context())?;
                let v = (qproj + &features.b).mapv_into(Real::relu);
                Ok((u, v, p.query_y, maxp))
            })
            .collect::<Result<_, ModelError>>()?;
        let m = features.m();
        let mut u = Array2::<T>::zeros((tasks, m));
        let mut v = Array2::<T>::zeros((tasks, m));
        let mut y = Array1::<T>::zeros(tasks);
        let mut max_projection = 0.0f64;
        for (t, (ut, vt, yt, mp)) in rows.into_iter().enumerate() {
            u.row_mut(t).assign(&ut);
            v.row_mut(t).assign(&vt);
            y[t] = yt;
            max_projection = max_projection.max(mp);
        }
        Ok(Self { u, v, y, max_projection })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// `K_st = <v_s, v_t> <u_s, u_t>`, the Gram matrix of the rank-one
    /// design matrices `v_t u_t^T` under the Frobenius product.
    pub fn kernel(&self) -> Array2<T> {
        let kv = self.v.dot(&self.v.t());
        let ku = self.u.dot(&self.u.t());
        kv * ku
    }

    /// [`Self::kernel`] accumulated in `f64`, used by the dual solvers
    /// whatever the storage type.
    pub fn kernel_f64(&self) -> Array2<f64> {
        let v = self.v.mapv(Real::as_f64);
        let u = self.u.mapv(Real::as_f64);
        v.dot(&v.t()) * u.dot(&u.t())
    }

    pub fn predictions(&self, gamma: &Gamma<T>) -> Array1<T> {
        gamma.bilinear_rows(self.v.view(), self.u.view())
    }

    /// `(1/T) sum_t (y_t - v_t^T Gamma u_t)^2 + (lambda2/2) ||Gamma||_F^2`
    pub fn objective(&self, gamma: &Gamma<T>, lambda2: f64) -> f64 {
        let r = &self.y - &self.predictions(gamma);
        r.dot(&r).as_f64() / self.len() as f64 + 0.5 * lambda2 * gamma.frobenius_sq().as_f64()
    }

    /// Dense gradient of [`Self::objective`].
    pub fn objective_gradient(&self, gamma: &Gamma<T>, lambda2: f64) -> Array2<T> {
        let r = &self.y - &self.predictions(gamma);
        let scale = T::from_f64_lossy(-2.0 / self.len() as f64);
        let weighted = &self.v * &(r * scale).insert_axis(Axis(1));
        weighted.t().dot(&self.u) + gamma.to_dense() * T::from_f64_lossy(lambda2)
    }
}

/// Draw the `T2` Stage-II prompts and embed them with frozen `W, b`.
pub fn stage2_data<T: Real>(features: &ModelParams<T>, cfg: &TrainConfig) -> Result<Stage2Data<T>, TrainError> {
    cfg.validate()?;
    Stage2Data::build(features, cfg.t2, |t| {
        let mut rng = rng::stream(cfg.seed, Purpose::Stage2Data, t as u64);
        let task = sample_task(&cfg.problem, &mut rng).expect("validated config");
        sample_prompt(&task, cfg.n2, &cfg.problem, &mut rng).expect("validated config")
    })
}

#[derive(Debug, Clone)]
pub struct Stage2Solution<T> {
    pub gamma: Gamma<T>,
    pub objective: f64,
    pub objective_at_zero: f64,
    /// Frobenius norm of the objective gradient at the solution.
    pub grad_norm: f64,
    /// Same at `Gamma = 0`, the natural scale for `grad_norm`.
    pub grad_norm_at_zero: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Minimize the Stage-II ridge objective over Gamma.
///
/// The minimizer lies in the span of the design matrices, so `cg` and `sgd`
/// work with `Gamma = sum_t alpha_t v_t u_t^T` and never form an `m x m`
/// matrix; `cg` solves `(K + (T lambda2 / 2) I) alpha = y` and `sgd` runs the
/// primal mini-batch iteration expressed in `alpha`; both keep `K` and
/// `alpha` in `f64`, since `K` is badly conditioned. `direct` factorizes the
/// primal normal equations over `vec(Gamma)`.
pub fn stage2_ridge<T: Real>(
    data: &Stage2Data<T>,
    cfg: &TrainConfig,
) -> Result<Stage2Solution<T>, TrainError> {
    let lambda2 = cfg.lambda2;
    if !(lambda2 > 0.0) {
        return Err(TrainError::InvalidConfig(format!("lambda2 must be > 0, got {lambda2}")));
    }
    let n = data.len() as f64;
    let y2 = data.y.dot(&data.y).as_f64();
    match cfg.solver {
        Stage2Solver::Direct => {
            let m = data.u.ncols();
            if m > DIRECT_MAX_WIDTH {
                return Err(TrainError::InvalidConfig(format!(
                    "direct solver supports m <= {DIRECT_MAX_WIDTH}, got {m}"
                )));
            }
            let mut z = Array2::<T>::zeros((data.len(), m * m));
            for (t, mut row) in z.rows_mut().into_iter().enumerate() {
                for j in 0..m {
                    for k in 0..m {
                        row[j * m + k] = data.v[[t, j]] * data.u[[t, k]];
                    }
                }
            }
            let c = T::from_f64_lossy(2.0 / n);
            let mut h = z.t().dot(&z) * c;
            for i in 0..m * m {
                h[[i, i]] += T::from_f64_lossy(lambda2);
            }
            let rhs = z.t().dot(&data.y) * c;
            let l = linalg::cholesky(&h)?;
            let g = linalg::cholesky_solve(&l, rhs.view());
            let gamma = Gamma::Dense(g.into_shape_with_order((m, m)).expect("m*m vector"));
            let grad = data.objective_gradient(&gamma, lambda2);
            Ok(Stage2Solution {
                objective: data.objective(&gamma, lambda2),
                objective_at_zero: y2 / n,
                grad_norm: frob(&grad),
                grad_norm_at_zero: frob(&data.objective_gradient(&Gamma::Dense(Array2::zeros((m, m))), lambda2)),
                gamma,
                iterations: 1,
                residual: 0.0,
            })
        }
        Stage2Solver::Cg => {
            let k = data.kernel_f64();
            let y = data.y.mapv(Real::as_f64);
            let shift = n * lambda2 / 2.0;
            let precond = k.diag().mapv(|x| 1.0 / (x + shift));
            let out = linalg::conjugate_gradient(
                |p| {
                    let mut kp = k.dot(&p);
                    kp.scaled_add(shift, &p);
                    kp
                },
                y.view(),
                precond.view(),
                cfg.cg_tol,
                cfg.cg_max_iter,
            );
            if !out.converged {
                return Err(TrainError::CgNotConverged {
                    iterations: out.iterations,
                    residual: out.relative_residual,
                });
            }
            Ok(dual_solution(data, &k, out.x, lambda2, out.iterations, out.relative_residual))
        }
        Stage2Solver::Sgd => {
            let k = data.kernel_f64();
            let y = data.y.mapv(Real::as_f64);
            let sgd = &cfg.sgd;
            let step = sgd.step;
            let mut alpha = Array1::<f64>::zeros(data.len());
            let mut order: Vec<usize> = (0..data.len()).collect();
            let start_obj = y2 / n;
            for epoch in 0..sgd.epochs {
                order.shuffle(&mut rng::stream(cfg.seed, Purpose::Solver, epoch as u64));
                for batch in order.chunks(sgd.batch) {
                    let resid: Vec<f64> = batch.iter().map(|&t| y[t] - k.row(t).dot(&alpha)).collect();
                    alpha *= 1.0 - step * lambda2;
                    let c = 2.0 * step / batch.len() as f64;
                    for (&t, &r) in batch.iter().zip(&resid) {
                        alpha[t] += c * r;
                    }
                }
                let f = k.dot(&alpha);
                let r = &y - &f;
                let obj = r.dot(&r) / n + 0.5 * lambda2 * alpha.dot(&f);
                if !obj.is_finite() || obj > 1e6 * start_obj.max(1e-300) {
                    return Err(TrainError::SgdDiverged { epoch, objective: obj });
                }
            }
            let resid = &y - &k.dot(&alpha) - &(&alpha * (n * lambda2 / 2.0));
            let rel = (resid.dot(&resid) / y2.max(1e-300)).sqrt();
            Ok(dual_solution(data, &k, alpha, lambda2, sgd.epochs, rel))
        }
    }
}

fn frob<T: Real>(a: &Array2<T>) -> f64 {
    a.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()
}

fn dual_solution<T: Real>(
    data: &Stage2Data<T>,
    k: &Array2<f64>,
    alpha: Array1<f64>,
    lambda2: f64,
    iterations: usize,
    residual: f64,
) -> Stage2Solution<T> {
    let n = data.len() as f64;
    let y = data.y.mapv(Real::as_f64);
    let f = k.dot(&alpha);
    let r = &y - &f;
    let objective = r.dot(&r) / n + 0.5 * lambda2 * alpha.dot(&f);
    // gradient = sum_t c_t v_t u_t^T with c = -(2/T) r + lambda2 alpha
    let c = &r * (-2.0 / n) + &(&alpha * lambda2);
    let grad_norm = c.dot(&k.dot(&c)).max(0.0).sqrt();
    let c0 = &y * (-2.0 / n);
    let grad_norm_at_zero = c0.dot(&k.dot(&c0)).max(0.0).sqrt();
    let left = &data.v * &alpha.mapv(T::from_f64_lossy).view().insert_axis(Axis(1));
    Stage2Solution {
        gamma: Gamma::LowRank {
            left,
            right: data.u.clone(),
        },
        objective,
        objective_at_zero: y.dot(&y) / n,
        grad_norm,
        grad_norm_at_zero,
        iterations,
        residual,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainingReport {
    pub seed: u64,
    pub d: usize,
    pub r: usize,
    pub m: usize,
    pub stage1: Stage1Report,
    pub solver: Stage2Solver,
    pub stage2_objective: f64,
    pub stage2_objective_at_zero: f64,
    pub stage2_grad_norm: f64,
    pub stage2_grad_norm_at_zero: f64,
    pub solver_iterations: usize,
    pub solver_residual: f64,
    /// Largest `|<w_j^{(1)}, z>|` over Stage-II inputs; monitored only.
    pub max_stage2_projection: f64,
    pub stage2_ms: f64,
}

impl TrainingReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Stage I plus bias re-initialization: the frozen features for Stage II
/// (Gamma is reset to zero).
pub fn pretrain_features<T: Real>(cfg: &TrainConfig) -> Result<(ModelParams<T>, Stage1Report), TrainError> {
    let p0 = init_params::<T>(cfg)?;
    let (p1, report) = stage1_step(&p0, cfg)?;
    let b = reinit_bias::<T>(cfg)?;
    let features = ModelParams::new(p1.w, b, Gamma::zeros_diagonal(cfg.m))?;
    Ok((features, report))
}

/// Stage II on frozen features.
pub fn finish_pretraining<T: Real>(
    features: ModelParams<T>,
    stage1: Stage1Report,
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, TrainingReport), TrainError> {
    let start = Instant::now();
    let data = stage2_data(&features, cfg)?;
    let sol = stage2_ridge(&data, cfg)?;
    let report = TrainingReport {
        seed: cfg.seed,
        d: cfg.problem.d,
        r: cfg.problem.r,
        m: cfg.m,
        stage1,
        solver: cfg.solver,
        stage2_objective: sol.objective,
        stage2_objective_at_zero: sol.objective_at_zero,
        stage2_grad_norm: sol.grad_norm,
        stage2_grad_norm_at_zero: sol.grad_norm_at_zero,
        solver_iterations: sol.iterations,
        solver_residual: sol.residual,
        max_stage2_projection: data.max_projection,
        stage2_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((ModelParams::new(features.w, features.b, sol.gamma)?, report))
}

/// The full two-stage procedure.
pub fn pretrain<T: Real>(cfg: &TrainConfig) -> Result<(ModelParams<T>, TrainingReport), TrainError> {
    let (features, s1) = pretrain_features(cfg)?;
    finish_pretraining(features, s1, cfg)
}
