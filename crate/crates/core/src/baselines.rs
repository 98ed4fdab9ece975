//! Learners that fit each test prompt from scratch: RBF kernel ridge
//! regression and a two-layer ReLU network.
//!
//! Both take only a [`Context`] and query points, so they cannot see any
//! pretraining data.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::rng;
use crate::scalar::Real;
use crate::task::Context;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("empty context")]
    EmptyContext,
    #[error("invalid baseline config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: context has d={context}, queries have d={queries}")]
    DimensionMismatch { context: usize, queries: usize },
    #[error("kernel system is singular (ridge 0 with repeated inputs?): {0}")]
    Singular(#[from] LinalgError),
}

fn check_inputs<T: Real>(ctx: &Context<'_, T>, queries: ArrayView2<'_, T>) -> Result<(), BaselineError> {
    if ctx.is_empty() {
        return Err(BaselineError::EmptyContext);
    }
    if ctx.d() != queries.ncols() {
        return Err(BaselineError::DimensionMismatch {
            context: ctx.d(),
            queries: queries.ncols(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RidgeScaling {
    /// `K + N lambda I`
    TimesN,
    /// `K + lambda I`
    Unscaled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrrConfig {
    /// `sigma^2` in `exp(-|x - x'|^2 / sigma^2)`; `None` means `2 d`.
    pub bandwidth_sq: Option<f64>,
    pub ridge: f64,
    pub scaling: RidgeScaling,
}

impl Default for KrrConfig {
    fn default() -> Self {
        Self {
            bandwidth_sq: None,
            ridge: 0.01,
            scaling: RidgeScaling::TimesN,
        }
    }
}

fn sq_dists<T: Real>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Array2<T> {
    let na: Array1<T> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
    let nb: Array1<T> = b.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut d = a.dot(&b.t()) * T::from_f64_lossy(-2.0);
    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
        row.zip_mut_with(&nb, |v, &n| *v = (*v + na[i] + n).max(T::zero()));
    }
    d
}

/// Fit `alpha = (K + N lambda I)^{-1} y` on the context and predict
/// `k(query, X) alpha`.
pub fn krr_fit_predict<T: Real>(
    cfg: &KrrConfig,
    ctx: &Context<'_, T>,
    queries: ArrayView2<'_, T>,
) -> Result<Array1<T>, BaselineError> {
    check_inputs(ctx, queries)?;
    let sigma2 = cfg.bandwidth_sq.unwrap_or(2.0 * ctx.d() as f64);
    if !(sigma2 > 0.0) || !(cfg.ridge >= 0.0) {
        return Err(BaselineError::InvalidConfig(format!(
            "need bandwidth > 0 and ridge >= 0, got {sigma2}, {}",
            cfg.ridge
        )));
    }
    let inv = T::from_f64_lossy(-1.0 / sigma2);
    let mut k = sq_dists(ctx.x, ctx.x).mapv_into(|v| (v * inv).exp());
    let shift = match cfg.scaling {
        RidgeScaling::TimesN => cfg.ridge * ctx.len() as f64,
        RidgeScaling::Unscaled => cfg.ridge,
    };
    for i in 0..ctx.len() {
        k[[i, i]] += T::from_f64_lossy(shift);
    }
    let l = linalg::cholesky(&k)?;
    let alpha = linalg::cholesky_solve(&l, ctx.y);
    let kq = sq_dists(queries, ctx.x).mapv_into(|v| (v * inv).exp());
    Ok(kq.dot(&alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NnOptimizer {
    Adam,
    OneStepGd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnConfig {
    pub width: usize,
    pub optimizer: NnOptimizer,
    /// Adam learning rate for `w` and the hidden biases.
    pub lr_first: f64,
    /// Adam learning rate for `a`; `None` means `lr_first / width`.
    pub lr_second: Option<f64>,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Fraction of the context held out for early stopping.
    pub holdout: f64,
    /// One-step learning rate; `None` picks it so the median row of the
    /// step has unit norm.
    pub one_step_lr: Option<f64>,
    /// Ridge on the second layer after the one-step update.
    pub second_layer_ridge: f64,
}

impl NnConfig {
    pub fn adam() -> Self {
        Self {
            width: 256,
            optimizer: NnOptimizer::Adam,
            lr_first: 0.1,
            lr_second: None,
            weight_decay: 1e-4,
            max_epochs: 500,
            patience: 10,
            batch_size: 32,
            holdout: 0.2,
            one_step_lr: None,
            second_layer_ridge: 0.01,
        }
    }

    pub fn one_step(width: usize) -> Self {
        Self {
            width,
            optimizer: NnOptimizer::OneStepGd,
            ..Self::adam()
        }
    }

    fn validate(&self) -> Result<(), BaselineError> {
        let ok = self.width >= 1
            && self.lr_first > 0.0
            && self.lr_second.is_none_or(|v| v > 0.0)
            && self.weight_decay >= 0.0
            && self.batch_size >= 1
            && (0.0..1.0).contains(&self.holdout)
            && self.one_step_lr.is_none_or(|v| v > 0.0)
            && self.second_layer_ridge >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(BaselineError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// Adam with bias correction and L2 weight decay added to the gradient.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(n: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        self.t += 1;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(self.t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(self.t));
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.eps);
        let wd = T::from_f64_lossy(self.weight_decay);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let g = g + wd * *p;
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// `f(x) = sum_j a_j relu(w_j . x + c_j)`
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerNet<T> {
    pub w: Array2<T>,
    pub c: Array1<T>,
    pub a: Array1<T>,
}

impl<T: Real> TwoLayerNet<T> {
    /// Mean-field initialization: `a_j = +-1/m`, `w_j` uniform on the sphere,
    /// hidden biases uniform on `[-1, 1]`.
    pub fn init<R: Rng + ?Sized>(width: usize, d: usize, rng: &mut R) -> Self {
        let mut w = Array2::<T>::zeros((width, d));
        for mut row in w.rows_mut() {
            row.assign(&Array1::from_vec(rng::unit_sphere(rng, d)));
        }
        let c = Array1::from_iter((0..width).map(|_| rng::uniform(rng, -1.0, 1.0)));
        let inv = 1.0 / width as f64;
        let a = Array1::from_iter((0..width).map(|_| T::from_f64_lossy(inv * rng::sign(rng))));
        Self { w, c, a }
    }

    pub fn hidden(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut z = x.dot(&self.w.t());
        z += &self.c;
        z
    }

    pub fn predict(&self, x: ArrayView2<'_, T>) -> Array1<T> {
        self.hidden(x).mapv_into(Real::relu).dot(&self.a)
    }

    /// Gradients of the mean squared error on `(x, y)`: `(dw, dc, da)`.
    pub fn mse_gradients(&self, x: ArrayView2<'_, T>, y: ArrayView1<'_, T>) -> (Array2<T>, Array1<T>, Array1<T>) {
        let z = self.hidden(x);
        let h = z.mapv(Real::relu);
        let scale = T::from_f64_lossy(2.0 / y.len() as f64);
        let r = (h.dot(&self.a) - &y) * scale;
        let da = h.t().dot(&r);
        // delta_ij = r_i a_j relu'(z_ij)
        let mut delta = z.mapv_into(Real::relu_prime);
        delta *= &r.view().insert_axis(Axis(1));
        delta *= &self.a;
        let dw = delta.t().dot(&x);
        let dc = delta.sum_axis(Axis(0));
        (dw, dc, da)
    }
}

fn mae<T: Real>(pred: &Array1<T>, y: ArrayView1<'_, T>) -> f64 {
    pred.iter().zip(y).map(|(p, t)| (*p - *t).abs().as_f64()).sum::<f64>() / y.len().max(1) as f64
}

/// Fit a fresh two-layer network on the context and predict the queries.
pub fn nn_fit_predict<T: Real, R: Rng + ?Sized>(
    cfg: &NnConfig,
    ctx: &Context<'_, T>,
    queries: ArrayView2<'_, T>,
    rng: &mut R,
) -> Result<Array1<T>, BaselineError> {
    check_inputs(ctx, queries)?;
    cfg.validate()?;
    let net = match cfg.optimizer {
        NnOptimizer::Adam => train_adam(cfg, ctx, rng),
        NnOptimizer::OneStepGd => train_one_step(cfg, ctx, rng)?,
    };
    Ok(net.predict(queries))
}

fn train_adam<T: Real, R: Rng + ?Sized>(cfg: &NnConfig, ctx: &Context<'_, T>, rng: &mut R) -> TwoLayerNet<T> {
    let (n, d) = (ctx.len(), ctx.d());
    let mut net = TwoLayerNet::<T>::init(cfg.width, d, rng);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_hold = if n >= 5 { ((n as f64 * cfg.holdout).round() as usize).clamp(1, n - 1) } else { 0 };
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let xt = ctx.x.select(Axis(0), train_idx);
    let yt = ctx.y.select(Axis(0), train_idx);
    let xh = ctx.x.select(Axis(0), hold_idx);
    let yh = ctx.y.select(Axis(0), hold_idx);

    let width = cfg.width;
    let mut first = Adam::<T>::new(width * d + width, cfg.lr_first, cfg.weight_decay);
    let mut second = Adam::<T>::new(width, cfg.lr_second.unwrap_or(cfg.lr_first / width as f64), cfg.weight_decay);
    let mut best = (f64::INFINITY, net.clone());
    let mut stale = 0;
    let mut rows: Vec<usize> = (0..train_idx.len()).collect();
    let mut flat = vec![T::zero(); width * d + width];
    let mut gflat = vec![T::zero(); width * d + width];
    for _epoch in 0..cfg.max_epochs {
        rows.shuffle(rng);
        for batch in rows.chunks(cfg.batch_size) {
            let xb = xt.select(Axis(0), batch);
            let yb = yt.select(Axis(0), batch);
            let (dw, dc, da) = net.mse_gradients(xb.view(), yb.view());
            flat[..width * d].copy_from_slice(net.w.as_slice().unwrap());
            flat[width * d..].copy_from_slice(net.c.as_slice().unwrap());
            gflat[..width * d].copy_from_slice(dw.as_slice().unwrap());
            gflat[width * d..].copy_from_slice(dc.as_slice().unwrap());
            first.step(&mut flat, &gflat);
            net.w.as_slice_mut().unwrap().copy_from_slice(&flat[..width * d]);
            net.c.as_slice_mut().unwrap().copy_from_slice(&flat[width * d..]);
            second.step(net.a.as_slice_mut().unwrap(), da.as_slice().unwrap());
        }
        if n_hold > 0 {
            let err = mae(&net.predict(xh.view()), yh.view());
            if err < best.0 {
                best = (err, net.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    if n_hold > 0 {
        best.1
    } else {
        net
    }
}

fn train_one_step<T: Real, R: Rng + ?Sized>(
    cfg: &NnConfig,
    ctx: &Context<'_, T>,
    rng: &mut R,
) -> Result<TwoLayerNet<T>, BaselineError> {
    let (n, d) = (ctx.len(), ctx.d());
    let mut net = TwoLayerNet::<T>::init(cfg.width, d, rng);
    let (dw, _, _) = net.mse_gradients(ctx.x, ctx.y);
    let lr = match cfg.one_step_lr {
        Some(v) => v,
        None => {
            let mut norms: Vec<f64> = dw.rows().into_iter().map(|r| r.dot(&r).sqrt().as_f64()).collect();
            norms.sort_by(f64::total_cmp);
            let med = norms[norms.len() / 2];
            if med > 0.0 {
                1.0 / med
            } else {
                0.0
            }
        }
    };
    net.w.scaled_add(T::from_f64_lossy(-lr), &dw);

    // ridge on the second layer: min (1/N)|H a - y|^2 + lambda |a|^2
    let h = net.hidden(ctx.x).mapv_into(Real::relu);
    let lambda = cfg.second_layer_ridge;
    let width = cfg.width;
    net.a = if n <= width {
        let mut g = h.dot(&h.t());
        let shift = T::from_f64_lossy(n as f64 * lambda);
        for i in 0..n {
            g[[i, i]] += shift;
        }
        let beta = linalg::cholesky_solve(&linalg::cholesky(&g)?, ctx.y);
        h.t().dot(&beta)
    } else {
        let mut g = h.t().dot(&h);
        let shift = T::from_f64_lossy(n as f64 * lambda);
        for i in 0..width {
            g[[i, i]] += shift;
        }
        linalg::cholesky_solve(&linalg::cholesky(&g)?, h.t().dot(&ctx.y).view())
    };
    Ok(net)
}
