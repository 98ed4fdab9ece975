//! Gaussian single-index tasks and prompts.
//!
//! A task is `f*(x) = sum_{i=Q}^{P} (c_i / i!) He_i(<x, beta>)` with `beta`
//! uniform on the unit sphere of the subspace spanned by the first `r`
//! coordinates (optionally rotated by a fixed orthogonal matrix). Labels
//! carry two-point noise `+-tau`.

use std::io::Write;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hermite::{factorial, hermite_table, BasisIndex, HermiteError};
use crate::rng::{self, Purpose};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("invalid problem config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("prompt needs at least one context example")]
    EmptyContext,
    #[error(transparent)]
    Hermite(#[from] HermiteError),
}

/// How the Hermite coefficients `c_Q..c_P` of each task are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CoeffScheme {
    /// Uniform on the ellipsoid `sum_i c_i^2 / i! = 1`.
    SphereNormalized,
    /// The same coefficients for every task, listed from degree `Q` to `P`.
    Fixed(Vec<f64>),
}

impl CoeffScheme {
    /// `sigma_* = He_2`, i.e. `c_2 = 2! = 2` with `Q = P = 2`.
    pub fn he2_link() -> Self {
        CoeffScheme::Fixed(vec![2.0])
    }

    /// `(c_2, c_3) = (sqrt(2 * 2!) / 2, sqrt(2 * 3!) / 2)`, the low-variance
    /// validation coefficients for `Q = 2, P = 3`.
    pub fn low_variance_degree3() -> Self {
        CoeffScheme::Fixed(vec![(2.0 * 2.0f64).sqrt() / 2.0, (2.0 * 6.0f64).sqrt() / 2.0])
    }
}

/// Fixed orthogonal matrix applied to `beta` when the rotated mode is on.
#[derive(Debug, Clone)]
pub struct Rotation {
    pub seed: u64,
    matrix: Arc<Vec<f64>>,
}

impl PartialEq for Rotation {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed && self.matrix.len() == other.matrix.len()
    }
}

impl Rotation {
    fn new(seed: u64, d: usize) -> Self {
        // Gram–Schmidt on a Gaussian matrix, row by row.
        let mut rng = rng::stream(seed, Purpose::Rotation, 0);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
        while rows.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng::normal(&mut rng)).collect();
            for _ in 0..2 {
                for u in &rows {
                    let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(vi, ui)| *vi -= dot * ui);
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                v.iter_mut().for_each(|a| *a /= norm);
                rows.push(v);
            }
        }
        Self {
            seed,
            matrix: Arc::new(rows.concat()),
        }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let d = v.len();
        (0..d)
            .map(|i| (0..d).map(|j| self.matrix[i * d + j] * v[j]).sum())
            .collect()
    }
}

/// Problem definition shared by every task of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConfig {
    /// Ambient dimension.
    pub d: usize,
    /// Dimension of the index subspace.
    pub r: usize,
    /// Information exponent: lowest Hermite degree of the link.
    pub q: u32,
    /// Highest Hermite degree of the link.
    pub p: u32,
    /// Label noise level.
    pub tau: f64,
    pub coeffs: CoeffScheme,
    /// When set, `beta` lives in a rotated copy of the canonical subspace.
    pub rotation: Option<Rotation>,
}

impl ProblemConfig {
    pub fn new(d: usize, r: usize, q: u32, p: u32, tau: f64, coeffs: CoeffScheme) -> Self {
        Self {
            d,
            r,
            q,
            p,
            tau,
            coeffs,
            rotation: None,
        }
    }

    /// Turn on the rotated-subspace mode. Diagnostics that read coordinates
    /// `1..r` refuse such configs.
    pub fn with_rotation(mut self, seed: u64) -> Self {
        self.rotation = Some(Rotation::new(seed, self.d));
        self
    }

    pub fn is_canonical(&self) -> bool {
        self.rotation.is_none()
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.q < 2 || self.p < self.q {
            return Err(HermiteError::InvalidDegreeRange {
                q: self.q,
                p: self.p,
            }
            .into());
        }
        factorial(self.p)?;
        if self.r == 0 || self.r > self.d {
            return Err(TaskError::InvalidConfig(format!(
                "need 1 <= r <= d, got r={}, d={}",
                self.r, self.d
            )));
        }
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(TaskError::InvalidConfig(format!("tau must be >= 0, got {}", self.tau)));
        }
        if let CoeffScheme::Fixed(c) = &self.coeffs {
            let want = (self.p - self.q + 1) as usize;
            if c.len() != want {
                return Err(TaskError::InvalidConfig(format!(
                    "expected {want} fixed coefficients (degrees {}..={}), got {}",
                    self.q,
                    self.p,
                    c.len()
                )));
            }
            if c.iter().all(|&v| v == 0.0) {
                return Err(TaskError::InvalidConfig("fixed coefficients are all zero".into()));
            }
        }
        Ok(())
    }

    /// `E[c_Q^2]` under the coefficient scheme.
    ///
    /// For the normalized scheme `c_Q^2 = Q! g_Q^2 / |g|^2` with Gaussian `g`,
    /// whose mean is `Q! / (P - Q + 1)` by exchangeability.
    pub fn coeff_second_moment(&self) -> f64 {
        match &self.coeffs {
            CoeffScheme::Fixed(c) => c[0] * c[0],
            CoeffScheme::SphereNormalized => {
                factorial(self.q).expect("validated degree") / f64::from(self.p - self.q + 1)
            }
        }
    }

    /// `E[f*(x)^2] = E[sum_i c_i^2 / i!]`.
    pub fn target_second_moment(&self) -> f64 {
        match &self.coeffs {
            CoeffScheme::SphereNormalized => 1.0,
            CoeffScheme::Fixed(c) => c
                .iter()
                .enumerate()
                .map(|(k, v)| v * v / factorial(self.q + k as u32).unwrap())
                .sum(),
        }
    }
}

/// One draw of the target function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec<T> {
    pub beta: Vec<T>,
    /// `c_Q, ..., c_P`
    pub coeffs: Vec<T>,
    pub q: u32,
}

impl<T: Real> TaskSpec<T> {
    pub fn p(&self) -> u32 {
        self.q + self.coeffs.len() as u32 - 1
    }

    pub fn d(&self) -> usize {
        self.beta.len()
    }

    /// `c_k` for `Q <= k <= P`, zero otherwise.
    pub fn coeff(&self, k: u32) -> T {
        if k < self.q || k > self.p() {
            T::zero()
        } else {
            self.coeffs[(k - self.q) as usize]
        }
    }

    /// The link `sigma_*(z)`.
    pub fn link(&self, z: T) -> T {
        let table = hermite_table(self.p() as usize, z);
        let mut acc = T::zero();
        for (k, &c) in self.coeffs.iter().enumerate() {
            let deg = self.q + k as u32;
            let fact = T::from_f64_lossy(factorial(deg).expect("validated degree"));
            acc = acc + c / fact * table[deg as usize];
        }
        acc
    }

    #[inline]
    pub fn value(&self, x: ArrayView1<'_, T>) -> T {
        let z = x.iter().zip(&self.beta).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        self.link(z)
    }
}

/// Draw `beta` and the link coefficients.
pub fn sample_task<T: Real, R: Rng + ?Sized>(
    cfg: &ProblemConfig,
    rng: &mut R,
) -> Result<TaskSpec<T>, TaskError> {
    cfg.validate()?;
    let head: Vec<f64> = rng::unit_sphere(rng, cfg.r);
    let mut beta = vec![0.0; cfg.d];
    beta[..cfg.r].copy_from_slice(&head);
    if let Some(rot) = &cfg.rotation {
        beta = rot.apply(&beta);
    }
    let coeffs: Vec<f64> = match &cfg.coeffs {
        CoeffScheme::Fixed(c) => c.clone(),
        CoeffScheme::SphereNormalized => loop {
            let g: Vec<f64> = (cfg.q..=cfg.p).map(|_| rng::normal(rng)).collect();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                break g
                    .iter()
                    .enumerate()
                    .map(|(k, v)| v * factorial(cfg.q + k as u32).unwrap().sqrt() / norm)
                    .collect();
            }
        },
    };
    Ok(TaskSpec {
        beta: beta.into_iter().map(T::from_f64_lossy).collect(),
        coeffs: coeffs.into_iter().map(T::from_f64_lossy).collect(),
        q: cfg.q,
    })
}

/// `f*(x)`.
pub fn eval_target<T: Real>(task: &TaskSpec<T>, x: &[T]) -> Result<T, TaskError> {
    if x.len() != task.d() {
        return Err(TaskError::DimensionMismatch {
            expected: task.d(),
            got: x.len(),
        });
    }
    Ok(task.value(ArrayView1::from(x)))
}

/// Context `(X, y)` as seen by any predictor. Rows of `x` are examples.
#[derive(Debug, Clone, Copy)]
pub struct Context<'a, T> {
    pub x: ArrayView2<'a, T>,
    pub y: ArrayView1<'a, T>,
}

impl<'a, T: Real> Context<'a, T> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// First `n` examples.
    pub fn prefix(&self, n: usize) -> Context<'a, T> {
        Context {
            x: self.x.slice_move(ndarray::s![..n, ..]),
            y: self.y.slice_move(ndarray::s![..n]),
        }
    }
}

/// A prompt `(x_1, y_1, ..., x_N, y_N, x)` plus the label of the query.
///
/// `x` stores one example per row (`N x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt<T> {
    pub x: Array2<T>,
    pub y: Array1<T>,
    pub query_x: Array1<T>,
    pub query_y: T,
}

impl<T: Real> Prompt<T> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn d(&self) -> usize {
        self.query_x.len()
    }

    pub fn context(&self) -> Context<'_, T> {
        Context {
            x: self.x.view(),
            y: self.y.view(),
        }
    }

    /// CSV dump: `x_0..x_{d-1},y,role` with one row per context example and
    /// a final `query` row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let d = self.d();
        let header: Vec<String> = (0..d).map(|j| format!("x_{j}")).collect();
        writeln!(out, "{},y,role", header.join(","))?;
        for (row, y) in self.x.axis_iter(Axis(0)).zip(self.y.iter()) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{},context", cells.join(","), y)?;
        }
        let cells: Vec<String> = self.query_x.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{},{},query", cells.join(","), self.query_y)
    }
}

fn draw_example<T: Real, R: Rng + ?Sized>(
    task: &TaskSpec<T>,
    tau: f64,
    rng: &mut R,
    mut x: ndarray::ArrayViewMut1<'_, T>,
) -> T {
    for v in x.iter_mut() {
        *v = rng::normal(rng);
    }
    // the sign is always drawn so the stream layout does not depend on tau
    let noise = rng::sign(rng) * tau;
    task.value(x.view()) + T::from_f64_lossy(noise)
}

/// `n` labeled examples drawn one at a time, so a shorter draw from the same
/// stream is a prefix of a longer one.
pub fn sample_examples<T: Real, R: Rng + ?Sized>(
    task: &TaskSpec<T>,
    n: usize,
    tau: f64,
    rng: &mut R,
) -> (Array2<T>, Array1<T>) {
    let d = task.d();
    let mut x = Array2::<T>::zeros((n, d));
    let mut y = Array1::<T>::zeros(n);
    for (i, row) in x.axis_iter_mut(Axis(0)).enumerate() {
        y[i] = draw_example(task, tau, rng, row);
    }
    (x, y)
}

/// Context of length `n` followed by a query, all i.i.d. `N(0, I_d)`.
pub fn sample_prompt<T: Real, R: Rng + ?Sized>(
    task: &TaskSpec<T>,
    n: usize,
    cfg: &ProblemConfig,
    rng: &mut R,
) -> Result<Prompt<T>, TaskError> {
    if n == 0 {
        return Err(TaskError::EmptyContext);
    }
    if task.d() != cfg.d {
        return Err(TaskError::DimensionMismatch {
            expected: cfg.d,
            got: task.d(),
        });
    }
    let (x, y) = sample_examples(task, n, cfg.tau, rng);
    let mut query_x = Array1::<T>::zeros(cfg.d);
    let query_y = draw_example(task, cfg.tau, rng, query_x.view_mut());
    Ok(Prompt {
        x,
        y,
        query_x,
        query_y,
    })
}

/// `E_x[f*(x) h_p(x)] = c_{|p|} prod_j beta_j^{p_j} / sqrt(prod_j p_j!)`,
/// zero when `|p|` is outside `[Q, P]`.
pub fn exact_correlation<T: Real>(task: &TaskSpec<T>, p: &BasisIndex) -> f64 {
    let k = p.total();
    if k < task.q || k > task.p() {
        return 0.0;
    }
    let mono: f64 = p
        .degrees()
        .iter()
        .zip(&task.beta)
        .map(|(&e, b)| b.as_f64().powi(e as i32))
        .product();
    task.coeff(k).as_f64() * mono / p.normalizer()
}
