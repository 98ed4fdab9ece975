//! Empirical checks of the learning mechanism: Stage-I alignment with the
//! index subspace, the population main term of the one-step gradient, Hermite
//! basis approximation by the learned features, and concentration of
//! empirical correlations.
//!
//! Everything here reads coordinates `1..r` directly, so rotated problem
//! configs are refused.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use thiserror::Error;

use crate::hermite::{self, double_factorial, factorial, BasisIndex, HermiteError};
use crate::linalg::{self, LinalgError};
use crate::model::{Gamma, ModelError, ModelParams};
use crate::pretrain::Stage2Data;
use crate::rng::{self, Purpose};
use crate::scalar::Real;
use crate::task::{exact_correlation, sample_examples, sample_prompt, sample_task, ProblemConfig, TaskError, TaskSpec};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("diagnostics need the canonical subspace; the config has a rotation")]
    RotatedSubspace,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Hermite(#[from] HermiteError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("csv output: {0}")]
    Io(#[from] std::io::Error),
}

fn require_canonical(problem: &ProblemConfig) -> Result<(), DiagnosticsError> {
    problem.validate()?;
    if problem.is_canonical() {
        Ok(())
    } else {
        Err(DiagnosticsError::RotatedSubspace)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Leading term of the population gradient statistic at a unit-norm neuron:
///
/// `m(w, b) = 2 a_Q(b)^2 E[c_Q^2] / (Q! (Q-1)!) * (2Q-1)!! / E[z^{2Q}]
///            * |w_{1:r}|^{2Q-2} [w_{1:r}; 0]`.
pub fn population_main_term(
    w: &[f64],
    bias: f64,
    problem: &ProblemConfig,
    coeff_second_moment: f64,
) -> Result<Vec<f64>, DiagnosticsError> {
    require_canonical(problem)?;
    if w.len() != problem.d {
        return Err(DiagnosticsError::InvalidInput(format!("w has length {}, d = {}", w.len(), problem.d)));
    }
    let n = norm(w);
    if (n - 1.0).abs() > 1e-9 {
        return Err(DiagnosticsError::InvalidInput(format!("w must have unit norm, got {n}")));
    }
    let q = problem.q;
    let a = hermite::relu_hermite_coeff(q, bias);
    let pre = 2.0 * a * a * coeff_second_moment / (factorial(q)? * factorial(q - 1)?);
    let chi = double_factorial(2 * i64::from(q) - 1) / hermite::chi_even_moment(problem.r as u32, q);
    let head = norm(&w[..problem.r]);
    let scale = pre * chi * head.powi(2 * q as i32 - 2);
    let mut out = vec![0.0; problem.d];
    for (o, &x) in out.iter_mut().zip(&w[..problem.r]) {
        *o = scale * x;
    }
    Ok(out)
}

/// Monte Carlo estimate of `g(w, b)` from the per-task statistic
/// `y_q relu(w.x_q + b) (1/N) sum_i y_i relu'(w.x_i + b) x_i
///  + y_q relu'(w.x_q + b) x_q (1/N) sum_i y_i relu(w.x_i + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub tasks: usize,
    pub context_len: usize,
    pub empirical: Vec<f64>,
    /// Per-coordinate standard error of `empirical`.
    pub stderr: Vec<f64>,
    pub main_term: Vec<f64>,
    /// `|g_{1:r} - m_{1:r}| / |m_{1:r}|`
    pub relative_deviation: f64,
    /// `(T, |g_{r+1:d}|, sqrt(sum of variances / T))` for task-count prefixes.
    pub off_block: Vec<(usize, f64, f64)>,
}

impl GradientCheck {
    /// Columns: `tasks,off_block_norm,noise_norm`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "tasks,off_block_norm,noise_norm")?;
        for (t, n, s) in &self.off_block {
            writeln!(out, "{t},{n:e},{s:e}")?;
        }
        Ok(())
    }
}

fn gradient_statistic(task: &TaskSpec<f64>, problem: &ProblemConfig, w: &[f64], bias: f64, n: usize, rng: &mut rng::Stream) -> Vec<f64> {
    let prompt = sample_prompt(task, n, problem, rng).expect("validated prompt");
    let wv = ndarray::ArrayView1::from(w);
    let zq = prompt.query_x.dot(&wv) + bias;
    // context averages of y relu'(z) x and y relu(z)
    let mut grad = vec![0.0; problem.d];
    let mut val = 0.0;
    for (row, &y) in prompt.x.rows().into_iter().zip(&prompt.y) {
        let z = row.dot(&wv) + bias;
        if z > 0.0 {
            val += y * z;
            for (a, &x) in grad.iter_mut().zip(row) {
                *a += y * x;
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    let first = prompt.query_y * zq.max(0.0) * inv_n;
    let second = if zq > 0.0 { prompt.query_y * val * inv_n } else { 0.0 };
    grad.iter()
        .zip(prompt.query_x.iter())
        .map(|(g, xq)| first * g + second * xq)
        .collect()
}

/// Estimate `g(w, b)` with `tasks` prompts of context length `context_len`
/// and compare it with [`population_main_term`]. Off-subspace norms are
/// reported for the prefixes `tasks/16`, `tasks/4` and `tasks`.
pub fn empirical_gradient_check(
    problem: &ProblemConfig,
    w: &[f64],
    bias: f64,
    tasks: usize,
    context_len: usize,
    seed: u64,
) -> Result<GradientCheck, DiagnosticsError> {
    let main_term = population_main_term(w, bias, problem, problem.coeff_second_moment())?;
    if tasks == 0 || context_len == 0 {
        return Err(DiagnosticsError::InvalidInput("need tasks >= 1 and context_len >= 1".into()));
    }
    let (d, r) = (problem.d, problem.r);
    let samples: Vec<Vec<f64>> = (0..tasks)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(seed, Purpose::Diagnostic, t as u64);
            let task = sample_task::<f64, _>(problem, &mut rng).expect("validated problem");
            gradient_statistic(&task, problem, w, bias, context_len, &mut rng)
        })
        .collect();

    let mut marks: Vec<usize> = [tasks / 16, tasks / 4, tasks].into_iter().filter(|&t| t > 0).collect();
    marks.dedup();
    let mut sum = vec![0.0; d];
    let mut sumsq = vec![0.0; d];
    let mut off_block = Vec::new();
    let mut next = 0;
    for (t, s) in samples.iter().enumerate() {
        for k in 0..d {
            sum[k] += s[k];
            sumsq[k] += s[k] * s[k];
        }
        if next < marks.len() && t + 1 == marks[next] {
            let n = (t + 1) as f64;
            let off: Vec<f64> = sum[r..].iter().map(|v| v / n).collect();
            let var: f64 = (r..d)
                .map(|k| {
                    let mean = sum[k] / n;
                    (sumsq[k] / n - mean * mean).max(0.0)
                })
                .sum();
            off_block.push((t + 1, norm(&off), (var / n).sqrt()));
            next += 1;
        }
    }
    let n = tasks as f64;
    let empirical: Vec<f64> = sum.iter().map(|v| v / n).collect();
    let stderr: Vec<f64> = (0..d)
        .map(|k| {
            let mean = empirical[k];
            let var = (sumsq[k] / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
            (var / n).sqrt()
        })
        .collect();
    let diff: Vec<f64> = (0..r).map(|k| empirical[k] - main_term[k]).collect();
    let relative_deviation = norm(&diff) / norm(&main_term[..r]);
    Ok(GradientCheck {
        tasks,
        context_len,
        empirical,
        stderr,
        main_term,
        relative_deviation,
        off_block,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    /// `|w_{1:r}|^2 / |w|^2` per neuron.
    pub ratios: Vec<f64>,
    pub mean_ratio: f64,
    pub stderr: f64,
    /// `r / d`, the mean ratio of a uniformly random direction.
    pub baseline: f64,
    /// `|cos|` between each trained row and the main-term direction
    /// `[w0_{1:r}; 0]` of its initial row, when the initial weights are given.
    pub main_term_cosines: Option<Vec<f64>>,
}

impl AlignmentReport {
    /// Columns: `neuron,ratio,main_term_cosine` (the last is empty when
    /// cosines were not computed).
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "neuron,ratio,main_term_cosine")?;
        for (j, r) in self.ratios.iter().enumerate() {
            match &self.main_term_cosines {
                Some(c) => writeln!(out, "{j},{r},{}", c[j])?,
                None => writeln!(out, "{j},{r},")?,
            }
        }
        Ok(())
    }
}

pub fn alignment_report<T: Real>(
    w: ArrayView2<'_, T>,
    initial: Option<ArrayView2<'_, T>>,
    problem: &ProblemConfig,
) -> Result<AlignmentReport, DiagnosticsError> {
    require_canonical(problem)?;
    let (m, d) = w.dim();
    if d != problem.d || m == 0 {
        return Err(DiagnosticsError::InvalidInput(format!("weights are {m}x{d}, problem has d = {}", problem.d)));
    }
    let r = problem.r;
    let ratios: Vec<f64> = w
        .rows()
        .into_iter()
        .map(|row| {
            let head: f64 = row.iter().take(r).map(|v| v.as_f64().powi(2)).sum();
            let all: f64 = row.iter().map(|v| v.as_f64().powi(2)).sum();
            if all > 0.0 {
                head / all
            } else {
                0.0
            }
        })
        .collect();
    let mean = ratios.iter().sum::<f64>() / m as f64;
    let var = ratios.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m as f64 - 1.0).max(1.0);
    let cosines = match initial {
        None => None,
        Some(w0) => {
            if w0.dim() != w.dim() {
                return Err(DiagnosticsError::InvalidInput("initial weights have a different shape".into()));
            }
            Some(
                w.rows()
                    .into_iter()
                    .zip(w0.rows())
                    .map(|(a, b)| {
                        let dot: f64 = (0..r).map(|k| a[k].as_f64() * b[k].as_f64()).sum();
                        let na: f64 = a.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
                        let nb: f64 = (0..r).map(|k| b[k].as_f64().powi(2)).sum::<f64>().sqrt();
                        if na > 0.0 && nb > 0.0 {
                            (dot / (na * nb)).abs()
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )
        }
    };
    Ok(AlignmentReport {
        ratios,
        mean_ratio: mean,
        stderr: (var / m as f64).sqrt(),
        baseline: r as f64 / d as f64,
        main_term_cosines: cosines,
    })
}

/// Least-squares fit of each basis function by the frozen features.
#[derive(Debug, Clone)]
pub struct BasisFit<T> {
    pub basis: Vec<BasisIndex>,
    /// `m x B_P`; column `n` is `a^n`.
    pub a: Array2<T>,
    /// Root-mean-square residual per basis element on the fitting sample.
    pub residuals: Vec<f64>,
    /// `|a^n|^2`
    pub coeff_norms_sq: Vec<f64>,
    pub ridge: f64,
}

impl<T> BasisFit<T> {
    pub fn mean_residual(&self) -> f64 {
        self.residuals.iter().sum::<f64>() / self.residuals.len() as f64
    }

    /// Columns: `basis,degree,residual_rms,coeff_norm_sq`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "basis,degree,residual_rms,coeff_norm_sq")?;
        for ((p, r), c) in self.basis.iter().zip(&self.residuals).zip(&self.coeff_norms_sq) {
            writeln!(out, "{},{},{r:e},{c:e}", p.to_string().replace(',', " "), p.total())?;
        }
        Ok(())
    }
}

/// Solve `(Phi^T Phi / M + lambda I) a^n = Phi^T h_n / M` for every basis
/// element, with `Phi = relu(X W^T + b)` on `x` (`M x d`). `ridge = None`
/// uses `lambda = 1e-8 tr(Phi^T Phi / M) / m`.
pub fn fit_basis_network<T: Real>(
    features: &ModelParams<T>,
    x: ArrayView2<'_, T>,
    basis: &[BasisIndex],
    problem: &ProblemConfig,
    ridge: Option<f64>,
) -> Result<BasisFit<T>, DiagnosticsError> {
    require_canonical(problem)?;
    let (big_m, d) = x.dim();
    if d != features.d() || d != problem.d {
        return Err(DiagnosticsError::InvalidInput("sample dimension mismatch".into()));
    }
    if basis.is_empty() || basis.iter().any(|p| p.r() != problem.r) {
        return Err(DiagnosticsError::InvalidInput("basis must be non-empty with r coordinates".into()));
    }
    if big_m < basis.len() {
        return Err(DiagnosticsError::InvalidInput(format!("need at least {} samples, got {big_m}", basis.len())));
    }
    let m = features.m();
    let phi = features.features(x);
    let mut targets = Array2::<T>::zeros((big_m, basis.len()));
    for (i, mut row) in targets.rows_mut().into_iter().enumerate() {
        let head: Vec<T> = x.row(i).iter().take(problem.r).copied().collect();
        hermite::eval_basis_all(basis, &head, row.as_slice_mut().unwrap());
    }
    let inv_m = T::from_f64_lossy(1.0 / big_m as f64);
    let mut gram = phi.t().dot(&phi) * inv_m;
    let trace: f64 = gram.diag().iter().map(|v| v.as_f64()).sum();
    let lambda = ridge.unwrap_or(1e-8 * trace / m as f64);
    for i in 0..m {
        gram[[i, i]] += T::from_f64_lossy(lambda);
    }
    let l = linalg::cholesky(&gram)?;
    let rhs = phi.t().dot(&targets) * inv_m;
    let cols: Vec<Array1<T>> = (0..basis.len())
        .into_par_iter()
        .map(|n| linalg::cholesky_solve(&l, rhs.column(n)))
        .collect();
    let mut a = Array2::<T>::zeros((m, basis.len()));
    for (n, c) in cols.iter().enumerate() {
        a.column_mut(n).assign(c);
    }
    let fitted = phi.dot(&a);
    let residuals = (0..basis.len())
        .map(|n| {
            let ss: f64 = fitted
                .column(n)
                .iter()
                .zip(targets.column(n))
                .map(|(f, t)| (*f - *t).as_f64().powi(2))
                .sum();
            (ss / big_m as f64).sqrt()
        })
        .collect();
    let coeff_norms_sq = a.axis_iter(Axis(1)).map(|c| c.dot(&c).as_f64()).collect();
    Ok(BasisFit {
        basis: basis.to_vec(),
        a,
        residuals,
        coeff_norms_sq,
        ridge: lambda,
    })
}

#[derive(Debug, Clone)]
pub struct ConstructedGammaEval<T> {
    pub gamma: Gamma<T>,
    /// Mean absolute error on the evaluation prompts.
    pub risk: f64,
    pub risk_stderr: f64,
    pub frobenius: f64,
}

/// Attention with `Gamma = A A^T` on the frozen features, scored on
/// `prompts` by mean absolute error.
pub fn constructed_gamma_eval<T: Real>(
    fit: &BasisFit<T>,
    features: &ModelParams<T>,
    prompts: &[crate::task::Prompt<T>],
) -> Result<ConstructedGammaEval<T>, DiagnosticsError> {
    if prompts.is_empty() {
        return Err(DiagnosticsError::InvalidInput("no evaluation prompts".into()));
    }
    let gamma = Gamma::gram(fit.a.view());
    let model = ModelParams::new(features.w.clone(), features.b.clone(), gamma.clone())?;
    let errs: Vec<f64> = prompts
        .par_iter()
        .map(|p| model.forward(p).map(|f| (f - p.query_y).abs().as_f64()))
        .collect::<Result<_, _>>()?;
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(ConstructedGammaEval {
        frobenius: gamma.frobenius_sq().as_f64().sqrt(),
        gamma,
        risk: mean,
        risk_stderr: (var / n).sqrt(),
    })
}

/// Stage-II objective of the constructed `Gamma`, for comparison with the
/// ridge solution.
pub fn constructed_gamma_objective<T: Real>(fit: &BasisFit<T>, data: &Stage2Data<T>, lambda2: f64) -> f64 {
    data.objective(&Gamma::gram(fit.a.view()), lambda2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationRow {
    pub n: usize,
    pub mean_abs_error: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Concentration {
    pub rows: Vec<ConcentrationRow>,
    pub exact: f64,
    /// Least-squares slope of `log(mean_abs_error)` against `log(n)`.
    pub slope: f64,
}

impl Concentration {
    /// Columns: `n,mean_abs_error,stderr`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "n,mean_abs_error,stderr")?;
        for r in &self.rows {
            writeln!(out, "{},{:e},{:e}", r.n, r.mean_abs_error, r.stderr)?;
        }
        Ok(())
    }
}

pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x.ln(), b + y.ln()));
    let (mx, my) = (sx / n, sy / n);
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in points {
        num += (x.ln() - mx) * (y.ln() - my);
        den += (x.ln() - mx).powi(2);
    }
    num / den
}

/// `|(1/N) sum_i y_i h_p(x_i) - E[f* h_p]|` averaged over `reps` independent
/// contexts for each `N` in `grid`. Each repetition draws `max(grid)`
/// examples and reads the shorter contexts as prefixes.
pub fn correlation_concentration(
    problem: &ProblemConfig,
    task: &TaskSpec<f64>,
    p: &BasisIndex,
    grid: &[usize],
    reps: usize,
    seed: u64,
) -> Result<Concentration, DiagnosticsError> {
    require_canonical(problem)?;
    if p.r() != problem.r || task.d() != problem.d {
        return Err(DiagnosticsError::InvalidInput("basis index or task does not match the problem".into()));
    }
    if p.total() < problem.q || p.total() > problem.p {
        return Err(DiagnosticsError::InvalidInput(format!("|p| = {} outside [Q, P]", p.total())));
    }
    if grid.is_empty() || grid.contains(&0) || reps == 0 {
        return Err(DiagnosticsError::InvalidInput("need a non-empty grid of positive N and reps >= 1".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let nmax = *grid.last().unwrap();
    let exact = exact_correlation(task, p);
    let errs: Vec<Vec<f64>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rng::stream(seed, Purpose::Diagnostic, rep as u64);
            let (x, y) = sample_examples(task, nmax, problem.tau, &mut rng);
            let mut out = Vec::with_capacity(grid.len());
            let mut acc = 0.0;
            let mut g = 0;
            for i in 0..nmax {
                let h = hermite::eval_basis(p, &x.row(i).as_slice().unwrap()[..problem.r]).expect("checked length");
                acc += y[i] * h;
                if i + 1 == grid[g] {
                    out.push((acc / (i + 1) as f64 - exact).abs());
                    g += 1;
                }
            }
            out
        })
        .collect();
    let rows: Vec<ConcentrationRow> = grid
        .iter()
        .enumerate()
        .map(|(g, &n)| {
            let k = reps as f64;
            let mean = errs.iter().map(|e| e[g]).sum::<f64>() / k;
            let var = errs.iter().map(|e| (e[g] - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
            ConcentrationRow {
                n,
                mean_abs_error: mean,
                stderr: (var / k).sqrt(),
            }
        })
        .collect();
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.n as f64, r.mean_abs_error)).collect();
    Ok(Concentration {
        slope: log_log_slope(&pts),
        rows,
        exact,
    })
}

/// `n` i.i.d. standard Gaussian inputs in `d` dimensions from one diagnostic
/// stream.
pub fn gaussian_sample<T: Real>(n: usize, d: usize, seed: u64, index: u64) -> Array2<T> {
    let mut rng = rng::stream(seed, Purpose::Diagnostic, index);
    let mut x = Array2::<T>::zeros((n, d));
    rng::fill_normal(&mut rng, x.as_slice_mut().unwrap());
    x
}
