//! Small dense solvers and deterministic reductions.

use std::ops::AddAssign;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
}

/// Lower Cholesky factor `L` with `A = L L^T`. Only the lower triangle of
/// `a` is read.
pub fn cholesky<T: Real>(a: &Array2<T>) -> Result<Array2<T>, LinalgError> {
    let (n, c) = a.dim();
    if n != c {
        return Err(LinalgError::NotSquare { rows: n, cols: c });
    }
    let mut l = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
            let s = a[[i, j]] - dot(ri, rj);
            if i == j {
                if !(s > T::zero()) {
                    return Err(LinalgError::NotPositiveDefinite {
                        pivot: i,
                        value: s.as_f64(),
                    });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(Array2::from_shape_vec((n, n), l).expect("square buffer"))
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // four accumulators so the loop vectorizes
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        for (q, slot) in acc.iter_mut().enumerate() {
            *slot += a[4 * k + q] * b[4 * k + q];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// Solve `L L^T x = b` given the lower factor.
pub fn cholesky_solve<T: Real>(l: &Array2<T>, b: ArrayView1<'_, T>) -> Array1<T> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in 0..n {
        let row = l.row(i);
        let mut s = x[i];
        for k in 0..i {
            s -= row[k] * x[k];
        }
        x[i] = s / row[i];
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solve for several right-hand sides stored as columns.
pub fn cholesky_solve_many<T: Real>(l: &Array2<T>, b: &Array2<T>) -> Array2<T> {
    let mut out = Array2::<T>::zeros(b.dim());
    for (k, col) in b.axis_iter(Axis(1)).enumerate() {
        out.column_mut(k).assign(&cholesky_solve(l, col));
    }
    out
}

#[derive(Debug, Clone)]
pub struct CgOutcome<T> {
    pub x: Array1<T>,
    pub iterations: usize,
    /// `||b - A x|| / ||b||` at exit.
    pub relative_residual: f64,
    pub converged: bool,
}

/// Preconditioned conjugate gradient for a symmetric positive definite
/// operator given as a closure. `precond` holds the inverse of a diagonal
/// preconditioner (all ones for plain CG).
pub fn conjugate_gradient<T, F>(
    mut apply: F,
    b: ArrayView1<'_, T>,
    precond: ArrayView1<'_, T>,
    tol: f64,
    max_iter: usize,
) -> CgOutcome<T>
where
    T: Real,
    F: FnMut(ArrayView1<'_, T>) -> Array1<T>,
{
    let n = b.len();
    let bnorm = b.dot(&b).sqrt().as_f64();
    let mut x = Array1::<T>::zeros(n);
    if bnorm == 0.0 {
        return CgOutcome {
            x,
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        };
    }
    let mut r = b.to_owned();
    let mut z = &r * &precond;
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut rel = 1.0;
    for it in 0..max_iter {
        let ap = apply(p.view());
        let pap = p.dot(&ap);
        // breakdown: the operator is not positive definite in floating point
        if !(pap > T::zero()) || !pap.is_finite() {
            return CgOutcome {
                x,
                iterations: it,
                relative_residual: rel,
                converged: false,
            };
        }
        let alpha = rz / pap;
        x.scaled_add(alpha, &p);
        // recompute the true residual now and then to limit drift
        if (it + 1) % 50 == 0 {
            r = &b - &apply(x.view());
        } else {
            r.scaled_add(-alpha, &ap);
        }
        rel = r.dot(&r).sqrt().as_f64() / bnorm;
        if rel <= tol {
            return CgOutcome {
                x,
                iterations: it + 1,
                relative_residual: rel,
                converged: true,
            };
        }
        z = &r * &precond;
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p *= beta;
        p += &z;
    }
    CgOutcome {
        x,
        iterations: max_iter,
        relative_residual: rel,
        converged: false,
    }
}

/// Pairwise (cascade) summation: values are pushed in order and merged like
/// a binary counter, so the rounding error grows with `log n`.
pub struct PairwiseSum<V> {
    stack: Vec<(u32, V)>,
}

impl<V> Default for PairwiseSum<V> {
    fn default() -> Self {
        Self { stack: Vec::new() }
    }
}

impl<V> PairwiseSum<V>
where
    V: for<'a> AddAssign<&'a V>,
{
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, v: V) {
        let mut cur = (0u32, v);
        while let Some((level, _)) = self.stack.last() {
            if *level != cur.0 {
                break;
            }
            let (level, mut prev) = self.stack.pop().unwrap();
            prev += &cur.1;
            cur = (level + 1, prev);
        }
        self.stack.push(cur);
    }

    pub fn finish(mut self) -> Option<V> {
        let (_, mut acc) = self.stack.pop()?;
        while let Some((_, mut prev)) = self.stack.pop() {
            prev += &acc;
            acc = prev;
        }
        Some(acc)
    }
}

/// Items per reduction block. Blocks are fixed by index, not by thread, so
/// results do not depend on the thread count.
pub const REDUCE_BLOCK: usize = 16;

/// `sum_{i < n} f(i)` evaluated in parallel with a schedule-independent
/// summation order.
pub fn parallel_pairwise_sum<V, F>(n: usize, f: F) -> Option<V>
where
    V: for<'a> AddAssign<&'a V> + Send,
    F: Fn(usize) -> V + Sync,
{
    let blocks: Vec<V> = (0..n.div_ceil(REDUCE_BLOCK))
        .into_par_iter()
        .filter_map(|blk| {
            let mut acc = PairwiseSum::new();
            for i in blk * REDUCE_BLOCK..((blk + 1) * REDUCE_BLOCK).min(n) {
                acc.push(f(i));
            }
            acc.finish()
        })
        .collect();
    let mut acc = PairwiseSum::new();
    for v in blocks {
        acc.push(v);
    }
    acc.finish()
}
