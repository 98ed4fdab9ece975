//! Probabilists' Hermite polynomials, the orthonormal product basis on the
//! first `r` coordinates, ReLU Hermite coefficients and chi moments.

use std::f64::consts::PI;
use std::fmt;
use std::sync::OnceLock;

use thiserror::Error;

use crate::quadrature::{gauss_legendre, Rule};
use crate::scalar::Real;

/// Largest degree whose factorial is handled (20! is exact in `f64`).
pub const MAX_DEGREE: u32 = 20;

/// Node count of the rule behind [`relu_hermite_coeff`].
pub const RELU_QUADRATURE_NODES: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HermiteError {
    #[error("degree range requires 2 <= Q <= P, got Q={q}, P={p}")]
    InvalidDegreeRange { q: u32, p: u32 },
    #[error("subspace dimension must be at least 1")]
    EmptySubspace,
    #[error("degree {0} exceeds the supported maximum of {MAX_DEGREE}")]
    DegreeTooLarge(u32),
    #[error("basis index has total degree {0}; the basis starts at degree 2")]
    DegenerateIndex(u32),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// `He_n(z)` by the three-term recurrence.
pub fn hermite<T: Real>(n: usize, z: T) -> T {
    let mut prev = T::one();
    if n == 0 {
        return prev;
    }
    let mut cur = z;
    for k in 1..n {
        let next = z * cur - T::from_usize(k).unwrap() * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// `[He_0(z), ..., He_n(z)]`.
pub fn hermite_table<T: Real>(n: usize, z: T) -> Vec<T> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(T::one());
    if n >= 1 {
        out.push(z);
    }
    for k in 1..n {
        let next = z * out[k] - T::from_usize(k).unwrap() * out[k - 1];
        out.push(next);
    }
    out
}

pub fn factorial(n: u32) -> Result<f64, HermiteError> {
    if n > MAX_DEGREE {
        return Err(HermiteError::DegreeTooLarge(n));
    }
    Ok((1..=n).map(f64::from).product())
}

/// `n!!`, with `0!! = (-1)!! = 1`.
pub fn double_factorial(n: i64) -> f64 {
    let mut acc = 1.0;
    let mut k = n;
    while k > 1 {
        acc *= k as f64;
        k -= 2;
    }
    acc
}

pub fn binomial(n: u64, k: u64) -> u64 {
    assert!(k <= n);
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// Multi-index `p = (p_1, ..., p_r)` naming the basis element
/// `h_p(x) = prod_j He_{p_j}(x_j) / sqrt(p_j!)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BasisIndex(Vec<u32>);

impl BasisIndex {
    /// Rejects total degree below 2 or above [`MAX_DEGREE`].
    pub fn new(degrees: Vec<u32>) -> Result<Self, HermiteError> {
        if degrees.is_empty() {
            return Err(HermiteError::EmptySubspace);
        }
        let total: u32 = degrees.iter().sum();
        if total < 2 {
            return Err(HermiteError::DegenerateIndex(total));
        }
        if total > MAX_DEGREE {
            return Err(HermiteError::DegreeTooLarge(total));
        }
        Ok(Self(degrees))
    }

    pub fn degrees(&self) -> &[u32] {
        &self.0
    }

    pub fn total(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn r(&self) -> usize {
        self.0.len()
    }

    /// `sqrt(prod_j p_j!)`
    pub fn normalizer(&self) -> f64 {
        self.0
            .iter()
            .map(|&k| factorial(k).expect("bounded by MAX_DEGREE"))
            .product::<f64>()
            .sqrt()
    }
}

impl fmt::Display for BasisIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, k) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{k}")?;
        }
        write!(f, ")")
    }
}

fn check_range(q: u32, p: u32) -> Result<(), HermiteError> {
    if q < 2 || p < q {
        return Err(HermiteError::InvalidDegreeRange { q, p });
    }
    if p > MAX_DEGREE {
        return Err(HermiteError::DegreeTooLarge(p));
    }
    Ok(())
}

/// `B_P = sum_{i=Q}^{P} C(r+i-1, i)`.
pub fn basis_count(r: usize, q: u32, p: u32) -> Result<usize, HermiteError> {
    check_range(q, p)?;
    if r == 0 {
        return Err(HermiteError::EmptySubspace);
    }
    Ok((q..=p)
        .map(|i| binomial(r as u64 + i as u64 - 1, i as u64) as usize)
        .sum())
}

/// All indices with `Q <= |p| <= P`, ordered by total degree and, within a
/// degree, lexicographically descending: for `r = 2, Q = P = 2` the order is
/// `(2,0), (1,1), (0,2)`.
pub fn enumerate_basis(r: usize, q: u32, p: u32) -> Result<Vec<BasisIndex>, HermiteError> {
    check_range(q, p)?;
    if r == 0 {
        return Err(HermiteError::EmptySubspace);
    }
    let mut out = Vec::with_capacity(basis_count(r, q, p)?);
    let mut buf = vec![0u32; r];
    for deg in q..=p {
        compositions(deg, 0, &mut buf, &mut out);
    }
    Ok(out)
}

fn compositions(remaining: u32, pos: usize, buf: &mut Vec<u32>, out: &mut Vec<BasisIndex>) {
    if pos + 1 == buf.len() {
        buf[pos] = remaining;
        out.push(BasisIndex(buf.clone()));
        return;
    }
    for k in (0..=remaining).rev() {
        buf[pos] = k;
        compositions(remaining - k, pos + 1, buf, out);
    }
}

/// `h_p(x_head) = prod_j He_{p_j}(x_j) / sqrt(prod_j p_j!)`.
pub fn eval_basis<T: Real>(p: &BasisIndex, x_head: &[T]) -> Result<T, HermiteError> {
    if x_head.len() != p.r() {
        return Err(HermiteError::DimensionMismatch {
            expected: p.r(),
            got: x_head.len(),
        });
    }
    Ok(eval_basis_unchecked(p, x_head))
}

#[inline]
pub(crate) fn eval_basis_unchecked<T: Real>(p: &BasisIndex, x_head: &[T]) -> T {
    let mut acc = T::one();
    for (&k, &x) in p.0.iter().zip(x_head) {
        if k > 0 {
            acc = acc * hermite(k as usize, x);
        }
    }
    acc / T::from_f64_lossy(p.normalizer())
}

/// Evaluate every basis element at one point, sharing the per-coordinate
/// Hermite tables.
pub fn eval_basis_all<T: Real>(basis: &[BasisIndex], x_head: &[T], out: &mut [T]) {
    let max_deg = basis.iter().map(|b| b.total()).max().unwrap_or(0) as usize;
    let tables: Vec<Vec<T>> = x_head.iter().map(|&x| hermite_table(max_deg, x)).collect();
    for (o, p) in out.iter_mut().zip(basis) {
        let mut acc = T::one();
        for (j, &k) in p.0.iter().enumerate() {
            acc = acc * tables[j][k as usize];
        }
        *o = acc / T::from_f64_lossy(p.normalizer());
    }
}

fn relu_rule() -> &'static Rule {
    static RULE: OnceLock<Rule> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(RELU_QUADRATURE_NODES, 0.0, 1.0))
}

/// Width of the integration window beyond the kink; the Gaussian tail past
/// it is below 1e-40 for every degree in range.
const RELU_WINDOW: f64 = 16.0;

/// `a_i(b) = E_{z~N(0,1)}[relu(z + b) He_i(z)]`.
///
/// The integrand vanishes for `z < -b`, so the integral is taken over
/// `[-b, -b + window]` where it is analytic, with a 200-node Gauss–Legendre
/// rule. The window is widened when `b` is negative enough that the bulk of
/// the Gaussian sits to the right of it.
pub fn relu_hermite_coeff(i: u32, bias: f64) -> f64 {
    let lo = -bias;
    let hi = lo.max(0.0) + RELU_WINDOW;
    let len = hi - lo;
    let inv_sqrt_2pi = 1.0 / (2.0 * PI).sqrt();
    relu_rule().integrate(|t| {
        let z = lo + len * t;
        len * (z + bias) * hermite(i as usize, z) * inv_sqrt_2pi * (-0.5 * z * z).exp()
    })
}

/// `E_{z~chi_r}[z^{2Q}] = prod_{k=0}^{Q-1} (r + 2k)`.
pub fn chi_even_moment(r: u32, q: u32) -> f64 {
    (0..q).map(|k| f64::from(r + 2 * k)).product()
}
