//! Gauss–Hermite and Gauss–Legendre rules.
//!
//! All values are `f64`.

use std::f64::consts::PI;

const NEWTON_EPS: f64 = 3e-15;
const NEWTON_MAX_IT: usize = 100;

/// Quadrature rule `sum_k weights[k] * f(nodes[k])`.
#[derive(Debug, Clone)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Rule for `E_{z ~ N(0,1)}[f(z)]`: physicists' Gauss–Hermite nodes rescaled
/// by `sqrt(2)` and weights divided by `sqrt(pi)`. Exact for polynomials of
/// degree below `2n`.
///
/// Nodes are the eigenvalues of the Jacobi matrix (Golub–Welsch), polished by
/// one Newton step; weights come from the orthonormal recurrence.
pub fn gauss_hermite_normal(n: usize) -> Rule {
    assert!(n >= 1, "at least one node");
    let mut diag = vec![0.0; n];
    let mut off: Vec<f64> = (1..=n).map(|k| (k as f64 / 2.0).sqrt()).collect();
    off[n - 1] = 0.0;
    tridiagonal_eigenvalues(&mut diag, &mut off);
    diag.sort_by(|a, b| b.total_cmp(a));

    let pim4 = PI.powf(-0.25);
    let nf = n as f64;
    let eval = |z: f64| {
        let mut p1 = pim4;
        let mut p2 = 0.0;
        for j in 0..n {
            let p3 = p2;
            p2 = p1;
            let jf = j as f64;
            p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
        }
        (p1, (2.0 * nf).sqrt() * p2)
    };
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let scale = 2f64.sqrt();
    let norm = PI.sqrt();
    for &z0 in &diag {
        let (p, dp) = eval(z0);
        let z = z0 - p / dp;
        let (_, dp) = eval(z);
        nodes.push(z * scale);
        weights.push(2.0 / (dp * dp) / norm);
    }
    Rule { nodes, weights }
}

/// Eigenvalues of a symmetric tridiagonal matrix by implicit QL with
/// Wilkinson shifts. `diag` is overwritten with the eigenvalues; `off[i]`
/// couples rows `i` and `i + 1` and `off[n-1]` must be zero.
fn tridiagonal_eigenvalues(diag: &mut [f64], off: &mut [f64]) {
    let n = diag.len();
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = diag[m].abs() + diag[m + 1].abs();
                if off[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            assert!(iter < 60, "QL iteration failed to converge");
            let mut g = (diag[l + 1] - diag[l]) / (2.0 * off[l]);
            let mut r = g.hypot(1.0);
            g = diag[m] - diag[l] + off[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            for i in (l..m).rev() {
                let f = s * off[i];
                let b = c * off[i];
                r = f.hypot(g);
                off[i + 1] = r;
                if r == 0.0 {
                    diag[i + 1] -= p;
                    off[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = diag[i + 1] - p;
                r = (diag[i] - g) * s + 2.0 * c * b;
                p = s * r;
                diag[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            diag[l] -= p;
            off[l] = g;
            off[m] = 0.0;
        }
    }
}

/// Gauss–Legendre rule on `[lo, hi]`.
pub fn gauss_legendre(n: usize, lo: f64, hi: f64) -> Rule {
    assert!(n >= 1, "at least one node");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let xm = 0.5 * (hi + lo);
    let xl = 0.5 * (hi - lo);
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..NEWTON_MAX_IT {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= NEWTON_EPS {
                break;
            }
        }
        x[i] = xm - xl * z;
        x[n - 1 - i] = xm + xl * z;
        w[i] = 2.0 * xl / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    Rule {
        nodes: x,
        weights: w,
    }
}
