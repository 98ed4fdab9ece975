//! MLP embedding followed by one linear-attention layer.
//!
//! The prediction on a prompt is `phi(x)^T Gamma u` with
//! `phi(x) = relu(W x + b)` and `u = (1/N) sum_i y_i phi(x_i)`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use thiserror::Error;

use crate::scalar::Real;
use crate::task::{Context, Prompt};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("empty context")]
    EmptyContext,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check(what: &'static str, expected: usize, got: usize) -> Result<(), ModelError> {
    if expected == got {
        Ok(())
    } else {
        Err(ModelError::DimensionMismatch { what, expected, got })
    }
}

/// Attention matrix storage.
#[derive(Debug, Clone, PartialEq)]
pub enum Gamma<T> {
    Dense(Array2<T>),
    Diagonal(Array1<T>),
    /// `Gamma = left^T right = sum_k left_k right_k^T`; both factors are `k x m`.
    LowRank { left: Array2<T>, right: Array2<T> },
}

impl<T: Real> Gamma<T> {
    pub fn zeros_diagonal(m: usize) -> Self {
        Gamma::Diagonal(Array1::zeros(m))
    }

    /// Symmetric `A A^T` for `A` of shape `m x k`.
    pub fn gram(a: ArrayView2<'_, T>) -> Self {
        let f = a.t().to_owned();
        Gamma::LowRank {
            left: f.clone(),
            right: f,
        }
    }

    pub fn order(&self) -> usize {
        match self {
            Gamma::Dense(g) => g.nrows(),
            Gamma::Diagonal(g) => g.len(),
            Gamma::LowRank { left, .. } => left.ncols(),
        }
    }

    pub fn layout_tag(&self) -> u8 {
        match self {
            Gamma::Dense(_) => 0,
            Gamma::Diagonal(_) => 1,
            Gamma::LowRank { .. } => 2,
        }
    }

    fn rank(&self) -> usize {
        match self {
            Gamma::LowRank { left, .. } => left.nrows(),
            _ => 0,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        match self {
            Gamma::Dense(g) => check("dense gamma columns", g.nrows(), g.ncols()),
            Gamma::Diagonal(_) => Ok(()),
            Gamma::LowRank { left, right } => {
                check("low-rank factor rank", left.nrows(), right.nrows())?;
                check("low-rank factor order", left.ncols(), right.ncols())
            }
        }
    }

    /// `Gamma u`
    pub fn apply(&self, u: ArrayView1<'_, T>) -> Array1<T> {
        match self {
            Gamma::Dense(g) => g.dot(&u),
            Gamma::Diagonal(g) => g * &u,
            Gamma::LowRank { left, right } => left.t().dot(&right.dot(&u)),
        }
    }

    /// `v^T Gamma u`
    pub fn bilinear(&self, v: ArrayView1<'_, T>, u: ArrayView1<'_, T>) -> T {
        match self {
            Gamma::Dense(g) => v.dot(&g.dot(&u)),
            Gamma::Diagonal(g) => g
                .iter()
                .zip(v.iter().zip(u.iter()))
                .fold(T::zero(), |acc, (&gj, (&vj, &uj))| acc + gj * vj * uj),
            Gamma::LowRank { left, right } => left.dot(&v).dot(&right.dot(&u)),
        }
    }

    /// `v_t^T Gamma u_t` for every row pair of `v` and `u`.
    pub fn bilinear_rows(&self, v: ArrayView2<'_, T>, u: ArrayView2<'_, T>) -> Array1<T> {
        let rowdot = |a: Array2<T>, b: ArrayView2<'_, T>| {
            Array1::from_iter(a.rows().into_iter().zip(b.rows()).map(|(x, y)| x.dot(&y)))
        };
        match self {
            Gamma::Dense(g) => rowdot(v.dot(g), u),
            Gamma::Diagonal(g) => rowdot(&v * g, u),
            Gamma::LowRank { left, right } => rowdot(v.dot(&left.t()), u.dot(&right.t()).view()),
        }
    }

    pub fn to_dense(&self) -> Array2<T> {
        match self {
            Gamma::Dense(g) => g.clone(),
            Gamma::Diagonal(g) => Array2::from_diag(g),
            Gamma::LowRank { left, right } => left.t().dot(right),
        }
    }

    /// `||Gamma||_F^2`
    pub fn frobenius_sq(&self) -> T {
        match self {
            Gamma::Dense(g) => g.iter().fold(T::zero(), |a, &x| a + x * x),
            Gamma::Diagonal(g) => g.iter().fold(T::zero(), |a, &x| a + x * x),
            Gamma::LowRank { left, right } => {
                // trace((L L^T)(R R^T))
                let ll = left.dot(&left.t());
                let rr = right.dot(&right.t());
                ll.iter().zip(rr.iter()).fold(T::zero(), |a, (&x, &y)| a + x * y)
            }
        }
    }
}

/// Transformer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// `m x d`, one neuron per row.
    pub w: Array2<T>,
    pub b: Array1<T>,
    pub gamma: Gamma<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn new(w: Array2<T>, b: Array1<T>, gamma: Gamma<T>) -> Result<Self, ModelError> {
        check("bias length", w.nrows(), b.len())?;
        check("gamma order", w.nrows(), gamma.order())?;
        gamma.validate()?;
        Ok(Self { w, b, gamma })
    }

    pub fn m(&self) -> usize {
        self.w.nrows()
    }

    pub fn d(&self) -> usize {
        self.w.ncols()
    }

    /// Pre-activations `X W^T + b` for inputs stored as rows.
    pub fn preactivations(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut z = x.dot(&self.w.t());
        z += &self.b;
        z
    }

    /// `relu(X W^T + b)`, shape `n x m`.
    pub fn features(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        self.preactivations(x).mapv_into(Real::relu)
    }

    pub fn feature(&self, x: ArrayView1<'_, T>) -> Array1<T> {
        let mut z = self.w.dot(&x);
        z.zip_mut_with(&self.b, |zi, &bi| *zi = (*zi + bi).relu());
        z
    }

    /// `u = (1/N) sum_i y_i phi(x_i)`
    pub fn context_vector(&self, ctx: &Context<'_, T>) -> Result<Array1<T>, ModelError> {
        if ctx.is_empty() {
            return Err(ModelError::EmptyContext);
        }
        check("context dimension", self.d(), ctx.d())?;
        let n = T::from_usize(ctx.len()).unwrap();
        Ok(self.features(ctx.x).t().dot(&ctx.y) / n)
    }

    /// The `(m+1) x (N+1)` embedding matrix.
    pub fn embed(&self, prompt: &Prompt<T>) -> Result<Array2<T>, ModelError> {
        check("prompt dimension", self.d(), prompt.d())?;
        let (m, n) = (self.m(), prompt.len());
        let mut e = Array2::<T>::zeros((m + 1, n + 1));
        if n > 0 {
            let f = self.features(prompt.x.view());
            e.slice_mut(ndarray::s![..m, ..n]).assign(&f.t());
            e.slice_mut(ndarray::s![m, ..n]).assign(&prompt.y);
        }
        e.slice_mut(ndarray::s![..m, n]).assign(&self.feature(prompt.query_x.view()));
        Ok(e)
    }

    pub fn forward(&self, prompt: &Prompt<T>) -> Result<T, ModelError> {
        check("query dimension", self.d(), prompt.d())?;
        let u = self.context_vector(&prompt.context())?;
        let v = self.feature(prompt.query_x.view());
        Ok(self.gamma.bilinear(v.view(), u.view()))
    }

    /// Predictions for many queries sharing one context.
    pub fn predict(&self, ctx: &Context<'_, T>, queries: ArrayView2<'_, T>) -> Result<Array1<T>, ModelError> {
        check("query dimension", self.d(), queries.ncols())?;
        let u = self.context_vector(ctx)?;
        let gu = self.gamma.apply(u.view());
        Ok(self.features(queries).dot(&gu))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    /// Checkpoint layout, all little-endian:
    ///
    /// | field | type |
    /// |---|---|
    /// | magic `ICLM` | 4 bytes |
    /// | version (1) | u32 |
    /// | scalar width (4 or 8) | u8 |
    /// | m, d | u64, u64 |
    /// | gamma layout (0 dense, 1 diagonal, 2 low-rank) | u8 |
    /// | rank (low-rank only, else 0) | u64 |
    /// | W (m x d), b (m), gamma payload | row-major scalars |
    ///
    /// Gamma payloads: dense `m x m`; diagonal `m`; low-rank `left` then
    /// `right`, each `rank x m`.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<(), ModelError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.push(T::BYTES);
        buf.extend_from_slice(&(self.m() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.d() as u64).to_le_bytes());
        buf.push(self.gamma.layout_tag());
        buf.extend_from_slice(&(self.gamma.rank() as u64).to_le_bytes());
        let mut push = |xs: &mut dyn Iterator<Item = &T>| xs.for_each(|x| x.to_le_bytes_vec(&mut buf));
        push(&mut self.w.iter());
        push(&mut self.b.iter());
        match &self.gamma {
            Gamma::Dense(g) => push(&mut g.iter()),
            Gamma::Diagonal(g) => push(&mut g.iter()),
            Gamma::LowRank { left, right } => {
                push(&mut left.iter());
                push(&mut right.iter());
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self, ModelError> {
        let mut head = [0u8; 4 + 4 + 1 + 8 + 8 + 1 + 8];
        input.read_exact(&mut head)?;
        if &head[..4] != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        if head[8] != T::BYTES {
            return Err(ModelError::Checkpoint(format!(
                "scalar width {} does not match requested {}",
                head[8],
                T::BYTES
            )));
        }
        let m = u64::from_le_bytes(head[9..17].try_into().unwrap()) as usize;
        let d = u64::from_le_bytes(head[17..25].try_into().unwrap()) as usize;
        let layout = head[25];
        let rank = u64::from_le_bytes(head[26..34].try_into().unwrap()) as usize;
        let width = T::BYTES as usize;
        let mut read = |n: usize| -> Result<Vec<T>, ModelError> {
            let mut raw = vec![0u8; n * width];
            input.read_exact(&mut raw)?;
            Ok(raw.chunks_exact(width).map(T::from_le_slice).collect())
        };
        let shape = |r, c, v| Array2::from_shape_vec((r, c), v).expect("sized read");
        let w = shape(m, d, read(m * d)?);
        let b = Array1::from_vec(read(m)?);
        let gamma = match layout {
            0 => Gamma::Dense(shape(m, m, read(m * m)?)),
            1 => Gamma::Diagonal(Array1::from_vec(read(m)?)),
            2 => Gamma::LowRank {
                left: shape(rank, m, read(rank * m)?),
                right: shape(rank, m, read(rank * m)?),
            },
            t => return Err(ModelError::Checkpoint(format!("unknown gamma layout {t}"))),
        };
        Self::new(w, b, gamma)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ICLM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Read-out of a linear attention layer with block-structured merged
/// matrices: `W^PV = [[0, 0], [0, v]]` and `W^KQ = [[K, 0], [0, 0]]` (the
/// unconstrained blocks set to zero), temperature `N`, no SoftMax.
/// Returns the bottom-right entry of `E + W^PV E (E^T W^KQ E) / N` minus the
/// residual `E` entry.
pub fn full_attention_forward<T: Real>(
    v: T,
    k: ArrayView2<'_, T>,
    w: ArrayView2<'_, T>,
    b: ArrayView1<'_, T>,
    prompt: &Prompt<T>,
) -> Result<T, ModelError> {
    let m = w.nrows();
    check("K rows", m, k.nrows())?;
    check("K columns", m, k.ncols())?;
    check("bias length", m, b.len())?;
    check("prompt dimension", w.ncols(), prompt.d())?;
    if prompt.is_empty() {
        return Err(ModelError::EmptyContext);
    }
    let features = ModelParams {
        w: w.to_owned(),
        b: b.to_owned(),
        gamma: Gamma::zeros_diagonal(m),
    };
    let e = features.embed(prompt)?;
    let mut wpv = Array2::<T>::zeros((m + 1, m + 1));
    wpv[[m, m]] = v;
    let mut wkq = Array2::<T>::zeros((m + 1, m + 1));
    wkq.slice_mut(ndarray::s![..m, ..m]).assign(&k);
    let n = T::from_usize(prompt.len()).unwrap();
    let scores = e.t().dot(&wkq).dot(&e) / n;
    let out = &e + &wpv.dot(&e).dot(&scores);
    let (rows, cols) = out.dim();
    Ok(out[[rows - 1, cols - 1]] - e[[rows - 1, cols - 1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn hand_prompt() -> Prompt<f64> {
        Prompt {
            x: array![[1.0, 0.0]],
            y: array![2.0],
            query_x: array![1.0, 0.0],
            query_y: 0.0,
        }
    }

    fn hand_params(gamma: f64) -> ModelParams<f64> {
        ModelParams::new(array![[1.0, 0.0]], array![0.0], Gamma::Diagonal(array![gamma])).unwrap()
    }

    #[test]
    fn embed_hand_example() {
        let e = hand_params(1.0).embed(&hand_prompt()).unwrap();
        assert_eq!(e, array![[1.0, 1.0], [2.0, 0.0]]);
    }

    #[test]
    fn embed_negative_preactivations() {
        let p = ModelParams::new(array![[-1.0, 0.0], [0.0, -1.0]], array![-0.5, -0.5], Gamma::zeros_diagonal(2))
            .unwrap();
        let pr = Prompt {
            x: array![[1.0, 1.0], [2.0, 0.5]],
            y: array![3.0, -1.0],
            query_x: array![0.5, 0.5],
            query_y: 0.0,
        };
        let e = p.embed(&pr).unwrap();
        assert!(e.slice(ndarray::s![..2, ..]).iter().all(|&v| v == 0.0));
        assert_eq!(e[[2, 2]], 0.0);
    }

    #[test]
    fn forward_hand_example() {
        assert_eq!(hand_params(0.0).forward(&hand_prompt()).unwrap(), 0.0);
        let g = 0.3;
        assert!((hand_params(g).forward(&hand_prompt()).unwrap() - 2.0 * g).abs() < 1e-15);
        let empty = Prompt {
            x: Array2::zeros((0, 2)),
            y: Array1::zeros(0),
            query_x: array![1.0, 0.0],
            query_y: 0.0,
        };
        assert!(matches!(hand_params(g).forward(&empty), Err(ModelError::EmptyContext)));
    }

    #[test]
    fn full_attention_hand_example() {
        let p = hand_params(1.0);
        let k = array![[1.0]];
        let got = full_attention_forward(1.0, k.view(), p.w.view(), p.b.view(), &hand_prompt()).unwrap();
        assert!((got - 2.0).abs() < 1e-15);
        let got = full_attention_forward(0.0, k.view(), p.w.view(), p.b.view(), &hand_prompt()).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn layouts_agree() {
        let a: Array2<f64> = array![[1.0, 2.0], [0.5, -1.0], [0.0, 3.0]];
        let lr = Gamma::gram(a.view());
        let dense = Gamma::Dense(a.dot(&a.t()));
        let u: Array1<f64> = array![0.2, -0.4, 1.0];
        let v = array![1.5, 0.5, -2.0];
        assert!((lr.bilinear(v.view(), u.view()) - dense.bilinear(v.view(), u.view())).abs() < 1e-12);
        assert!((lr.frobenius_sq() - dense.frobenius_sq()).abs() < 1e-10);
        let diag = Gamma::Diagonal(array![1.0, 2.0, 3.0]);
        assert_eq!(diag.to_dense().diag().to_vec(), vec![1.0, 2.0, 3.0]);
        assert_eq!(diag.apply(u.view()), Gamma::Dense(diag.to_dense()).apply(u.view()));
    }

    #[test]
    fn checkpoint_round_trip() {
        for gamma in [
            Gamma::Dense(array![[1.0, 2.0], [3.0, 4.0]]),
            Gamma::Diagonal(array![0.5, -0.5]),
            Gamma::LowRank {
                left: array![[1.0, 2.0], [0.0, 1.0], [1.0, 1.0]],
                right: array![[0.0, 2.0], [1.0, 1.0], [3.0, 1.0]],
            },
        ] {
            let p = ModelParams::new(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], array![0.1, 0.2], gamma).unwrap();
            let mut buf = Vec::new();
            p.write_to(&mut buf).unwrap();
            assert_eq!(&buf[..4], b"ICLM");
            let back = ModelParams::<f64>::read_from(&mut buf.as_slice()).unwrap();
            assert_eq!(back, p);
            assert!(ModelParams::<f32>::read_from(&mut buf.as_slice()).is_err());
        }
    }

    #[test]
    fn rejects_inconsistent_dimensions() {
        assert!(ModelParams::new(array![[1.0, 0.0]], array![0.0, 1.0], Gamma::zeros_diagonal(1)).is_err());
        assert!(ModelParams::new(array![[1.0, 0.0]], array![0.0], Gamma::zeros_diagonal(2)).is_err());
    }
}
