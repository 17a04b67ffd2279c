//! Dense row-major matrices and the differentiable primitives built on them.
//!
//! Every primitive comes as a forward/backward pair. Backward functions take
//! the upstream gradient and *accumulate* into parameter gradients so that a
//! batch can be reduced sample by sample.

use crate::rng::seeded_rng;
use crate::scalar::Scalar;
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform(rows: usize, cols: usize, bound: f64, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let data = (0..rows * cols)
            .map(|_| T::lit(rng.random_range(-bound..=bound)))
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// `self · x`
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[T]) -> Vec<T> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        out
    }

    /// `self += a · bᵀ`
    pub fn add_outer(&mut self, a: &[T], b: &[T]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            for (w, &bc) in self.row_mut(r).iter_mut().zip(b) {
                *w += ar * bc;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn l2_norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Affine map `y = W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Affine<T> {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![T::zero(); out_dim],
        }
    }

    /// Uniform `±1/√fan_in` initialization for weights and bias.
    pub fn init(out_dim: usize, in_dim: usize, seed: u64) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = Matrix::uniform(out_dim, in_dim, bound, seed);
        let bias = Matrix::<T>::uniform(1, out_dim, bound, seed ^ 0x5EED_B1A5)
            .as_slice()
            .to_vec();
        Self { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let mut y = self.weight.matvec(x);
        for (v, &b) in y.iter_mut().zip(&self.bias) {
            *v += b;
        }
        y
    }

    /// Accumulates `∂/∂W` and `∂/∂b` into `grad`, returns `∂/∂x`.
    pub fn backward(&self, x: &[T], dy: &[T], grad: &mut Affine<T>) -> Vec<T> {
        grad.weight.add_outer(dy, x);
        for (g, &d) in grad.bias.iter_mut().zip(dy) {
            *g += d;
        }
        self.weight.matvec_t(dy)
    }

    pub fn cast<U: Scalar>(&self) -> Affine<U> {
        Affine {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// `ln(1 + eˣ)`, computed without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_K) * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(scores: &[T]) -> Vec<T> {
    let max = scores.iter().copied().fold(T::neg_infinity(), |a, b| a.max(b));
    let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), |a, b| a.max(b));
    let total: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + total.ln()
}

/// Backward of softmax: given `p = softmax(s)` and `∂L/∂p`, returns `∂L/∂s`.
pub fn softmax_backward<T: Scalar>(p: &[T], dp: &[T]) -> Vec<T> {
    let inner = dot(p, dp);
    p.iter().zip(dp).map(|(&pi, &di)| pi * (di - inner)).collect()
}

/// Per-vector layer normalization with a learned gain and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Vec<T>,
    pub shift: Vec<T>,
    pub eps: T,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    normalized: Vec<T>,
    inv_std: T,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn identity(dim: usize, eps: T) -> Self {
        Self {
            gain: vec![T::one(); dim],
            shift: vec![T::zero(); dim],
            eps,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gain: vec![T::zero(); self.gain.len()],
            shift: vec![T::zero(); self.shift.len()],
            eps: self.eps,
        }
    }

    pub fn forward(&self, x: &[T]) -> (Vec<T>, LayerNormCache<T>) {
        let n = T::from_usize(x.len()).expect("dimension fits scalar");
        let mean = x.iter().copied().sum::<T>() / n;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv_std = T::one() / (var + self.eps).sqrt();
        let normalized: Vec<T> = x.iter().map(|&v| (v - mean) * inv_std).collect();
        let y = normalized
            .iter()
            .zip(self.gain.iter().zip(&self.shift))
            .map(|(&h, (&g, &b))| h * g + b)
            .collect();
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &[T], grad: &mut LayerNorm<T>) -> Vec<T> {
        let n = T::from_usize(dy.len()).expect("dimension fits scalar");
        let mut dh = Vec::with_capacity(dy.len());
        for i in 0..dy.len() {
            grad.gain[i] += dy[i] * cache.normalized[i];
            grad.shift[i] += dy[i];
            dh.push(dy[i] * self.gain[i]);
        }
        let mean_dh = dh.iter().copied().sum::<T>() / n;
        let mean_dh_h = dot(&dh, &cache.normalized) / n;
        dh.iter()
            .zip(&cache.normalized)
            .map(|(&d, &h)| cache.inv_std * (d - mean_dh - h * mean_dh_h))
            .collect()
    }
}

/// Divides `x` by its L2 norm, floored at `floor`. Returns the unit vector and the
/// (floored) norm used.
pub fn normalize<T: Scalar>(x: &[T], floor: T) -> (Vec<T>, T) {
    let norm = l2_norm(x).max(floor);
    (x.iter().map(|&v| v / norm).collect(), norm)
}

/// Backward of [`normalize`] given the unit vector `u` and norm used.
pub fn normalize_backward<T: Scalar>(u: &[T], norm: T, du: &[T], floored: bool) -> Vec<T> {
    if floored {
        return du.iter().map(|&d| d / norm).collect();
    }
    let proj = dot(u, du);
    u.iter()
        .zip(du)
        .map(|(&ui, &di)| (di - ui * proj) / norm)
        .collect()
}
