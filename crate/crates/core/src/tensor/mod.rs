//! Dense 64-bit tensors, reverse-mode gradients and the Adam optimizer.

mod gradcheck;
mod graph;
mod params;

pub use gradcheck::{check_gradients, check_gradients_in, GradCheckConfig, GradCheckReport};
pub use graph::{AttentionLayout, Graph, Var};
pub use params::{AdamConfig, Gradients, ParamId, ParamStore};

use crate::error::{Error, Result};

/// Row-major dense tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) && !data.is_empty() {
            return Err(Error::Shape(format!("zero extent in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    /// Caller guarantees `data.len() == shape.iter().product()`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        Tensor::from_parts(vec![c, r], transpose(&self.data, r, c))
    }

    /// `self · otherᵀ` for `self: [n, k]`, `other: [m, k]`.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = (self.rows(), self.cols());
        let (m, k2) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::Shape(format!("matmul_t inner dims {k} vs {k2}")));
        }
        let wt = transpose(&other.data, m, k);
        Ok(Tensor::from_parts(vec![n, m], gemm(&self.data, &wt, n, k, m)))
    }
}

/// Transposes a row-major `[r, c]` buffer.
pub(crate) fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

const MR: usize = 4;
const NR: usize = 8;

/// `C = A·B` for row-major `A: [n, k]`, `B: [k, m]`.
///
/// Every output element accumulates `a[i,p]·b[p,j]` for `p = 0..k` in order
/// starting from zero, whatever tile it lands in, so a row's result never
/// depends on which other rows share the call.
pub(crate) fn gemm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let mut c = vec![0.0; n * m];
    let full_cols = m - m % NR;
    let mut i = 0;
    while i + MR <= n {
        let mut j = 0;
        while j < full_cols {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                let brow: &[f64; NR] = b[p * m + j..p * m + j + NR].try_into().unwrap();
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for q in 0..NR {
                        acc_row[q] += av * brow[q];
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                c[(i + r) * m + j..(i + r) * m + j + NR].copy_from_slice(acc_row);
            }
            j += NR;
        }
        for r in i..i + MR {
            gemm_row_tail(a, b, &mut c, r, k, m, full_cols);
        }
        i += MR;
    }
    for r in i..n {
        let mut j = 0;
        while j < full_cols {
            let mut acc = [0.0f64; NR];
            for p in 0..k {
                let brow: &[f64; NR] = b[p * m + j..p * m + j + NR].try_into().unwrap();
                let av = a[r * k + p];
                for q in 0..NR {
                    acc[q] += av * brow[q];
                }
            }
            c[r * m + j..r * m + j + NR].copy_from_slice(&acc);
            j += NR;
        }
        gemm_row_tail(a, b, &mut c, r, k, m, full_cols);
    }
    c
}

fn gemm_row_tail(a: &[f64], b: &[f64], c: &mut [f64], r: usize, k: usize, m: usize, from: usize) {
    for j in from..m {
        let mut acc = 0.0;
        for p in 0..k {
            acc += a[r * k + p] * b[p * m + j];
        }
        c[r * m + j] = acc;
    }
}

/// Softmax along the last axis, with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if !logits.is_finite() {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    let cols = logits.cols();
    let mut out = logits.data.clone();
    for row in out.chunks_mut(cols) {
        softmax_in_place(row);
    }
    Ok(Tensor::from_parts(logits.shape.clone(), out))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Floor applied to a target probability before taking its logarithm.
pub const PROBABILITY_FLOOR: f64 = 1e-300;

/// Summed negative log-likelihood of a set of target probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// How many probabilities were raised to [`PROBABILITY_FLOOR`].
    pub clamped: usize,
}

/// `−Σ log p` over the probabilities the model assigned to its targets.
pub fn cross_entropy(target_probs: &[f64]) -> Result<CrossEntropy> {
    let mut loss = 0.0;
    let mut clamped = 0;
    for &p in target_probs {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(Error::NonFinite(format!("target probability {p}")));
        }
        let p = if p < PROBABILITY_FLOOR {
            clamped += 1;
            PROBABILITY_FLOOR
        } else {
            p
        };
        loss -= p.ln();
    }
    Ok(CrossEntropy { loss, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut c = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * m + j];
                }
                c[i * m + j] = acc;
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_bitwise_on_ragged_shapes() {
        let mut rng = crate::rng::Rng::stream(1, "gemm", 0);
        for &(n, k, m) in &[(1, 1, 1), (5, 3, 9), (4, 8, 8), (7, 13, 17), (33, 64, 64)] {
            let a: Vec<f64> = (0..n * k).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..k * m).map(|_| rng.normal()).collect();
            let fast = gemm(&a, &b, n, k, m);
            let slow = naive(&a, &b, n, k, m);
            assert!(fast.iter().zip(&slow).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn gemm_rows_do_not_depend_on_batch() {
        let mut rng = crate::rng::Rng::stream(2, "gemm", 0);
        let (n, k, m) = (9, 16, 24);
        let a: Vec<f64> = (0..n * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..k * m).map(|_| rng.normal()).collect();
        let all = gemm(&a, &b, n, k, m);
        for i in 0..n {
            let one = gemm(&a[i * k..(i + 1) * k], &b, 1, k, m);
            assert_eq!(&all[i * m..(i + 1) * m], &one[..]);
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = softmax(&Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let s = softmax(&Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        for (got, want) in s.data().iter().zip(e.iter().map(|x| x / z)) {
            assert!((got - want).abs() < 1e-15);
        }
        // Frozen from the direct evaluation above.
        assert!((s.data()[2] - 0.665_240_955_774_821_6).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let t = Tensor::matrix(1, 2, vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(softmax(&t), Err(Error::NonFinite(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[1.0]).unwrap().loss, 0.0);
        let uniform = cross_entropy(&[1.0 / 512.0]).unwrap().loss;
        assert!((uniform - 9.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((uniform - 6.23832).abs() < 1e-5);
        assert!((cross_entropy(&[0.25]).unwrap().loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_flags_zero_probability() {
        let ce = cross_entropy(&[0.0, 0.5]).unwrap();
        assert_eq!(ce.clamped, 1);
        assert!(ce.loss.is_finite());
        assert!((ce.loss - (-(1e-300f64).ln() + 2f64.ln())).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
            let n = v.len();
            let s = softmax(&Tensor::matrix(1, n, v).unwrap()).unwrap();
            let sum: f64 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn softmax_is_shift_invariant(v in proptest::collection::vec(-50f64..50.0, 1..20), c in -100f64..100.0) {
            let n = v.len();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = softmax(&Tensor::matrix(1, n, v).unwrap()).unwrap();
            let b = softmax(&Tensor::matrix(1, n, shifted).unwrap()).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
