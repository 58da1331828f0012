//! Dense rank-1/2 tensors of 64-bit reals, row-major.
//!
//! All numeric kernels shared between the recorded (autodiff) forward pass
//! and the plain evaluation path live here, so both produce bit-identical
//! values for the same inputs.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::InvalidArgument(format!(
                "tensor rank must be 1 or 2, got shape {shape:?}"
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got shape {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "tensor construction".into(),
                expected: shape.clone(),
                got: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    /// Rank-1 tensor from a flat vector.
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        assert!(n > 0, "vector tensor must be non-empty");
        Self {
            shape: vec![n],
            data,
        }
    }

    /// Rank-2 tensor, row-major.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Length-1 rank-1 tensor holding one value.
    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.shape())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True for a length-1 tensor (the scalar carrier used by loss nodes).
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            _ => 1,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &'static str, name: &str) -> Result<()> {
        if self.is_all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                what,
                name: name.to_string(),
            })
        }
    }

    /// Elementwise accumulate `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, c: f64, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }

    /// Squared l2 distance to another tensor of the same shape.
    pub fn squared_distance(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = a - b;
                d * d
            })
            .sum()
    }

    /// Order-insensitive content hash of the raw float bits; used for
    /// bit-exact trajectory and frozen-snapshot checks.
    pub fn bits_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for &d in &self.shape {
            h = fnv1a64(h, &(d as u64).to_le_bytes());
        }
        for v in &self.data {
            h = fnv1a64(h, &v.to_bits().to_le_bytes());
        }
        h
    }
}

fn fnv1a64(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

// ---------------------------------------------------------------------------
// Shared numeric kernels
// ---------------------------------------------------------------------------

/// `out = w * x + b` for a rank-2 `w` of shape `[m, n]`, rank-1 `x` of length
/// `n` and rank-1 `b` of length `m`.
pub fn affine_forward(w: &Tensor, x: &[f64], b: &[f64], out: &mut Vec<f64>) {
    let (m, n) = (w.rows(), w.cols());
    debug_assert_eq!(x.len(), n);
    debug_assert_eq!(b.len(), m);
    out.clear();
    out.reserve(m);
    let wd = w.data();
    for r in 0..m {
        let row = &wd[r * n..(r + 1) * n];
        let mut acc = 0.0;
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        out.push(acc + b[r]);
    }
}

/// `out = w^T * g` for a rank-2 `w` of shape `[m, n]` and rank-1 `g` of
/// length `m`.
pub fn matvec_transposed(w: &Tensor, g: &[f64], out: &mut [f64]) {
    let (m, n) = (w.rows(), w.cols());
    debug_assert_eq!(g.len(), m);
    debug_assert_eq!(out.len(), n);
    out.iter_mut().for_each(|v| *v = 0.0);
    let wd = w.data();
    for r in 0..m {
        let gv = g[r];
        let row = &wd[r * n..(r + 1) * n];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += gv * wv;
        }
    }
}

/// Accumulate the outer product `acc += g ⊗ x` into a `[m, n]` gradient.
pub fn accumulate_outer(acc: &mut Tensor, g: &[f64], x: &[f64]) {
    let (m, n) = (acc.rows(), acc.cols());
    debug_assert_eq!(g.len(), m);
    debug_assert_eq!(x.len(), n);
    let ad = acc.data_mut();
    for r in 0..m {
        let gv = g[r];
        let row = &mut ad[r * n..(r + 1) * n];
        for (a, xv) in row.iter_mut().zip(x) {
            *a += gv * xv;
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_forward(x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(x.iter().map(|&v| sigmoid_scalar(v)));
}

pub fn relu_forward(x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }));
}

/// Standard softmax of `logits / theta`, max-shifted for stability.
pub fn softmax_logits_forward(logits: &[f64], theta: f64, out: &mut Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    out.clear();
    out.extend(logits.iter().map(|&z| ((z - max) / theta).exp()));
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
}

/// Minimum probability used before logs and fractional exponents.
pub const PROB_FLOOR: f64 = 1e-12;

/// Temperature rescaling of a probability vector: `p_i^{1/theta}` renormalized.
/// Entries at or below zero are clamped to `PROB_FLOOR` first (logged).
/// Returns `(clamped_input, powered, output)`.
pub fn rescale_probs_forward(p: &[f64], theta: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let clamped: Vec<f64> = p
        .iter()
        .map(|&v| {
            if v <= 0.0 {
                log::warn!("probability entry {v} clamped to {PROB_FLOOR} before rescaling");
                PROB_FLOOR
            } else {
                v
            }
        })
        .collect();
    let inv_theta = 1.0 / theta;
    let powered: Vec<f64> = clamped.iter().map(|&v| v.powf(inv_theta)).collect();
    let sum: f64 = powered.iter().sum();
    let out: Vec<f64> = powered.iter().map(|&q| q / sum).collect();
    (clamped, powered, out)
}
