//! Dense sequence matrices and single Transformer blocks.
//!
//! A block maps `X ↦ FF(Attn(X))` with
//!
//! ```text
//! Attn(X) = X + Σ_h W_O^h W_V^h X softmax_col[(W_K^h X)^T W_Q^h X]
//! FF(A)   = A + W_2 ReLU(W_1 A + b_1 1^T) + b_2 1^T
//! ```
//!
//! Both residual connections are structural. A block with no heads has a
//! zero attention term, which is how feed-forward-only layers are written.

use serde::{Deserialize, Serialize};

use crate::expsum::ExpSum;
use crate::scalar::Scalar;
use crate::Error;

/// A `rows × cols` matrix stored row-major. As a sequence, `rows = d` is the
/// embedding dimension and `cols = L` the number of tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> SeqMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, Error> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("empty matrix {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(SeqMatrix { rows, cols, data })
    }

    /// Zero matrix; unlike [`SeqMatrix::new`] this allows an empty side, used
    /// for blocks without hidden neurons.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        SeqMatrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, Error> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_f64_rows(rows: &[&[f64]]) -> Result<Self, Error> {
        let owned: Vec<Vec<T>> =
            rows.iter().map(|r| r.iter().map(|&x| T::from_f64(x)).collect()).collect();
        Self::from_rows(&owned)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> &T {
        &self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.get(i, j).clone()).collect()
    }

    pub fn set_column(&mut self, j: usize, col: &[T]) {
        for (i, v) in col.iter().enumerate() {
            self.set(i, j, v.clone());
        }
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(&T) -> U) -> SeqMatrix<U> {
        SeqMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(f).collect() }
    }

    pub fn to_f64(&self) -> SeqMatrix<f64> {
        self.map(Scalar::to_f64)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                out.push(self.get(i, j).clone());
            }
        }
        SeqMatrix { rows: self.cols, cols: self.rows, data: out }
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self, Error> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a.is_zero() {
                    continue;
                }
                for j in 0..rhs.cols {
                    let b = rhs.get(k, j);
                    if b.is_zero() {
                        continue;
                    }
                    let idx = i * rhs.cols + j;
                    out.data[idx] = out.data[idx].clone() + a.clone() * b.clone();
                }
            }
        }
        Ok(out)
    }

    fn zip(&self, rhs: &Self, f: impl Fn(&T, &T) -> T) -> Result<Self, Error> {
        if self.shape() != rhs.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape(), rhs.shape())));
        }
        Ok(SeqMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self, Error> {
        self.zip(rhs, |a, b| a.clone() + b.clone())
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self, Error> {
        self.zip(rhs, |a, b| a.clone() - b.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(Scalar::is_finite)
    }

    /// Frobenius norm in double precision.
    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x.to_f64().powi(2)).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, rhs: &Self) -> f64 {
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a.clone() - b.clone()).to_f64().abs())
            .fold(0.0, f64::max)
    }
}

impl SeqMatrix<ExpSum> {
    /// Converts exact weights or activations to another scalar type.
    pub fn cast<U: Scalar>(&self) -> SeqMatrix<U> {
        self.map(U::from_exact)
    }
}

/// Column-wise softmax with per-column max subtraction.
pub fn softmax_columns<T: Scalar>(x: &SeqMatrix<T>) -> Result<SeqMatrix<T>, Error> {
    if !x.all_finite() {
        return Err(Error::NonFinite);
    }
    let mut out = x.clone();
    for j in 0..x.cols() {
        let col = x.column(j);
        out.set_column(j, &softmax(&col));
    }
    Ok(out)
}

/// Softmax of one vector with max subtraction.
pub fn softmax<T: Scalar>(a: &[T]) -> Vec<T> {
    let mut max = a[0].clone();
    for v in &a[1..] {
        if *v > max {
            max = v.clone();
        }
    }
    let exps: Vec<T> = a.iter().map(|v| (v.clone() - max.clone()).exp()).collect();
    let mut sum = exps[0].clone();
    for e in &exps[1..] {
        sum = sum + e.clone();
    }
    exps.into_iter().map(|e| e / sum.clone()).collect()
}

/// Entrywise `max(0, x)`.
pub fn relu<T: Scalar>(x: &SeqMatrix<T>) -> SeqMatrix<T> {
    x.map(Scalar::relu)
}

/// One attention head with head dimension `m`: `W_K, W_Q, W_V` are `m × d`
/// and `W_O` is `d × m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head<T> {
    pub w_k: SeqMatrix<T>,
    pub w_q: SeqMatrix<T>,
    pub w_v: SeqMatrix<T>,
    pub w_o: SeqMatrix<T>,
}

/// Token-wise feed-forward sublayer with `l` hidden ReLU neurons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedForward<T> {
    /// `l × d`
    pub w1: SeqMatrix<T>,
    pub b1: Vec<T>,
    /// `d × l`
    pub w2: SeqMatrix<T>,
    pub b2: Vec<T>,
}

impl<T: Scalar> FeedForward<T> {
    /// The zero sublayer: no neurons, no bias.
    pub fn identity(d: usize) -> Self {
        FeedForward {
            w1: SeqMatrix::zeros(0, d),
            b1: Vec::new(),
            w2: SeqMatrix::zeros(d, 0),
            b2: vec![T::zero(); d],
        }
    }

    pub fn neurons(&self) -> usize {
        self.b1.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec<T> {
    pub d: usize,
    pub heads: Vec<Head<T>>,
    pub ff: FeedForward<T>,
}

impl<T: Scalar> BlockSpec<T> {
    pub fn feed_forward(ff: FeedForward<T>) -> Self {
        BlockSpec { d: ff.w2.rows(), heads: Vec::new(), ff }
    }

    pub fn attention(d: usize, heads: Vec<Head<T>>) -> Self {
        BlockSpec { d, heads, ff: FeedForward::identity(d) }
    }

    pub fn head_dim(&self) -> usize {
        self.heads.first().map_or(0, |h| h.w_k.rows())
    }

    pub fn validate(&self) -> Result<(), Error> {
        let d = self.d;
        for (n, h) in self.heads.iter().enumerate() {
            let m = h.w_k.rows();
            let ok = h.w_k.shape() == (m, d)
                && h.w_q.shape() == (m, d)
                && h.w_v.shape() == (m, d)
                && h.w_o.shape() == (d, m);
            if !ok {
                return Err(Error::Shape(format!("head {n} inconsistent with d={d}")));
            }
        }
        let l = self.ff.b1.len();
        if self.ff.w1.shape() != (l, d) || self.ff.w2.shape() != (d, l) || self.ff.b2.len() != d {
            return Err(Error::Shape(format!("feed-forward inconsistent with d={d}, l={l}")));
        }
        Ok(())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(&T) -> U + Copy) -> BlockSpec<U> {
        BlockSpec {
            d: self.d,
            heads: self
                .heads
                .iter()
                .map(|h| Head {
                    w_k: h.w_k.map(f),
                    w_q: h.w_q.map(f),
                    w_v: h.w_v.map(f),
                    w_o: h.w_o.map(f),
                })
                .collect(),
            ff: FeedForward {
                w1: self.ff.w1.map(f),
                b1: self.ff.b1.iter().map(f).collect(),
                w2: self.ff.w2.map(f),
                b2: self.ff.b2.iter().map(f).collect(),
            },
        }
    }
}

/// `X + Σ_h W_O W_V X softmax((W_K X)^T W_Q X)`.
pub fn attention_forward<T: Scalar>(
    heads: &[Head<T>],
    x: &SeqMatrix<T>,
) -> Result<SeqMatrix<T>, Error> {
    let mut out = x.clone();
    for h in heads {
        let k = h.w_k.matmul(x)?;
        let q = h.w_q.matmul(x)?;
        let v = h.w_v.matmul(x)?;
        let scores = k.transpose().matmul(&q)?;
        let probs = softmax_columns(&scores)?;
        let head = h.w_o.matmul(&v)?.matmul(&probs)?;
        out = out.add(&head)?;
    }
    Ok(out)
}

/// `A + W_2 ReLU(W_1 A + b_1 1^T) + b_2 1^T`, applied to every column.
pub fn feed_forward<T: Scalar>(ff: &FeedForward<T>, a: &SeqMatrix<T>) -> Result<SeqMatrix<T>, Error> {
    let (d, l) = a.shape();
    if ff.w1.cols() != d || ff.w2.rows() != d {
        return Err(Error::Shape(format!("feed-forward for d={} applied to d={d}", ff.w2.rows())));
    }
    let mut out = a.clone();
    let mut hidden = if ff.neurons() > 0 { ff.w1.matmul(a)? } else { SeqMatrix::zeros(0, l) };
    for n in 0..ff.neurons() {
        for j in 0..l {
            let v = (hidden.get(n, j).clone() + ff.b1[n].clone()).relu();
            hidden.set(n, j, v);
        }
    }
    if ff.neurons() > 0 {
        out = out.add(&ff.w2.matmul(&hidden)?)?;
    }
    for i in 0..d {
        if ff.b2[i].is_zero() {
            continue;
        }
        for j in 0..l {
            let v = out.get(i, j).clone() + ff.b2[i].clone();
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// `FF(Attn(X))` with both residual connections.
pub fn block_forward<T: Scalar>(block: &BlockSpec<T>, x: &SeqMatrix<T>) -> Result<SeqMatrix<T>, Error> {
    if x.rows() != block.d {
        return Err(Error::Shape(format!("block for d={} applied to d={}", block.d, x.rows())));
    }
    block.validate()?;
    let a = attention_forward(&block.heads, x)?;
    feed_forward(&block.ff, &a)
}

/// Numeric regime for attention evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrecisionMode {
    /// IEEE double.
    Standard,
    /// At least `mantissa_bits` of precision. Realized by exact
    /// exponential sums, which exceed any finite mantissa.
    Extended { mantissa_bits: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Precision {
    pub mode: PrecisionMode,
    /// Evaluate softmax as log-sum-exp in double precision.
    pub log_space: bool,
}

impl Precision {
    pub const STANDARD: Precision = Precision { mode: PrecisionMode::Standard, log_space: false };

    pub fn extended(mantissa_bits: u32) -> Result<Self, Error> {
        let p = Precision { mode: PrecisionMode::Extended { mantissa_bits }, log_space: false };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), Error> {
        match self.mode {
            PrecisionMode::Extended { mantissa_bits } if mantissa_bits < 64 => Err(Error::Config(
                format!("extended precision needs at least 64 mantissa bits, got {mantissa_bits}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn is_extended(&self) -> bool {
        matches!(self.mode, PrecisionMode::Extended { .. })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_ln2_column() {
        let x = SeqMatrix::<f64>::from_f64_rows(&[&[std::f64::consts::LN_2], &[0.0]]).unwrap();
        let s = softmax_columns(&x).unwrap();
        assert!((s.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.get(1, 0) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = SeqMatrix::<f64>::from_f64_rows(&[&[f64::NAN, 0.0]]).unwrap();
        assert!(matches!(softmax_columns(&x), Err(Error::NonFinite)));
    }

    #[test]
    fn relu_examples() {
        let x = SeqMatrix::<f64>::from_f64_rows(&[&[-1.0, 2.0]]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
    }

    #[test]
    fn single_neuron_block() {
        let ff = FeedForward {
            w1: SeqMatrix::from_f64_rows(&[&[1.0]]).unwrap(),
            b1: vec![0.0],
            w2: SeqMatrix::from_f64_rows(&[&[1.0]]).unwrap(),
            b2: vec![0.0],
        };
        let x = SeqMatrix::<f64>::from_f64_rows(&[&[-1.0, 1.0]]).unwrap();
        let y = block_forward(&BlockSpec::feed_forward(ff), &x).unwrap();
        assert_eq!(y.data(), &[-1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let block = BlockSpec::<f64>::feed_forward(FeedForward::identity(2));
        let x = SeqMatrix::<f64>::from_f64_rows(&[&[1.0, 2.0]]).unwrap();
        assert!(block_forward(&block, &x).is_err());
    }

    #[test]
    fn extended_precision_needs_64_bits() {
        assert!(Precision::extended(53).is_err());
        assert!(Precision::extended(64).is_ok());
    }
}
