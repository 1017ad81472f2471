//! Dense row-major tensors and the numeric kernels the autodiff graph and the
//! compacted inference path share.

use std::cell::Cell;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type of a tensor. Training runs in `f32`, gradient checks in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }

    fn to_le_bytes_vec(values: &[Self], out: &mut Vec<u8>);
    fn from_le_chunk(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn to_le_bytes_vec(values: &[Self], out: &mut Vec<u8>) {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn from_le_chunk(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn to_le_bytes_vec(values: &[Self], out: &mut Vec<u8>) {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn from_le_chunk(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// (rows, cols) view of a rank-2 tensor. Rank-1 tensors are a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Gathers rows (entries along axis 0) by index, copying.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let rows = *self.shape.first().unwrap_or(&1);
        let width = if self.shape.is_empty() { 1 } else { self.data.len() / rows.max(1) };
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(Error::Index { index: i, len: rows });
            }
            data.extend_from_slice(&self.data[i * width..(i + 1) * width]);
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(indices.len());
        } else {
            shape[0] = indices.len();
        }
        Ok(Self { shape, data })
    }

    /// Concatenates along axis 0. Trailing dimensions must agree.
    pub fn concat_rows(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let tail: Vec<usize> = first.shape.iter().skip(1).copied().collect();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let p_tail: Vec<usize> = p.shape.iter().skip(1).copied().collect();
            if p_tail != tail {
                return Err(Error::Shape(format!(
                    "concat mismatch: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            rows += p.shape.first().copied().unwrap_or(1);
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(Self { shape, data })
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data,
        })
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 || self.rank() != 2 || other.rank() != 2 {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }
}

// ── FLOP instrumentation ──────────────────────────────────────────────

thread_local! {
    static MAC_COUNTER: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulate operations executed by matmul and attention kernels on
/// this thread since the last reset.
pub fn executed_macs() -> u64 {
    MAC_COUNTER.with(|c| c.get())
}

pub fn reset_executed_macs() {
    MAC_COUNTER.with(|c| c.set(0));
}

pub(crate) fn count_macs(n: u64) {
    MAC_COUNTER.with(|c| c.set(c.get() + n));
}

// ── kernels ───────────────────────────────────────────────────────────

/// `o[j] += a[0]·b[0][j]; o[j] += a[1]·b[1][j]; …` applied term by term, so
/// every element sees the same rounding sequence as a plain loop over `k`.
#[inline(always)]
fn axpy4<T: Scalar>(o: &mut [T], a: [T; 4], b0: &[T], b1: &[T], b2: &[T], b3: &[T]) {
    let n = o.len();
    let (b0, b1, b2, b3) = (&b0[..n], &b1[..n], &b2[..n], &b3[..n]);
    for j in 0..n {
        let mut v = o[j];
        v += a[0] * b0[j];
        v += a[1] * b1[j];
        v += a[2] * b2[j];
        v += a[3] * b3[j];
        o[j] = v;
    }
}

#[inline(always)]
fn axpy1<T: Scalar>(o: &mut [T], a: T, b: &[T]) {
    for (o, &bv) in o.iter_mut().zip(b) {
        *o += a * bv;
    }
}

/// `o += Σ_p coef(p) · row(p)` over `p` in ascending order. Groups of four
/// zero coefficients are skipped; a zero inside a group adds an exact zero.
#[inline(always)]
fn accumulate_rows<'b, T: Scalar>(o: &mut [T], k: usize, coef: impl Fn(usize) -> T, row: impl Fn(usize) -> &'b [T]) {
    let mut p = 0;
    while p + 4 <= k {
        let a = [coef(p), coef(p + 1), coef(p + 2), coef(p + 3)];
        if a.iter().any(|&v| v != T::zero()) {
            axpy4(o, a, row(p), row(p + 1), row(p + 2), row(p + 3));
        }
        p += 4;
    }
    while p < k {
        let a = coef(p);
        if a != T::zero() {
            axpy1(o, a, row(p));
        }
        p += 1;
    }
}

/// `out += a · b` with `a: m×k`, `b: k×n`. Each output element accumulates
/// over `k` in ascending order regardless of `m`, so compacting rows of `a`
/// never changes the surviving rows' results.
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    count_macs((m * k * n) as u64);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        accumulate_rows(o_row, k, |p| a_row[p], |p| &b[p * n..(p + 1) * n]);
    }
}

/// `out += aᵀ · d` with `a: m×k`, `d: m×n`, result `k×n`.
pub fn gemm_tn<T: Scalar>(a: &[T], d: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let o_row = &mut out[p * n..(p + 1) * n];
        accumulate_rows(o_row, m, |i| a[i * k + p], |i| &d[i * n..(i + 1) * n]);
    }
}

/// `out += d · bᵀ` with `d: m×n`, `b: k×n`, result `m×k`.
pub fn gemm_nt<T: Scalar>(d: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    // transpose once so the inner loop streams contiguous rows
    let mut bt = vec![T::zero(); n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    for i in 0..m {
        let d_row = &d[i * n..(i + 1) * n];
        let o_row = &mut out[i * k..(i + 1) * k];
        accumulate_rows(o_row, n, |j| d_row[j], |j| &bt[j * k..(j + 1) * k]);
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GeLU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
    T::c(0.5) * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let inner = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
    let th = inner.tanh();
    let d_inner = T::c(GELU_C) * (T::one() + T::c(3.0 * GELU_A) * x * x);
    T::c(0.5) * (T::one() + th) + T::c(0.5) * x * (T::one() - th * th) * d_inner
}

/// In-place softmax of one row with max subtraction.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Layer normalization of one row; returns (mean, 1/std).
pub fn layernorm_row<T: Scalar>(x: &[T], gain: &[T], bias: &[T], eps: T, out: &mut [T]) -> (T, T) {
    let n = T::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    (mean, rstd)
}
