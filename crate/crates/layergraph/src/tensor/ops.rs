//! Numeric primitives over [`Tensor`]: matrix product, broadcast addition,
//! elementwise maps, gathers, reductions, softmax, and seeded uniform fill.
//!
//! Binary operations require equal dtypes (no implicit promotion) and the
//! only broadcast is the trailing-axis bias case; everything else errors
//! early with a shape diagnostic.

use super::rng::SplitRng;
use super::{DType, Shape, Tensor, TensorData};
use crate::error::{Error, Result};

/// Elementwise unary operations supported by activation layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Tanh,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Neg,
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Tanh => "tanh",
            UnaryOp::Relu => "relu",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Neg => "neg",
        }
    }

    pub fn parse(s: &str) -> Result<UnaryOp> {
        match s {
            "tanh" => Ok(UnaryOp::Tanh),
            "relu" => Ok(UnaryOp::Relu),
            "sigmoid" => Ok(UnaryOp::Sigmoid),
            "exp" => Ok(UnaryOp::Exp),
            "log" => Ok(UnaryOp::Log),
            "neg" => Ok(UnaryOp::Neg),
            other => Err(Error::UnknownActivation(other.to_string())),
        }
    }
}

pub(crate) trait Float:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
}

impl Float for f32 {
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;
    fn from_f64(x: f64) -> f32 {
        x as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn tanh(self) -> f32 {
        f32::tanh(self)
    }
    fn exp(self) -> f32 {
        f32::exp(self)
    }
    fn ln(self) -> f32 {
        f32::ln(self)
    }
}

impl Float for f64 {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;
    fn from_f64(x: f64) -> f64 {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn tanh(self) -> f64 {
        f64::tanh(self)
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn ln(self) -> f64 {
        f64::ln(self)
    }
}

fn dtype_err(expected: DType, got: DType) -> Error {
    Error::DtypeMismatch {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

fn require_same_dtype(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dtype() != b.dtype() {
        return Err(dtype_err(a.dtype(), b.dtype()));
    }
    Ok(())
}

fn require_float(t: &Tensor) -> Result<()> {
    if !t.dtype().is_float() {
        return Err(Error::DtypeMismatch {
            expected: "float32 or float64".to_string(),
            got: t.dtype().to_string(),
        });
    }
    Ok(())
}

fn matmul_impl<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in dst.iter_mut().zip(row.iter()) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn unary_impl<T: Float>(op: UnaryOp, xs: &[T]) -> Result<Vec<T>> {
    if op == UnaryOp::Log {
        if let Some(bad) = xs.iter().find(|x| **x <= T::ZERO) {
            return Err(Error::DomainError(format!(
                "log of non-positive element {}",
                bad.to_f64()
            )));
        }
    }
    let out = xs
        .iter()
        .map(|&x| match op {
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Relu => {
                if x > T::ZERO {
                    x
                } else {
                    T::ZERO
                }
            }
            UnaryOp::Sigmoid => {
                // Evaluated from the side that keeps exp bounded.
                if x >= T::ZERO {
                    T::ONE / (T::ONE + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::ONE + e)
                }
            }
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Neg => -x,
        })
        .collect();
    Ok(out)
}

fn softmax_rows<T: Float>(xs: &[T], row_len: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; xs.len()];
    for (row, orow) in xs.chunks(row_len).zip(out.chunks_mut(row_len)) {
        let mut m = row[0];
        for &x in row {
            if x > m {
                m = x;
            }
        }
        let mut sum = T::ZERO;
        for (o, &x) in orow.iter_mut().zip(row.iter()) {
            *o = (x - m).exp();
            sum = sum + *o;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

/// Per row: log softmax via the log-sum-exp stabilized form.
fn log_softmax_rows<T: Float>(xs: &[T], row_len: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; xs.len()];
    for (row, orow) in xs.chunks(row_len).zip(out.chunks_mut(row_len)) {
        let mut m = row[0];
        for &x in row {
            if x > m {
                m = x;
            }
        }
        let mut sum = T::ZERO;
        for &x in row {
            sum = sum + (x - m).exp();
        }
        let lse = m + sum.ln();
        for (o, &x) in orow.iter_mut().zip(row.iter()) {
            *o = x - lse;
        }
    }
    out
}

macro_rules! zip_float {
    ($a:expr, $b:expr, $f:expr) => {
        match (&$a.data, &$b.data) {
            (TensorData::F32(x), TensorData::F32(y)) => Ok(TensorData::F32(
                x.iter().zip(y.iter()).map(|(&p, &q)| $f(p, q)).collect(),
            )),
            (TensorData::F64(x), TensorData::F64(y)) => Ok(TensorData::F64(
                x.iter().zip(y.iter()).map(|(&p, &q)| $f(p, q)).collect(),
            )),
            (TensorData::I64(x), TensorData::I64(y)) => Ok(TensorData::I64(
                x.iter()
                    .zip(y.iter())
                    .map(|(&p, &q)| $f(p as f64, q as f64) as i64)
                    .collect(),
            )),
            _ => Err(dtype_err($a.dtype(), $b.dtype())),
        }
    };
}

impl Tensor {
    /// Standard rank-2 matrix product `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        require_same_dtype(self, other)?;
        require_float(self)?;
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul requires rank-2 operands, got {} and {}",
                self.shape(),
                other.shape()
            )));
        }
        let (m, k) = (self.dims()[0], self.dims()[1]);
        let (k2, n) = (other.dims()[0], other.dims()[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dimensions disagree: {} vs {}",
                self.shape(),
                other.shape()
            )));
        }
        let data = match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => TensorData::F32(matmul_impl(a, b, m, k, n)),
            (TensorData::F64(a), TensorData::F64(b)) => TensorData::F64(matmul_impl(a, b, m, k, n)),
            _ => unreachable!("dtype checked above"),
        };
        Tensor::new([m, n], data)
    }

    /// Elementwise sum. Shapes must be equal, or `other` may be rank-1 of
    /// length `self.dims()[last]`, in which case it is replicated across
    /// the leading axes (the bias case). No other broadcasting.
    pub fn add_broadcast(&self, other: &Tensor) -> Result<Tensor> {
        require_same_dtype(self, other)?;
        if self.shape() == other.shape() {
            let data = zip_float!(self, other, |p, q| p + q)?;
            return Tensor::new(self.shape().clone(), data);
        }
        let last = self.shape().last_dim().unwrap_or(0);
        if other.rank() == 1 && other.dims()[0] == last && last > 0 {
            let data = match (&self.data, &other.data) {
                (TensorData::F32(a), TensorData::F32(b)) => TensorData::F32(
                    a.iter()
                        .enumerate()
                        .map(|(i, &x)| x + b[i % last])
                        .collect(),
                ),
                (TensorData::F64(a), TensorData::F64(b)) => TensorData::F64(
                    a.iter()
                        .enumerate()
                        .map(|(i, &x)| x + b[i % last])
                        .collect(),
                ),
                (TensorData::I64(a), TensorData::I64(b)) => TensorData::I64(
                    a.iter()
                        .enumerate()
                        .map(|(i, &x)| x + b[i % last])
                        .collect(),
                ),
                _ => unreachable!("dtype checked above"),
            };
            return Tensor::new(self.shape().clone(), data);
        }
        Err(Error::ShapeMismatch(format!(
            "cannot add {} and {}: shapes must match or the second operand \
             must be rank-1 of the first's trailing extent",
            self.shape(),
            other.shape()
        )))
    }

    /// Elementwise difference, same shape only.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        require_same_dtype(self, other)?;
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "cannot subtract {} from {}",
                other.shape(),
                self.shape()
            )));
        }
        let data = zip_float!(self, other, |p, q| p - q)?;
        Tensor::new(self.shape().clone(), data)
    }

    /// Elementwise product, same shape only.
    pub fn mul_elementwise(&self, other: &Tensor) -> Result<Tensor> {
        require_same_dtype(self, other)?;
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "cannot multiply {} with {}",
                self.shape(),
                other.shape()
            )));
        }
        let data = zip_float!(self, other, |p, q| p * q)?;
        Tensor::new(self.shape().clone(), data)
    }

    /// Apply `op` independently to every element; shape preserved.
    pub fn unary(&self, op: UnaryOp) -> Result<Tensor> {
        require_float(self)?;
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(unary_impl(op, v)?),
            TensorData::F64(v) => TensorData::F64(unary_impl(op, v)?),
            TensorData::I64(_) => unreachable!("dtype checked above"),
        };
        Tensor::new(self.shape().clone(), data)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Relu)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Sigmoid)
    }

    /// Row gather: `table` is `[v, d]`, `indices` an int64 tensor of rank 1
    /// or 2; output shape is `indices.shape ++ [d]`.
    pub fn gather_rows(&self, indices: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "gather_rows table must be rank-2, got {}",
                self.shape()
            )));
        }
        let idx = match indices.data() {
            TensorData::I64(v) => v,
            _ => {
                return Err(Error::DtypeMismatch {
                    expected: "int64".to_string(),
                    got: indices.dtype().to_string(),
                })
            }
        };
        if indices.rank() != 1 && indices.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "gather_rows indices must be rank 1 or 2, got {}",
                indices.shape()
            )));
        }
        let (v, d) = (self.dims()[0], self.dims()[1]);
        for &i in idx {
            if i < 0 || i as usize >= v {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    extent: v,
                });
            }
        }
        let mut out_dims = indices.dims().to_vec();
        out_dims.push(d);
        let data = match &self.data {
            TensorData::F32(t) => TensorData::F32(
                idx.iter()
                    .flat_map(|&i| t[i as usize * d..(i as usize + 1) * d].iter().copied())
                    .collect(),
            ),
            TensorData::F64(t) => TensorData::F64(
                idx.iter()
                    .flat_map(|&i| t[i as usize * d..(i as usize + 1) * d].iter().copied())
                    .collect(),
            ),
            TensorData::I64(t) => TensorData::I64(
                idx.iter()
                    .flat_map(|&i| t[i as usize * d..(i as usize + 1) * d].iter().copied())
                    .collect(),
            ),
        };
        Tensor::new(out_dims, data)
    }

    /// Rank-2 transpose.
    pub fn transpose_2d(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "transpose_2d requires rank 2, got {}",
                self.shape()
            )));
        }
        let (m, n) = (self.dims()[0], self.dims()[1]);
        fn tr<T: Copy>(v: &[T], m: usize, n: usize, zero: T) -> Vec<T> {
            let mut out = vec![zero; v.len()];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = v[i * n + j];
                }
            }
            out
        }
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(tr(v, m, n, 0.0)),
            TensorData::F64(v) => TensorData::F64(tr(v, m, n, 0.0)),
            TensorData::I64(v) => TensorData::I64(tr(v, m, n, 0)),
        };
        Tensor::new([n, m], data)
    }

    /// Sum of elements. `axis: None` collapses all elements into shape `[1]`;
    /// `Some(a)` removes axis `a`.
    pub fn reduce_sum(&self, axis: Option<usize>) -> Result<Tensor> {
        require_float(self)?;
        self.reduce(axis, false)
    }

    /// Mean of elements, same axis semantics as [`Tensor::reduce_sum`].
    pub fn reduce_mean(&self, axis: Option<usize>) -> Result<Tensor> {
        require_float(self)?;
        self.reduce(axis, true)
    }

    fn reduce(&self, axis: Option<usize>, mean: bool) -> Result<Tensor> {
        fn go<T: Float>(
            v: &[T],
            dims: &[usize],
            axis: Option<usize>,
            mean: bool,
        ) -> (Vec<usize>, Vec<T>) {
            match axis {
                None => {
                    let mut acc = T::ZERO;
                    for &x in v {
                        acc = acc + x;
                    }
                    if mean && !v.is_empty() {
                        acc = acc / T::from_f64(v.len() as f64);
                    }
                    (vec![1], vec![acc])
                }
                Some(a) => {
                    let outer: usize = dims[..a].iter().product();
                    let ax = dims[a];
                    let inner: usize = dims[a + 1..].iter().product();
                    let mut out = vec![T::ZERO; outer * inner];
                    for o in 0..outer {
                        for k in 0..ax {
                            for i in 0..inner {
                                out[o * inner + i] =
                                    out[o * inner + i] + v[(o * ax + k) * inner + i];
                            }
                        }
                    }
                    if mean && ax > 0 {
                        let denom = T::from_f64(ax as f64);
                        for x in out.iter_mut() {
                            *x = *x / denom;
                        }
                    }
                    let mut od: Vec<usize> = dims[..a].to_vec();
                    od.extend_from_slice(&dims[a + 1..]);
                    (od, out)
                }
            }
        }
        if let Some(a) = axis {
            if a >= self.rank() {
                return Err(Error::ShapeMismatch(format!(
                    "reduce axis {} out of range for {}",
                    a,
                    self.shape()
                )));
            }
        }
        match &self.data {
            TensorData::F32(v) => {
                let (dims, out) = go(v, self.dims(), axis, mean);
                Tensor::new(dims, TensorData::F32(out))
            }
            TensorData::F64(v) => {
                let (dims, out) = go(v, self.dims(), axis, mean);
                Tensor::new(dims, TensorData::F64(out))
            }
            TensorData::I64(_) => unreachable!("dtype checked above"),
        }
    }

    /// Index of the largest element along `axis` (first index wins ties);
    /// output is int64 with that axis removed.
    pub fn argmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::ShapeMismatch(format!(
                "argmax axis {} out of range for {}",
                axis,
                self.shape()
            )));
        }
        let dims = self.dims();
        let outer: usize = dims[..axis].iter().product();
        let ax = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        if ax == 0 {
            return Err(Error::ShapeMismatch(
                "argmax over an empty axis".to_string(),
            ));
        }
        let vals = self.to_f64_vec();
        let mut out = vec![0i64; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0usize;
                let mut best_v = vals[(o * ax) * inner + i];
                for k in 1..ax {
                    let v = vals[(o * ax + k) * inner + i];
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                out[o * inner + i] = best as i64;
            }
        }
        let mut od: Vec<usize> = dims[..axis].to_vec();
        od.extend_from_slice(&dims[axis + 1..]);
        Tensor::new(od, TensorData::I64(out))
    }

    /// Softmax over the last axis. Rows sum to 1 and are strictly positive.
    pub fn softmax(&self) -> Result<Tensor> {
        require_float(self)?;
        let last = self.shape().last_dim().unwrap_or(0);
        if last == 0 {
            return Err(Error::ShapeMismatch(format!(
                "softmax requires a non-empty trailing axis, got {}",
                self.shape()
            )));
        }
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(softmax_rows(v, last)),
            TensorData::F64(v) => TensorData::F64(softmax_rows(v, last)),
            TensorData::I64(_) => unreachable!("dtype checked above"),
        };
        Tensor::new(self.shape().clone(), data)
    }

    /// Log softmax over the last axis, log-sum-exp stabilized.
    pub fn log_softmax(&self) -> Result<Tensor> {
        require_float(self)?;
        let last = self.shape().last_dim().unwrap_or(0);
        if last == 0 {
            return Err(Error::ShapeMismatch(format!(
                "log_softmax requires a non-empty trailing axis, got {}",
                self.shape()
            )));
        }
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(log_softmax_rows(v, last)),
            TensorData::F64(v) => TensorData::F64(log_softmax_rows(v, last)),
            TensorData::I64(_) => unreachable!("dtype checked above"),
        };
        Tensor::new(self.shape().clone(), data)
    }

    /// Multiply every element by a scalar (given in f64, applied in the
    /// tensor's own precision).
    pub fn scalar_mul(&self, s: f64) -> Result<Tensor> {
        require_float(self)?;
        let data = match &self.data {
            TensorData::F32(v) => {
                let sf = s as f32;
                TensorData::F32(v.iter().map(|&x| x * sf).collect())
            }
            TensorData::F64(v) => TensorData::F64(v.iter().map(|&x| x * s).collect()),
            TensorData::I64(_) => unreachable!("dtype checked above"),
        };
        Tensor::new(self.shape().clone(), data)
    }

    /// Elementwise reciprocal; caller guarantees no zero elements.
    pub(crate) fn recip(&self) -> Result<Tensor> {
        require_float(self)?;
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(v.iter().map(|&x| 1.0 / x).collect()),
            TensorData::F64(v) => TensorData::F64(v.iter().map(|&x| 1.0 / x).collect()),
            TensorData::I64(_) => unreachable!("dtype checked above"),
        };
        Tensor::new(self.shape().clone(), data)
    }

    /// Convert to another element type. Float to int truncates toward zero.
    pub fn cast(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype() {
            return self.clone();
        }
        let data = match (&self.data, dtype) {
            (TensorData::F32(v), DType::F64) => {
                TensorData::F64(v.iter().map(|&x| f64::from(x)).collect())
            }
            (TensorData::F32(v), DType::I64) => {
                TensorData::I64(v.iter().map(|&x| x as i64).collect())
            }
            (TensorData::F64(v), DType::F32) => {
                TensorData::F32(v.iter().map(|&x| x as f32).collect())
            }
            (TensorData::F64(v), DType::I64) => {
                TensorData::I64(v.iter().map(|&x| x as i64).collect())
            }
            (TensorData::I64(v), DType::F32) => {
                TensorData::F32(v.iter().map(|&x| x as f32).collect())
            }
            (TensorData::I64(v), DType::F64) => {
                TensorData::F64(v.iter().map(|&x| x as f64).collect())
            }
            _ => unreachable!("same-dtype handled above"),
        };
        Tensor {
            shape: self.shape().clone(),
            data,
        }
    }

    /// Deterministic uniform fill over [low, high); a pure function of
    /// (shape, low, high, seed, dtype).
    pub fn random_uniform(
        shape: impl Into<Shape>,
        low: f64,
        high: f64,
        seed: u64,
        dtype: DType,
    ) -> Result<Tensor> {
        if low >= high {
            return Err(Error::InvalidRange { low, high });
        }
        let shape = shape.into();
        let n = shape.len();
        let mut rng = SplitRng::new(seed);
        let data = match dtype {
            DType::F32 => {
                let (lo, hi) = (low as f32, high as f32);
                TensorData::F32((0..n).map(|_| rng.uniform_f32(lo, hi)).collect())
            }
            DType::F64 => TensorData::F64((0..n).map(|_| rng.uniform_f64(low, high)).collect()),
            DType::I64 => {
                return Err(Error::DtypeMismatch {
                    expected: "float32 or float64".to_string(),
                    got: "int64".to_string(),
                })
            }
        };
        Tensor::new(shape, data)
    }
}

/// Scatter-add `rows` (shape `indices.shape ++ [d]`) into a zero table of
/// shape `[v, d]`: the adjoint of [`Tensor::gather_rows`].
pub(crate) fn scatter_add_rows(
    v: usize,
    d: usize,
    indices: &Tensor,
    rows: &Tensor,
    dtype: DType,
) -> Result<Tensor> {
    let idx = match indices.data() {
        TensorData::I64(x) => x,
        _ => {
            return Err(Error::DtypeMismatch {
                expected: "int64".to_string(),
                got: indices.dtype().to_string(),
            })
        }
    };
    let mut out = Tensor::zeros([v, d], dtype);
    let src = rows.to_f64_vec();
    for (r, &i) in idx.iter().enumerate() {
        if i < 0 || i as usize >= v {
            return Err(Error::IndexOutOfRange {
                index: i,
                extent: v,
            });
        }
        for c in 0..d {
            let at = i as usize * d + c;
            let cur = out.get_f64(at);
            out.set_f64(at, cur + src[r * d + c]);
        }
    }
    Ok(out)
}
