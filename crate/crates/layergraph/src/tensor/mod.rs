//! Dense tensor engine: row-major n-dimensional arrays over f32/f64/i64,
//! with every numeric primitive the layers and the gradient rules need.

mod io;
mod ops;
pub mod rng;

pub use io::{parse_tsr, read_tsr, render_tsr, write_tsr};
pub(crate) use ops::scatter_add_rows;
pub use ops::UnaryOp;

use crate::error::{Error, Result};

/// Ordered list of non-negative extents. Axis 0 is the batch axis by
/// convention; rank is fixed at creation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Self {
        Shape { dims: dims.into() }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Element count; the empty product is 1 (scalar).
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn last_dim(&self) -> Option<usize> {
        self.dims.last().copied()
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

impl From<&[usize]> for Shape {
    fn from(d: &[usize]) -> Self {
        Shape::new(d.to_vec())
    }
}

impl From<Vec<usize>> for Shape {
    fn from(d: Vec<usize>) -> Self {
        Shape::new(d)
    }
}

impl<const N: usize> From<[usize; N]> for Shape {
    fn from(d: [usize; N]) -> Self {
        Shape::new(d.to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    I64,
}

impl DType {
    pub fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F64)
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DType::F32 => write!(f, "float32"),
            DType::F64 => write!(f, "float64"),
            DType::I64 => write!(f, "int64"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I64(_) => DType::I64,
        }
    }
}

/// Dense row-major tensor. Immutable after construction: all operations
/// return fresh tensors, so values are safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: impl Into<Shape>, data: TensorData) -> Result<Self> {
        let shape = shape.into();
        if shape.len() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {} implies {} elements, data holds {}",
                shape,
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f32(shape: impl Into<Shape>, data: Vec<f32>) -> Result<Self> {
        Tensor::new(shape, TensorData::F32(data))
    }

    pub fn from_f64(shape: impl Into<Shape>, data: Vec<f64>) -> Result<Self> {
        Tensor::new(shape, TensorData::F64(data))
    }

    pub fn from_i64(shape: impl Into<Shape>, data: Vec<i64>) -> Result<Self> {
        Tensor::new(shape, TensorData::I64(data))
    }

    pub fn zeros(shape: impl Into<Shape>, dtype: DType) -> Self {
        let shape = shape.into();
        let n = shape.len();
        let data = match dtype {
            DType::F32 => TensorData::F32(vec![0.0; n]),
            DType::F64 => TensorData::F64(vec![0.0; n]),
            DType::I64 => TensorData::I64(vec![0; n]),
        };
        Tensor { shape, data }
    }

    pub fn ones(shape: impl Into<Shape>, dtype: DType) -> Self {
        let shape = shape.into();
        let n = shape.len();
        let data = match dtype {
            DType::F32 => TensorData::F32(vec![1.0; n]),
            DType::F64 => TensorData::F64(vec![1.0; n]),
            DType::I64 => TensorData::I64(vec![1; n]),
        };
        Tensor { shape, data }
    }

    /// Rank-1 single-element tensor.
    pub fn scalar(value: f64, dtype: DType) -> Self {
        let data = match dtype {
            DType::F32 => TensorData::F32(vec![value as f32]),
            DType::F64 => TensorData::F64(vec![value]),
            DType::I64 => TensorData::I64(vec![value as i64]),
        };
        Tensor {
            shape: Shape::new([1]),
            data,
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::I64(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    /// The single element of a one-element tensor, as f64.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected a one-element tensor, got shape {}",
                self.shape
            )));
        }
        Ok(self.to_f64_vec()[0])
    }

    pub fn is_all_finite(&self) -> bool {
        match &self.data {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::F64(v) => v.iter().all(|x| x.is_finite()),
            TensorData::I64(_) => true,
        }
    }

    /// Exact bit-pattern equality, stricter than `==` for floats
    /// (distinguishes -0.0 from 0.0).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => a
                .iter()
                .zip(b.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()),
            (TensorData::F64(a), TensorData::F64(b)) => a
                .iter()
                .zip(b.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()),
            (TensorData::I64(a), TensorData::I64(b)) => a == b,
            _ => false,
        }
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {} ({} elements) to {} ({} elements)",
                self.shape,
                self.len(),
                shape,
                shape.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Element at a row-major flat index, widened to f64.
    pub fn get_f64(&self, idx: usize) -> f64 {
        match &self.data {
            TensorData::F32(v) => f64::from(v[idx]),
            TensorData::F64(v) => v[idx],
            TensorData::I64(v) => v[idx] as f64,
        }
    }

    /// Overwrite one element, narrowing from f64. Requires ownership;
    /// shared tensors stay immutable.
    pub fn set_f64(&mut self, idx: usize, value: f64) {
        match &mut self.data {
            TensorData::F32(v) => v[idx] = value as f32,
            TensorData::F64(v) => v[idx] = value,
            TensorData::I64(v) => v[idx] = value as i64,
        }
    }
}
