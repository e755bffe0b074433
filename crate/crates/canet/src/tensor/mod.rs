//! Rank-4 tensor arithmetic with reverse-mode automatic differentiation.
//!
//! The op set covers exactly what the change-detection network needs:
//! convolutions, pooling, normalization, activations, concatenation, and the
//! softmax cross-entropy loss, plus an SGD optimizer and a finite-difference
//! gradient checker. Training runs in `f32`; gradient checks run in `f64`.

pub mod gradcheck;
pub mod norm;
pub mod ops;
pub mod optim;
pub mod tape;

pub use gradcheck::{finite_diff_check, FiniteDiffConfig};
pub use norm::{batchnorm2d, BnEntry, BnLayer, RunningStats, BN_EPS, BN_MOMENTUM};
pub use optim::{sgd_step, Parameter, SgdConfig};
pub use tape::Tape;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Scalar type for tensor data. `f32` is the training precision, `f64` is
/// used by the gradient checker.
pub trait Elem:
    num_traits::Float
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    const DTYPE: Dtype;

    fn from_f(v: f64) -> Self;
    fn to_f(self) -> f64;
}

impl Elem for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f(v: f64) -> Self {
        v as f32
    }

    fn to_f(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f(v: f64) -> Self {
        v
    }

    fn to_f(self) -> f64 {
        self
    }
}

/// Element type tag, used by the checkpoint format.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Dtype {
    F32,
    F64,
}

/// Dimensions of a rank-4 tensor: (batch, channel, height, width).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Scalars per (batch, channel) plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Flat index of element (b, c, y, x) in row-major (n, c, h, w) layout.
    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// A rank-4 tensor with contiguous row-major (n, c, h, w) storage.
///
/// Tensors are immutable values; cloning shares the underlying buffer. A
/// tensor optionally carries a handle onto the active tape, which makes it
/// participate in reverse-mode differentiation.
#[derive(Clone, Debug)]
pub struct Tensor<E: Elem> {
    dims: Dims,
    data: Arc<Vec<E>>,
    node: Option<usize>,
}

impl<E: Elem> Tensor<E> {
    pub fn new(dims: Dims, data: Vec<E>) -> Result<Self> {
        if data.len() != dims.count() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("dims {dims} need {} scalars, got {}", dims.count(), data.len()),
            });
        }
        Ok(Tensor { dims, data: Arc::new(data), node: None })
    }

    pub fn zeros(dims: Dims) -> Self {
        Tensor { dims, data: Arc::new(vec![E::zero(); dims.count()]), node: None }
    }

    pub fn full(dims: Dims, value: E) -> Self {
        Tensor { dims, data: Arc::new(vec![value; dims.count()]), node: None }
    }

    pub(crate) fn from_parts(dims: Dims, data: Arc<Vec<E>>, node: Option<usize>) -> Self {
        debug_assert_eq!(data.len(), dims.count());
        Tensor { dims, data, node }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.data)
    }

    pub fn node(&self) -> Option<usize> {
        self.node
    }

    /// The same values without tape participation.
    pub fn detach(&self) -> Self {
        Tensor { dims: self.dims, data: Arc::clone(&self.data), node: None }
    }

    /// The single value of a 1x1x1x1 tensor.
    pub fn scalar(&self) -> Result<E> {
        if self.dims.count() != 1 {
            return Err(Error::Shape {
                op: "scalar",
                detail: format!("expected one element, got dims {}", self.dims),
            });
        }
        Ok(self.data[0])
    }

    /// Convert element type, e.g. `f32` weights to `f64` for gradient checks.
    pub fn cast<T: Elem>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|v| T::from_f(v.to_f())).collect();
        Tensor { dims: self.dims, data: Arc::new(data), node: None }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, E> {
        self.data.iter()
    }
}

/// Per-pixel binary ground-truth map with dims (n, h, w); 1 marks change.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::Shape {
                op: "label_map",
                detail: format!("{n}x{h}x{w} needs {} values, got {}", n * h * w, data.len()),
            });
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument {
                op: "label_map",
                detail: format!("label values must be 0 or 1, got {v}"),
            });
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        LabelMap { n, h, w, data: vec![0; n * h * w] }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.n * self.h * self.w
    }

    #[inline]
    pub fn at(&self, b: usize, y: usize, x: usize) -> u8 {
        self.data[(b * self.h + y) * self.w + x]
    }
}

/// Whether normalization layers use batch statistics (and update running
/// statistics) or frozen running statistics.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) fn ensure_finite<E: Elem>(op: &'static str, data: &[E]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}
