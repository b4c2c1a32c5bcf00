//! Dense row-major tensors.
//!
//! Values are stored contiguously in row-major (C) order behind an `Arc`, so
//! cloning a tensor or keeping it alive on a tape never copies voxel data.
//! There are no strided views: `reshape`/`permute` return fresh tensors.
//! The element type is a compile-time parameter ([`f32`] for training,
//! [`f64`] for numerical tests), which rules out mixed-precision arithmetic
//! by construction.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tape::NodeRef;

/// Runtime tag for the two supported element types, used by serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::invalid(format!("unknown dtype code {other}"))),
        }
    }
}

/// Element types a tensor may hold. Only `f32` and `f64` implement this.
pub trait Element:
    Copy
    + Clone
    + fmt::Debug
    + fmt::Display
    + Default
    + PartialOrd
    + PartialEq
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const DTYPE: DType;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
    fn byte_width() -> usize;
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn to_le_bytes_vec(self) -> Vec<u8> {
                self.to_le_bytes().to_vec()
            }
            fn from_le_slice(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(bytes);
                <$t>::from_le_bytes(buf)
            }
            fn byte_width() -> usize {
                std::mem::size_of::<$t>()
            }
        }
    };
}

impl_element!(f32, DType::F32);
impl_element!(f64, DType::F64);

/// Dense tensor. `node` is set when the tensor is recorded on a tape.
#[derive(Clone)]
pub struct Tensor<T: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    pub(crate) node: Option<NodeRef<T>>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides of a contiguous tensor with the given shape.
pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for ax in (0..shape.len().saturating_sub(1)).rev() {
        strides[ax] = strides[ax + 1] * shape[ax + 1];
    }
    strides
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    /// Builds an untracked tensor from row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        validate_shape(shape)?;
        if numel_of(shape) != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::ZERO)
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        validate_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel_of(shape)]),
            node: None,
        })
    }

    /// Rank-0 scalar.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Arc<Vec<T>>, node: Option<NodeRef<T>>) -> Self {
        Tensor { shape, data, node }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// The same values with any tape association dropped.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Extracts the value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::invalid(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    /// Value at a multi-index; panics on rank/oob misuse (test helper).
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let strides = contiguous_strides(&self.shape);
        let mut flat = 0usize;
        for (ax, &i) in index.iter().enumerate() {
            assert!(i < self.shape[ax], "index out of bounds");
            flat += i * strides[ax];
        }
        self.data[flat]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type, e.g. to build an `f64` twin for finite
    /// difference tests. Always detached.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data: Vec<U> = self.data.iter().map(|v| U::from_f64(v.to_f64())).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            node: None,
        }
    }
}
