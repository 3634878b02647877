//! Dense tensors, a reverse-mode tape and the layer set used by the model.

pub mod checkpoint;
pub mod conv;
pub(crate) mod direct;
pub mod gradcheck;
pub mod linear;
pub mod lstm;
pub mod norm;
pub mod optim;
pub mod params;
pub mod pool;
mod tape;

pub use conv::Conv2dSpec;
pub use lstm::LstmCache;
pub use norm::BatchNormStats;
pub use optim::{Adam, AdamState};
pub use params::{BnId, Param, ParamId, ParamKind, ParamStore};
pub use pool::{PoolAxis, PoolSpec};
pub use tape::{softmax_rows, Mode, Tape, Var};

use crate::error::{AadError, Result};
use crate::scalar::Scalar;

/// Dense row-major array. Extents are always positive.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AadError::invalid(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        check_shape(shape).expect("tensor extents must be positive");
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        check_shape(shape).expect("tensor extents must be positive");
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(AadError::ShapeMismatch { expected: shape.to_vec(), actual: self.shape });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    #[allow(clippy::eq_op)]
    pub fn is_finite(&self) -> bool {
        // x - x is NaN exactly for infinities and NaNs; summing keeps the scan branch-free
        let mut acc = [T::zero(); 16];
        let chunks = self.data.chunks_exact(16);
        let rest = chunks.remainder().iter().fold(T::zero(), |a, &v| a + (v - v));
        for c in chunks {
            for (a, &v) in acc.iter_mut().zip(c) {
                *a += v - v;
            }
        }
        acc.iter().fold(rest, |a, &v| a + v).is_finite()
    }

    /// Element of a rank-2 tensor.
    pub fn at(&self, row: usize, col: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(AadError::invalid(format!("tensor extents must be positive, got {shape:?}")));
    }
    Ok(())
}

/// Keeps freed heap memory mapped so the large activation buffers of each
/// training step reuse already-faulted pages. Process-wide; applied once.
pub fn retain_heap() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator thresholds.
        unsafe {
            // serve every allocation from the heap and never hand it back
            libc::mallopt(libc::M_MMAP_MAX, 0);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        }
    });
}
