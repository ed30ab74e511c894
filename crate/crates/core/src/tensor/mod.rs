//! Dense row-major tensors and the layer primitives built on them.

pub mod ops;

use crate::error::{Result, SnnError};
use num_traits::Float;
use std::fmt;

/// Element type for all tensors. Training runs in `f32`; gradient checks and
/// reference oracles run in `f64` for finite-difference headroom.
pub trait Scalar:
    Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(x: usize) -> Self {
        Self::from_f64(x as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense n-dimensional array, row-major, contiguous.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(SnnError::ShapeMismatch {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Reinterpret under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(SnnError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        for x in self.data.iter_mut() {
            *x = value;
        }
    }

    pub fn scale_in_place(&mut self, c: T) {
        for x in self.data.iter_mut() {
            *x = *x * c;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.check_same_shape("add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + b;
        }
        Ok(())
    }

    /// self += c * other
    pub fn axpy(&mut self, c: T, other: &Tensor<T>) -> Result<()> {
        self.check_same_shape("axpy", other)?;
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + c * b;
        }
        Ok(())
    }

    pub fn mul_elementwise(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape("mul_elementwise", other)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn max_value(&self) -> T {
        self.data
            .iter()
            .fold(T::neg_infinity(), |acc, &x| if x > acc { x } else { acc })
    }

    /// Error out if any element is NaN or infinite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(SnnError::NonFinite(context.to_string()))
        }
    }

    /// Rows `lo..hi` along the leading axis, copied out.
    pub fn slice_rows(&self, lo: usize, hi: usize) -> Tensor<T> {
        assert!(lo <= hi && hi <= self.shape[0], "row slice out of range");
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = hi - lo;
        Tensor {
            shape,
            data: self.data[lo * row..hi * row].to_vec(),
        }
    }

    /// Stack tensors along the leading axis; shapes beyond it must agree.
    pub fn concat_rows(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| {
            SnnError::Input("concat_rows needs at least one tensor".into())
        })?;
        let mut shape = first.shape.clone();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(SnnError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        shape[0] = rows;
        Ok(Tensor { shape, data })
    }

    fn check_same_shape(&self, op: &'static str, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(SnnError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Max absolute difference between two same-shaped tensors.
pub fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff shape mismatch");
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        let r = Tensor::from_vec(&[2, 3], vec![1.0f32; 5]);
        assert!(matches!(r, Err(SnnError::ShapeMismatch { .. })));
    }

    #[test]
    fn ensure_finite_catches_nan() {
        let mut t = Tensor::<f32>::zeros(&[4]);
        assert!(t.ensure_finite("ok").is_ok());
        t.data_mut()[2] = f32::NAN;
        assert!(matches!(t.ensure_finite("layer 2"), Err(SnnError::NonFinite(_))));
    }

    #[test]
    fn slice_and_concat_roundtrip() {
        let t = Tensor::from_vec(&[4, 2], (0..8).map(|i| i as f64).collect()).unwrap();
        let a = t.slice_rows(0, 1);
        let b = t.slice_rows(1, 4);
        let back = Tensor::concat_rows(&[a, b]).unwrap();
        assert_eq!(back, t);
    }
}
