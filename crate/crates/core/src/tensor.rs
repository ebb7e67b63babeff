//! Dense row-major tensors.
//!
//! Values are plain owned buffers; gradient bookkeeping lives on the
//! [`crate::tape::Tape`], which stores one of these per node. Every
//! constructor and every tape op checks that stored values are finite —
//! a NaN or Inf is an error state, never silently propagated.

use crate::error::{Error, Result};

/// Element type for all tensor storage and compute.
///
/// `f32` by default; the `f64` feature widens it so gradient checks can be
/// run against much tighter tolerances.
#[cfg(not(feature = "f64"))]
pub type Scalar = f32;
#[cfg(feature = "f64")]
pub type Scalar = f64;

/// True when the crate was compiled with the widened scalar type.
pub const WIDE_SCALAR: bool = cfg!(feature = "f64");

/// A dense multi-dimensional array of [`Scalar`]s in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Scalar>,
}

impl Tensor {
    /// Build a tensor, validating `product(shape) == data.len()` and that
    /// every element is finite.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<Scalar>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    /// Construct without the finite-value scan. Callers are responsible for
    /// running [`Tensor::check_finite`] before the value escapes an op.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<Scalar>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: Scalar) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    /// 0-dimensional tensor holding a single value.
    pub fn scalar(value: Scalar) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> Scalar) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(|i| f(i)).collect(),
        }
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[Scalar]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// 2-D tensor from nested rows; all rows must have equal length.
    pub fn matrix(rows: &[&[Scalar]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::shape("ragged rows in Tensor::matrix"));
            }
            data.extend_from_slice(row);
        }
        Tensor::new([r, c], data)
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

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Scalar> {
        self.data
    }

    /// The single value of a 0-D or 1-element tensor.
    pub fn item(&self) -> Result<Scalar> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor with {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    /// Row/column accessor for rank-2 tensors. Panics on out-of-range
    /// indices like slice indexing would.
    pub fn at2(&self, r: usize, c: usize) -> Scalar {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Channel/row/column accessor for rank-3 tensors.
    pub fn at3(&self, ch: usize, r: usize, c: usize) -> Scalar {
        debug_assert_eq!(self.rank(), 3);
        self.data[(ch * self.shape[1] + r) * self.shape[2] + c]
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// Largest absolute elementwise difference against another tensor of
    /// identical shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<Scalar> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff on differing shapes"));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Scalar::max))
    }
}

/// Relative error with denominator `max(|a|, |b|, 1e-6)`.
pub fn rel_err(a: Scalar, b: Scalar) -> Scalar {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Tiny deterministic RNG for unit tests (xorshift64*, values in [-1, 1)).
#[cfg(test)]
pub(crate) struct TestRng(u64);

#[cfg(test)]
pub(crate) fn tests_rng(seed: u64) -> TestRng {
    TestRng(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1)
}

#[cfg(test)]
impl TestRng {
    pub fn next(&mut self) -> Scalar {
        let mut x = self.0;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.0 = x;
        let v = x.wrapping_mul(0x2545_F491_4F6C_DD1D);
        ((v >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) as Scalar
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_element_count_enforced() {
        assert!(Tensor::new([2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let err = Tensor::new([2], vec![1.0, Scalar::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert!(Tensor::new([1], vec![Scalar::INFINITY]).is_err());
    }

    #[test]
    fn accessors() {
        let t = Tensor::new([2, 3], (0..6).map(|i| i as Scalar).collect()).unwrap();
        assert_eq!(t.at2(1, 2), 5.0);
        assert_eq!(t.numel(), 6);
        let r = t.reshaped([3, 2]).unwrap();
        assert_eq!(r.at2(2, 1), 5.0);
    }
}
