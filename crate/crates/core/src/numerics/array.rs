//! Dense row-major n-dimensional array.

use super::{ensure_finite, Scalar};
use crate::error::{OwmError, Result};

/// Shape plus flat row-major storage. Element count always equals the product
/// of the extents; every extent is positive (rank 0 holds one element).
/// Constructors reject non-finite input so NaN/Inf cannot enter silently.
#[derive(Debug, Clone, PartialEq)]
pub struct Array<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Array<S> {
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(OwmError::shape("from_vec", format!("zero extent in {shape:?}")));
        }
        if data.len() != n {
            return Err(OwmError::shape(
                "from_vec",
                format!("shape {shape:?} wants {n} elements, got {}", data.len()),
            ));
        }
        ensure_finite("from_vec", &data)?;
        Ok(Array { shape: shape.to_vec(), data })
    }

    /// Skips validation; callers must have checked count and finiteness.
    pub(crate) fn from_vec_unchecked(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Array { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        Array { shape: shape.to_vec(), data: vec![S::zero(); n] }
    }

    pub fn full(shape: &[usize], v: S) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::from_vec(shape, vec![v; n])
    }

    /// Rank-0 array holding a single value.
    pub fn scalar(v: S) -> Self {
        Array { shape: vec![], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::from_vec(shape, (0..n).map(&mut f).collect())
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Single element of a rank-0 or one-element array.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on array of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same data under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(OwmError::shape(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", self.shape),
            ));
        }
        Ok(Array { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Row-major strides of this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Maps every element through `f` (plain value map, no tape).
    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Array { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Converts element type; used to run f32 model parameters under f64.
    pub fn cast<T: Scalar>(&self) -> Array<T> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
        }
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_count_must_match_shape() {
        assert!(Array::from_vec(&[2, 3], vec![0.0f32; 6]).is_ok());
        assert!(Array::from_vec(&[2, 3], vec![0.0f32; 5]).is_err());
        assert!(Array::from_vec(&[2, 0], Vec::<f32>::new()).is_err());
    }

    #[test]
    fn non_finite_input_is_rejected() {
        assert!(Array::from_vec(&[2], vec![1.0f32, f32::NAN]).is_err());
        assert!(Array::from_vec(&[2], vec![1.0f32, f32::INFINITY]).is_err());
    }

    #[test]
    fn rank_zero_holds_one_element() {
        let a = Array::scalar(4.0f64);
        assert_eq!(a.rank(), 0);
        assert_eq!(a.len(), 1);
        assert_eq!(a.item(), 4.0);
    }

    #[test]
    fn strides_are_row_major() {
        let a = Array::<f32>::zeros(&[2, 3, 4]);
        assert_eq!(a.strides(), vec![12, 4, 1]);
    }
}
