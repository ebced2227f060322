use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
pub struct ShapeError {
    pub shape: Vec<usize>,
    pub expected: usize,
    pub actual: usize,
}

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T: Scalar = f64> {
    shape: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self, ShapeError> {
        let expected = shape.iter().product::<usize>();
        if expected != values.len() || shape.contains(&0) {
            return Err(ShapeError {
                shape,
                expected,
                actual: values.len(),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![v; n],
        }
    }

    /// Builds a 2-D tensor from rows of equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, ShapeError> {
        let cols = rows.first().map_or(0, Vec::len);
        let values: Vec<T> = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], values)
    }

    pub fn vector(values: Vec<T>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, ShapeError> {
        Self::new(shape, self.values)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn sum_squares(&self) -> T {
        self.values.iter().map(|&v| v * v).sum()
    }

    /// Converts element type, e.g. `f64` to `f32`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

impl<T: Scalar> std::ops::Index<usize> for Tensor<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.values[i]
    }
}

impl<T: Scalar> std::ops::IndexMut<usize> for Tensor<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.values[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_length_must_agree() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert_eq!(err.expected, 6);
        assert!(Tensor::<f64>::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn reshape_keeps_values() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = t.clone().reshape(vec![4]).unwrap();
        assert_eq!(r.values(), t.values());
        assert!(t.reshape(vec![3]).is_err());
    }
}
