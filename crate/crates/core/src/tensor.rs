use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Storage precision of a tensor. Arithmetic is always done in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub const fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(Dtype::F32),
            "F64" => Some(Dtype::F64),
            _ => None,
        }
    }

    /// Rounds `v` to the nearest value representable in this dtype.
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Dtype::F32 => v as f32 as f64,
            Dtype::F64 => v,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named rank-1 or rank-2 tensor.
///
/// Values are held in `f64`; for `F32` tensors every value is exactly
/// representable in `f32`, so narrowing on save is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    data: Vec<f64>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, dtype: Dtype, mut data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        validate_shape(&name, &shape, data.len())?;
        if dtype == Dtype::F32 {
            for v in &mut data {
                *v = dtype.round(*v);
            }
        }
        Ok(Self { name, shape, dtype, data })
    }

    pub fn matrix(name: impl Into<String>, m: &Matrix, dtype: Dtype) -> Result<Self> {
        Self::new(name, alloc::vec![m.rows(), m.cols()], dtype, m.as_slice().to_vec())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// The tensor as a matrix; rank-1 tensors become a single row.
    pub fn to_matrix(&self) -> Matrix {
        let (r, c) = match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("rank validated at construction"),
        };
        Matrix::from_row_major(r, c, self.data.clone())
    }

    /// Same name, shape and dtype with new values (rounded to the dtype).
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.name.clone(), self.shape.clone(), self.dtype, data)
    }

    pub fn renamed(&self, name: &str) -> Self {
        Self { name: name.to_string(), ..self.clone() }
    }
}

pub(crate) fn validate_shape(name: &str, shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.len() > 2 {
        return Err(Error::UnsupportedRank { name: name.to_string(), rank: shape.len() });
    }
    if shape.contains(&0) {
        return Err(Error::EmptyDimension { name: name.to_string(), shape: shape.to_vec() });
    }
    let expected = shape.iter().product::<usize>();
    if expected != len {
        return Err(Error::ElementCount {
            name: name.to_string(),
            shape: shape.to_vec(),
            expected,
            actual: len,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn rejects_rank_three_and_scalars() {
        let e = TensorRecord::new("x", vec![2, 2, 2], Dtype::F32, vec![0.0; 8]).unwrap_err();
        assert_eq!(e, Error::UnsupportedRank { name: "x".into(), rank: 3 });
        let e = TensorRecord::new("s", vec![], Dtype::F64, vec![1.0]).unwrap_err();
        assert!(matches!(e, Error::UnsupportedRank { rank: 0, .. }));
    }

    #[test]
    fn rejects_element_count_mismatch() {
        let e = TensorRecord::new("x", vec![2, 3], Dtype::F64, vec![0.0; 5]).unwrap_err();
        assert!(matches!(e, Error::ElementCount { expected: 6, actual: 5, .. }));
    }

    #[test]
    fn f32_values_are_rounded_on_construction() {
        let t = TensorRecord::new("x", vec![1], Dtype::F32, vec![0.1]).unwrap();
        assert_eq!(t.data()[0], 0.1f32 as f64);
        let t = TensorRecord::new("x", vec![1], Dtype::F64, vec![0.1]).unwrap();
        assert_eq!(t.data()[0], 0.1);
    }

    #[test]
    fn vector_to_matrix_is_one_row() {
        let t = TensorRecord::new("b", vec![3], Dtype::F64, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.to_matrix().shape(), (1, 3));
    }
}
