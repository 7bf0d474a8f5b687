//! Dense row-major f64 tensors, up to 4 axes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by tensor and network operations.
#[derive(Debug, Clone, PartialEq)]
pub enum NnError {
    /// Incompatible shapes; the message names the operation and both shapes.
    Shape(String),
    /// A forward or backward value left the finite range.
    NonFinite(String),
    /// An input violated a mathematical precondition (e.g. alpha < 1).
    Domain(String),
}

impl fmt::Display for NnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NnError::Shape(m) => write!(f, "shape error: {m}"),
            NnError::NonFinite(m) => write!(f, "non-finite value: {m}"),
            NnError::Domain(m) => write!(f, "domain error: {m}"),
        }
    }
}

#[cfg(test)]
impl std::error::Error for NnError {}

/// Row-major dense tensor. Axis semantics are N x C x H x W by convention,
/// but most code uses 1-axis vectors and 3-axis C x H x W feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 4 {
            return Err(NnError::Shape(format!(
                "tensor rank must be 1..=4, got {}",
                shape.len()
            )));
        }
        if n != data.len() {
            return Err(NnError::Shape(format!(
                "shape {shape:?} implies {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Single element of a scalar (shape [1]) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// C, H, W of a 3-axis feature map.
    pub fn chw(&self) -> Result<(usize, usize, usize), NnError> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(NnError::Shape(format!("expected C x H x W tensor, got {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(NnError::Shape(_))
        ));
    }

    #[test]
    fn rank_bounds() {
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
    }
}
