use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values.
///
/// Gradient storage lives here too so a [`super::Tape`] node is just a
/// `Tensor` plus the op that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dimension in shape {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        ensure_finite(&data, "tensor construction")?;
        Ok(Tensor { shape, data, requires_grad, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows/cols view of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(format!("expected 2-D tensor, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Reject NaN/Inf eagerly. Silent propagation would poison every
/// finite-difference oracle downstream, so any non-finite value is fatal.
pub fn ensure_finite(data: &[f64], context: &str) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite value {v} at flat index {i} during {context}"
            )));
        }
    }
    Ok(())
}
