use super::Activation;
use crate::autodiff::Tensor;
use crate::{Error, Result};

/// `activation(x · Wᵀ + b)` with `W` stored as `d_out × d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        let [d_out, _] = weight.shape() else {
            return Err(Error::Invalid(format!("dense weight must be a matrix, got {:?}", weight.shape())));
        };
        if bias.shape() != [*d_out] {
            return Err(Error::Invalid(format!("bias {:?} does not match d_out {d_out}", bias.shape())));
        }
        if !weight.is_finite() || !bias.is_finite() {
            return Err(Error::NonFinite { what: "dense layer parameters".into() });
        }
        Ok(Self { weight, bias, activation })
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn pre_activation(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul_bt(&self.weight)?.add(&self.bias)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.activation.apply(&self.pre_activation(x)?))
    }
}
