use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Standard deviation of the Gaussian used for the `A` factor at init.
pub const LORA_INIT_STD: f64 = 0.02;

/// Low-rank update `(alpha / r) · B · A` applied as a pure delta to a dense layer.
///
/// `A` is `r × d_in`, `B` is `d_out × r`. A fresh adapter has `B = 0`, so its
/// delta is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        let (&[r, d_in], &[d_out, r2]) = (a.shape(), b.shape()) else {
            return Err(Error::Invalid(format!("adapter factors must be matrices: A {:?}, B {:?}", a.shape(), b.shape())));
        };
        if r != r2 {
            return Err(Error::Invalid(format!("rank mismatch: A has {r} rows, B has {r2} columns")));
        }
        if r > d_in.min(d_out) {
            return Err(Error::Invalid(format!("rank {r} exceeds min(d_in={d_in}, d_out={d_out})")));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Invalid(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self { a, b, alpha })
    }

    /// Fresh adapter: `A ~ N(0, 0.02²)`, `B = 0`.
    pub fn init(d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut impl Rng) -> Result<Self> {
        let a = init_a(rank, d_in, rng)?;
        Self::new(a, Tensor::zeros(&[d_out, rank.max(1)]), alpha)
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// `(alpha / r) · (x · Aᵀ) · Bᵀ`.
    pub fn delta(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul_bt(&self.a)?.matmul_bt(&self.b)?.scale(self.scale()))
    }
}

pub(crate) fn init_a(rank: usize, d_in: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if rank == 0 {
        return Err(Error::Invalid("adapter rank must be positive".into()));
    }
    let normal = Normal::new(0.0, LORA_INIT_STD).expect("valid std");
    let data = (0..rank * d_in).map(|_| normal.sample(rng)).collect();
    Ok(Tensor::new(vec![rank, d_in], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_adapter_has_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ad = LoraAdapter::init(5, 3, 2, 4.0, &mut rng).unwrap();
        let x = Tensor::new(vec![4, 5], (0..20).map(|v| v as f64 - 7.5).collect()).unwrap();
        assert!(ad.delta(&x).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rank_one_by_hand() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let ad = LoraAdapter::new(a, b, 1.0).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(ad.delta(&x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn doubling_alpha_doubles_delta() {
        let a = Tensor::from_rows(&[vec![0.3, -0.1, 0.7], vec![0.2, 0.5, -0.4]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.9, -1.3], vec![0.11, 0.6]]).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0, -3.0], vec![0.25, 0.5, 0.125]]).unwrap();
        let one = LoraAdapter::new(a.clone(), b.clone(), 1.5).unwrap().delta(&x).unwrap();
        let two = LoraAdapter::new(a, b, 3.0).unwrap().delta(&x).unwrap();
        for (u, v) in one.data().iter().zip(two.data()) {
            assert_eq!(2.0 * u, *v);
        }
    }

    #[test]
    fn rank_bound_enforced() {
        let a = Tensor::zeros(&[3, 2]);
        let b = Tensor::zeros(&[4, 3]);
        assert!(LoraAdapter::new(a, b, 1.0).is_err());
    }
}
