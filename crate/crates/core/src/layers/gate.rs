use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Domain-conditioned gate producing simplex weights over a layer's experts.
///
/// The default gate is a lookup of one logits row per domain. With an input
/// projection, `x · Pᵀ` is added to the looked-up row before the softmax.
/// A clamped gate ignores its logits and returns a fixed one-hot row per
/// domain.
#[derive(Debug, Clone, PartialEq)]
pub struct GateNet {
    /// `n_domains × n_outputs`.
    pub logits: Tensor,
    /// `n_outputs × d_in`, only when input-conditioned gating is enabled.
    pub projection: Option<Tensor>,
    /// Column that receives all weight for each domain.
    pub clamp: Option<Vec<usize>>,
}

impl GateNet {
    /// Zero logits: uniform weights.
    pub fn uniform(n_domains: usize, n_outputs: usize) -> Self {
        Self { logits: Tensor::zeros(&[n_domains, n_outputs]), projection: None, clamp: None }
    }

    pub fn n_domains(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn n_outputs(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.logits.numel() + self.projection.as_ref().map_or(0, Tensor::numel)
    }

    /// One-hot table routing domain `d` to column `columns[d]`.
    pub fn one_hot_table(columns: &[usize], n_outputs: usize) -> Tensor {
        let mut t = Tensor::zeros(&[columns.len(), n_outputs]);
        for (d, &c) in columns.iter().enumerate() {
            t.data_mut()[d * n_outputs + c] = 1.0;
        }
        t
    }

    fn check_domain(&self, domain: usize) -> Result<()> {
        if domain >= self.n_domains() {
            return Err(Error::DomainOutOfRange { domain, n_domains: self.n_domains() });
        }
        Ok(())
    }

    /// Weights for every row of `x`, shape `batch × n_outputs`.
    pub fn weights(&self, domain: usize, x: &Tensor) -> Result<Tensor> {
        self.check_domain(domain)?;
        let rows = vec![domain; x.leading()];
        if let Some(columns) = &self.clamp {
            return Ok(Self::one_hot_table(columns, self.n_outputs()).gather_rows(&rows)?);
        }
        let mut logits = self.logits.gather_rows(&rows)?;
        if let Some(p) = &self.projection {
            logits = logits.add(&x.matmul_bt(p)?)?;
        }
        Ok(logits.softmax())
    }

    /// Weights from the logits table alone, for gates without input projection.
    pub fn domain_weights(&self, domain: usize) -> Result<Vec<f64>> {
        self.check_domain(domain)?;
        if self.projection.is_some() {
            return Err(Error::Invalid("input-conditioned gate weights depend on x".into()));
        }
        let zero = Tensor::zeros(&[1, 1]);
        Ok(self.weights(domain, &zero)?.into_data())
    }
}
