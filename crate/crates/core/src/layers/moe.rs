use super::{DenseLayer, GateNet, LoraAdapter};
use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Base layer plus the addressed domain's adapter:
/// `activation(x · Wᵀ + b + delta_domain(x))`.
pub fn mlora_forward(x: &Tensor, domain: usize, base: &DenseLayer, adapters: &[LoraAdapter]) -> Result<Tensor> {
    let adapter = adapters.get(domain).ok_or(Error::DomainOutOfRange { domain, n_domains: adapters.len() })?;
    let pre = base.pre_activation(x)?;
    Ok(base.activation.apply(&pre.add(&adapter.delta(x)?)?))
}

/// A dense layer whose output mixes the deltas of every domain's experts.
///
/// Experts are stored domain-major: expert `(d, k)` sits at index
/// `d * experts_per_domain + k`, which is also its gate column (shifted by one
/// when the backbone participates in the softmax).
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub base: DenseLayer,
    pub experts: Vec<LoraAdapter>,
    pub experts_per_domain: usize,
    pub gate: GateNet,
    pub gate_includes_backbone: bool,
}

impl MoeLayer {
    pub fn new(
        base: DenseLayer,
        experts: Vec<LoraAdapter>,
        experts_per_domain: usize,
        gate: GateNet,
        gate_includes_backbone: bool,
    ) -> Result<Self> {
        if experts_per_domain == 0 || experts.is_empty() || !experts.len().is_multiple_of(experts_per_domain) {
            return Err(Error::Invalid(format!(
                "{} experts cannot be split into {experts_per_domain} per domain",
                experts.len()
            )));
        }
        let n_domains = experts.len() / experts_per_domain;
        let outputs = experts.len() + usize::from(gate_includes_backbone);
        if gate.n_domains() != n_domains || gate.n_outputs() != outputs {
            return Err(Error::Invalid(format!(
                "gate is {}x{}, expected {n_domains}x{outputs}",
                gate.n_domains(),
                gate.n_outputs()
            )));
        }
        for e in &experts {
            if e.a.shape()[1] != base.d_in() || e.b.shape()[0] != base.d_out() {
                return Err(Error::Invalid("expert dimensions do not match the base layer".into()));
            }
        }
        Ok(Self { base, experts, experts_per_domain, gate, gate_includes_backbone })
    }

    pub fn n_domains(&self) -> usize {
        self.experts.len() / self.experts_per_domain
    }

    pub fn expert(&self, domain: usize, replica: usize) -> &LoraAdapter {
        &self.experts[domain * self.experts_per_domain + replica]
    }

    pub fn param_count(&self) -> usize {
        self.base.param_count() + self.experts.iter().map(LoraAdapter::param_count).sum::<usize>() + self.gate.param_count()
    }

    pub fn forward(&self, x: &Tensor, domain: usize) -> Result<Tensor> {
        if domain >= self.n_domains() {
            return Err(Error::DomainOutOfRange { domain, n_domains: self.n_domains() });
        }
        let pre = self.base.pre_activation(x)?;
        let deltas = self.experts.iter().map(|e| e.delta(x)).collect::<Result<Vec<_>>>()?;
        let weights = self.gate.weights(domain, x)?;
        let mixed = if self.gate_includes_backbone {
            let mut terms = vec![&pre];
            terms.extend(deltas.iter());
            Tensor::weighted_sum(&weights, &terms)?
        } else {
            let terms: Vec<_> = deltas.iter().collect();
            pre.add(&Tensor::weighted_sum(&weights, &terms)?)?
        };
        Ok(self.base.activation.apply(&mixed))
    }
}
