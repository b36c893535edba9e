use super::lora::init_a;
use super::{Activation, DenseLayer, GateNet, LoraAdapter, MoeLayer};
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::params::{GroupTag, ParamId, ParamStore};
use crate::{rng, Error, Result};

/// Which adapters contribute to a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Routing {
    /// Base layers only; adapters and gates are skipped entirely.
    Backbone,
    /// Base plus the delta of a single expert, bypassing the gate.
    Expert { domain: usize, replica: usize },
    /// The layer's full routing: per-row domain adapter for MLoRA, gated
    /// mixture of every expert for MoE.
    Mixture,
}

/// Names of the tape inputs that carry routing metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteInputs {
    pub domain_ids: String,
}

impl Default for RouteInputs {
    fn default() -> Self {
        Self { domain_ids: "domain".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterIds {
    pub domain: usize,
    pub replica: usize,
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateIds {
    pub logits: ParamId,
    pub projection: Option<ParamId>,
}

/// How a layer's adapters are combined under [`Routing::Mixture`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterPlan {
    None,
    /// One adapter per domain, selected by the row's domain.
    PerDomain { n_domains: usize, rank: usize },
    /// `experts_per_domain` adapters per domain, all mixed by a gate.
    Mixture {
        n_domains: usize,
        experts_per_domain: usize,
        rank: usize,
        input_gating: bool,
        gate_includes_backbone: bool,
        clamp_one_hot: bool,
    },
}

/// A dense layer registered in a [`ParamStore`], optionally carrying adapters
/// and a gate, that records itself onto a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedDense {
    pub layer: usize,
    pub prefix: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub adapters: Vec<AdapterIds>,
    pub experts_per_domain: usize,
    pub n_domains: usize,
    pub gate: Option<GateIds>,
    pub gate_includes_backbone: bool,
    pub clamp_one_hot: bool,
    pub d_in: usize,
    pub d_out: usize,
}

impl AdaptedDense {
    /// Registers the base weights as backbone parameters and, per `plan`,
    /// zero-delta adapters tagged `expert(d, k, layer)` and a zero-logit gate.
    ///
    /// Adapter `A` factors are drawn from a stream keyed by `seed` and the
    /// parameter name, so the same adapter gets the same initial values in
    /// MLoRA and MoE models.
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        layer: usize,
        weight: Tensor,
        bias: Tensor,
        activation: Activation,
        plan: AdapterPlan,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        let base = DenseLayer::new(weight, bias, activation)?;
        let (d_in, d_out) = (base.d_in(), base.d_out());
        let weight = store.add(format!("{prefix}.weight"), GroupTag::Backbone, base.weight)?;
        let bias = store.add(format!("{prefix}.bias"), GroupTag::Backbone, base.bias)?;
        let mut out = Self {
            layer,
            prefix: prefix.to_string(),
            weight,
            bias,
            activation,
            adapters: Vec::new(),
            experts_per_domain: 0,
            n_domains: 0,
            gate: None,
            gate_includes_backbone: false,
            clamp_one_hot: false,
            d_in,
            d_out,
        };
        let (n_domains, per_domain, rank) = match plan {
            AdapterPlan::None => return Ok(out),
            AdapterPlan::PerDomain { n_domains, rank } => (n_domains, 1, rank),
            AdapterPlan::Mixture { n_domains, experts_per_domain, rank, .. } => (n_domains, experts_per_domain, rank),
        };
        if n_domains == 0 || per_domain == 0 || rank == 0 {
            return Err(Error::Invalid(format!(
                "adapted layer needs positive domains/experts/rank, got {n_domains}/{per_domain}/{rank}"
            )));
        }
        let rank = rank.min(d_in).min(d_out);
        let scale = alpha / rank as f64;
        for domain in 0..n_domains {
            for replica in 0..per_domain {
                let tag = GroupTag::Expert { domain, replica, layer };
                let name = format!("{prefix}.lora.d{domain}.k{replica}");
                let a = init_a(rank, d_in, &mut rng::stream(seed, &format!("{name}.A")))?;
                let a = store.add(format!("{name}.A"), tag, a)?;
                let b = store.add(format!("{name}.B"), tag, Tensor::zeros(&[d_out, rank]))?;
                out.adapters.push(AdapterIds { domain, replica, a, b, scale });
            }
        }
        out.n_domains = n_domains;
        out.experts_per_domain = per_domain;
        if let AdapterPlan::Mixture { input_gating, gate_includes_backbone, clamp_one_hot, .. } = plan {
            if clamp_one_hot && gate_includes_backbone {
                return Err(Error::Invalid("a one-hot clamped gate cannot include the backbone".into()));
            }
            let outputs = n_domains * per_domain + usize::from(gate_includes_backbone);
            let tag = GroupTag::Gate { layer };
            let logits = store.add(format!("{prefix}.gate.logits"), tag, Tensor::zeros(&[n_domains, outputs]))?;
            let projection = if input_gating {
                Some(store.add(format!("{prefix}.gate.projection"), tag, Tensor::zeros(&[outputs, d_in]))?)
            } else {
                None
            };
            out.gate = Some(GateIds { logits, projection });
            out.gate_includes_backbone = gate_includes_backbone;
            out.clamp_one_hot = clamp_one_hot;
        }
        Ok(out)
    }

    pub fn expert_count(&self) -> usize {
        self.adapters.len()
    }

    /// Gate column that expert `(domain, 0)` occupies.
    fn own_columns(&self) -> Vec<usize> {
        (0..self.n_domains).map(|d| d * self.experts_per_domain).collect()
    }

    fn record_delta(&self, tape: &mut Tape, x: NodeId, ad: &AdapterIds) -> NodeId {
        let a = tape.param(ad.a);
        let b = tape.param(ad.b);
        let h = tape.matmul_bt(x, a);
        let h = tape.matmul_bt(h, b);
        tape.scale(h, ad.scale)
    }

    /// Records `activation(base(x) + routed deltas)` and returns its node.
    pub fn record(&self, tape: &mut Tape, x: NodeId, routing: Routing, inputs: &RouteInputs) -> Result<NodeId> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let pre = tape.matmul_bt(x, w);
        let pre = tape.add(pre, b);
        let mixed = match routing {
            Routing::Backbone => pre,
            Routing::Expert { domain, replica } => {
                let ad = self
                    .adapters
                    .iter()
                    .find(|a| a.domain == domain && a.replica == replica)
                    .ok_or_else(|| Error::Invalid(format!("layer {} has no expert ({domain}, {replica})", self.layer)))?;
                let delta = self.record_delta(tape, x, ad);
                tape.add(pre, delta)
            }
            Routing::Mixture if self.adapters.is_empty() => pre,
            Routing::Mixture => {
                let deltas: Vec<_> = self.adapters.iter().map(|ad| self.record_delta(tape, x, ad)).collect();
                match self.gate {
                    Some(gate) if !self.clamp_one_hot => {
                        let table = tape.param(gate.logits);
                        let mut logits = tape.gather(table, &inputs.domain_ids);
                        if let Some(p) = gate.projection {
                            let p = tape.param(p);
                            let proj = tape.matmul_bt(x, p);
                            logits = tape.add(logits, proj);
                        }
                        let weights = tape.softmax(logits);
                        if self.gate_includes_backbone {
                            let mut terms = vec![pre];
                            terms.extend(deltas);
                            tape.weighted_sum(weights, &terms)
                        } else {
                            let mix = tape.weighted_sum(weights, &deltas);
                            tape.add(pre, mix)
                        }
                    }
                    _ => {
                        let table = tape.constant(GateNet::one_hot_table(&self.own_columns(), self.adapters.len()));
                        let weights = tape.gather(table, &inputs.domain_ids);
                        let mix = tape.weighted_sum(weights, &deltas);
                        tape.add(pre, mix)
                    }
                }
            }
        };
        Ok(match self.activation {
            Activation::Relu => tape.relu(mixed),
            Activation::Sigmoid => tape.sigmoid(mixed),
            Activation::Identity => mixed,
        })
    }

    pub fn dense(&self, store: &ParamStore) -> DenseLayer {
        DenseLayer {
            weight: store.value(self.weight).clone(),
            bias: store.value(self.bias).clone(),
            activation: self.activation,
        }
    }

    pub fn adapter(&self, store: &ParamStore, domain: usize, replica: usize) -> Option<LoraAdapter> {
        let ad = self.adapters.iter().find(|a| a.domain == domain && a.replica == replica)?;
        let rank = store.value(ad.a).shape()[0] as f64;
        Some(LoraAdapter { a: store.value(ad.a).clone(), b: store.value(ad.b).clone(), alpha: ad.scale * rank })
    }

    /// Eager view of this layer with its current parameter values.
    pub fn moe_layer(&self, store: &ParamStore) -> Result<MoeLayer> {
        let gate_ids = self.gate.ok_or_else(|| Error::Invalid(format!("layer {} has no gate", self.layer)))?;
        let experts = self
            .adapters
            .iter()
            .map(|ad| self.adapter(store, ad.domain, ad.replica).expect("listed adapter"))
            .collect();
        let gate = GateNet {
            logits: store.value(gate_ids.logits).clone(),
            projection: gate_ids.projection.map(|p| store.value(p).clone()),
            clamp: self.clamp_one_hot.then(|| self.own_columns()),
        };
        MoeLayer::new(self.dense(store), experts, self.experts_per_domain, gate, self.gate_includes_backbone)
    }
}
