//! Adapter algebra: dense base layers, LoRA adapters, per-domain MLoRA layers
//! and gated MoE-MLoRA mixtures.
//!
//! The eager types here ([`DenseLayer`], [`LoraAdapter`], [`GateNet`],
//! [`MoeLayer`]) own their tensors and evaluate directly. Models instead record
//! the same computation onto a [`Tape`](crate::autodiff::Tape) through
//! [`AdaptedDense`], using the identical kernel sequence so both paths agree
//! bit for bit.

mod dense;
mod gate;
mod graph;
mod lora;
mod moe;

use serde::{Deserialize, Serialize};

pub use dense::DenseLayer;
pub use gate::GateNet;
pub use graph::{AdaptedDense, AdapterIds, AdapterPlan, GateIds, RouteInputs, Routing};
pub use lora::{LoraAdapter, LORA_INIT_STD};
pub use moe::{mlora_forward, MoeLayer};

use crate::autodiff::Tensor;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => x.relu(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Identity => x.clone(),
        }
    }
}

pub fn dense_forward(x: &Tensor, layer: &DenseLayer) -> Result<Tensor> {
    layer.forward(x)
}

pub fn lora_delta(x: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    adapter.delta(x)
}

pub fn gate_weights(domain: usize, x: &Tensor, gate: &GateNet) -> Result<Tensor> {
    gate.weights(domain, x)
}

pub fn moe_forward(x: &Tensor, domain: usize, layer: &MoeLayer) -> Result<Tensor> {
    layer.forward(x, domain)
}
