//! Multi-domain click-through-rate training with per-layer mixtures of
//! low-rank expert adapters.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: dense tensors and a static reverse-mode tape.
//! * [`params`]: named parameters tagged backbone / expert / gate.
//! * [`layers`]: dense layers, LoRA adapters, per-domain (MLoRA) layers and
//!   gated expert mixtures (MoE-MLoRA).
//! * [`models`]: MLP, Wide & Deep and DeepFM backbones in plain, MLoRA and
//!   MoE modes, plus checkpoints.
//! * [`training`]: BCE, Adam and the three-phase pipeline with freeze checks.
//! * [`data`]: click-log CSV ingestion, stratified splits and a synthetic
//!   multi-domain generator.
//! * [`eval`]: AUC, weighted AUC and sparsity.
//! * [`cli`]: the `moelora` command-line driver.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod models;
pub mod params;
pub mod training;

pub(crate) mod rng;

pub use error::{Error, Result};
