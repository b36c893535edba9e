//! CTR backbones (MLP tower, Wide & Deep, DeepFM) whose tower and head can
//! carry per-domain adapters (MLoRA) or gated expert mixtures (MoE-MLoRA).

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use crate::data::{FeatureSchema, Field};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};

use crate::autodiff::{Inputs, NodeId, Tape, Tensor};
use crate::data::{Dataset, Example};
use crate::eval::Scorer;
use crate::layers::{AdaptedDense, Activation, AdapterPlan, MoeLayer, RouteInputs, Routing};
use crate::params::{ParamId, ParamListing, ParamStore};
use crate::{rng, Error, Result};

/// Tape input carrying each row's domain index.
pub const DOMAIN_INPUT: &str = "domain";
/// Tape input carrying labels, shape `batch × 1`.
pub const LABEL_INPUT: &str = "label";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    Wdl,
    Deepfm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Plain,
    Mlora,
    Moe,
}

macro_rules! name_enum {
    ($ty:ty { $($variant:ident => $name:literal),+ }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$(<$ty>::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $(<$ty>::$variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(<$ty>::$variant),)+
                    other => Err(Error::Config(format!("unknown {} `{other}`", stringify!($ty).to_lowercase()))),
                }
            }
        }
    };
}

name_enum!(Arch { Mlp => "mlp", Wdl => "wdl", Deepfm => "deepfm" });
name_enum!(Mode { Plain => "plain", Mlora => "mlora", Moe => "moe" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Replicas per domain in MoE mode.
    pub experts_per_domain: usize,
    /// Adds a projection of the layer input to the gate logits.
    pub input_gating: bool,
    /// Puts the base output inside the gate's softmax instead of adding it.
    pub gate_includes_backbone: bool,
    /// Replaces every gate by a fixed one-hot row selecting the input
    /// domain's first expert. With one expert per domain this is MLoRA.
    pub clamp_one_hot: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 4.0,
            experts_per_domain: 1,
            input_gating: false,
            gate_includes_backbone: false,
            clamp_one_hot: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub mode: Mode,
    pub hidden: Vec<usize>,
    pub adapter: AdapterConfig,
    /// Embeds the domain index as an extra categorical field.
    pub domain_as_feature: bool,
    pub embedding_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Mlp,
            mode: Mode::Plain,
            hidden: vec![64, 32],
            adapter: AdapterConfig::default(),
            domain_as_feature: false,
            embedding_std: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if !(self.embedding_std > 0.0 && self.embedding_std.is_finite()) {
            return Err(Error::Config("embedding_std must be positive".into()));
        }
        if self.mode != Mode::Plain {
            let a = &self.adapter;
            if a.rank == 0 || !(a.alpha > 0.0 && a.alpha.is_finite()) {
                return Err(Error::Config("adapter rank and alpha must be positive".into()));
            }
        }
        if self.mode == Mode::Moe {
            let a = &self.adapter;
            if a.experts_per_domain == 0 {
                return Err(Error::Config("experts_per_domain must be at least 1".into()));
            }
            if a.clamp_one_hot && (a.gate_includes_backbone || a.input_gating) {
                return Err(Error::Config("a clamped gate has no backbone slot or input projection".into()));
            }
        }
        Ok(())
    }
}

/// Row-major batch inputs for a model tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// One id column per schema field.
    pub ids: Vec<Vec<usize>>,
    pub domains: Vec<usize>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a Example>, n_fields: usize) -> Self {
        let mut b = Batch { ids: vec![Vec::new(); n_fields], domains: Vec::new(), labels: Vec::new() };
        for r in rows {
            for (col, &id) in b.ids.iter_mut().zip(&r.ids) {
                col.push(id);
            }
            b.domains.push(r.domain);
            b.labels.push(f64::from(r.label));
        }
        b
    }

    pub fn from_indices(ds: &Dataset, indices: &[usize]) -> Self {
        Self::from_rows(indices.iter().map(|&i| &ds.rows()[i]), ds.schema().n_fields())
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn inputs(&self, schema: &FeatureSchema) -> Result<Inputs> {
        let n = self.len();
        let mut inputs = Inputs::new();
        for (f, col) in schema.fields.iter().zip(&self.ids) {
            inputs.set_ids(f.name.clone(), col.clone());
        }
        inputs.set_ids(DOMAIN_INPUT, self.domains.clone());
        if self.labels.len() == n && n > 0 {
            inputs.set_tensor(LABEL_INPUT, Tensor::new(vec![n, 1], self.labels.clone())?);
        }
        Ok(inputs)
    }
}

/// Parameters of the wide (linear) part: one `cardinality × 1` table per
/// field and a scalar bias.
#[derive(Debug, Clone, PartialEq)]
pub struct WideIds {
    pub tables: Vec<ParamId>,
    pub bias: ParamId,
}

/// A recorded forward graph for one routing.
#[derive(Debug)]
pub struct ModelGraph {
    pub tape: Tape,
    pub logit: NodeId,
    pub prob: NodeId,
    pub loss: NodeId,
    pub routing: Routing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtrModel {
    pub schema: FeatureSchema,
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamStore,
    pub embeddings: Vec<ParamId>,
    pub domain_embedding: Option<ParamId>,
    pub wide: Option<WideIds>,
    /// Tower layers followed by the head.
    pub layers: Vec<AdaptedDense>,
}

fn normal_tensor(shape: &[usize], std: f64, seed: u64, name: &str) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let mut rng = rng::stream(seed, name);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect()).expect("shape matches data")
}

/// Builds a model whose every initial value is a function of `seed` and the
/// parameter name alone, so backbones match across modes.
pub fn build_model(schema: &FeatureSchema, config: &ModelConfig, seed: u64) -> Result<CtrModel> {
    schema.validate()?;
    config.validate()?;
    let mut params = ParamStore::new();
    let k = schema.embedding_dim;
    let mut embeddings = Vec::new();
    for f in &schema.fields {
        let name = format!("emb.{}", f.name);
        let t = normal_tensor(&[f.cardinality, k], config.embedding_std, seed, &name);
        embeddings.push(params.add(name, crate::params::GroupTag::Backbone, t)?);
    }
    let domain_embedding = if config.domain_as_feature {
        let t = normal_tensor(&[schema.n_domains, k], config.embedding_std, seed, "emb.domain");
        Some(params.add("emb.domain", crate::params::GroupTag::Backbone, t)?)
    } else {
        None
    };
    let wide = if config.arch == Arch::Mlp {
        None
    } else {
        let mut tables = Vec::new();
        for f in &schema.fields {
            let t = Tensor::zeros(&[f.cardinality, 1]);
            tables.push(params.add(format!("wide.{}", f.name), crate::params::GroupTag::Backbone, t)?);
        }
        let bias = params.add("wide.bias", crate::params::GroupTag::Backbone, Tensor::zeros(&[1]))?;
        Some(WideIds { tables, bias })
    };

    let a = &config.adapter;
    let plan = match config.mode {
        Mode::Plain => AdapterPlan::None,
        Mode::Mlora => AdapterPlan::PerDomain { n_domains: schema.n_domains, rank: a.rank },
        Mode::Moe => AdapterPlan::Mixture {
            n_domains: schema.n_domains,
            experts_per_domain: a.experts_per_domain,
            rank: a.rank,
            input_gating: a.input_gating,
            gate_includes_backbone: a.gate_includes_backbone,
            clamp_one_hot: a.clamp_one_hot,
        },
    };
    let mut d_in = k * (schema.n_fields() + usize::from(config.domain_as_feature));
    let mut layers = Vec::new();
    let widths: Vec<usize> = config.hidden.iter().copied().chain([1]).collect();
    for (layer, &d_out) in widths.iter().enumerate() {
        let is_head = layer + 1 == widths.len();
        let prefix = if is_head { "head".to_string() } else { format!("tower.{layer}") };
        // He init for relu layers, Glorot-style for the linear head.
        let std = if is_head { (1.0 / d_in as f64).sqrt() } else { (2.0 / d_in as f64).sqrt() };
        let weight = normal_tensor(&[d_out, d_in], std, seed, &format!("{prefix}.weight"));
        let activation = if is_head { Activation::Identity } else { Activation::Relu };
        layers.push(AdaptedDense::register(
            &mut params,
            &prefix,
            layer,
            weight,
            Tensor::zeros(&[d_out]),
            activation,
            plan,
            a.alpha,
            seed,
        )?);
        d_in = d_out;
    }
    Ok(CtrModel { schema: schema.clone(), config: config.clone(), seed, params, embeddings, domain_embedding, wide, layers })
}

/// `Σ_{i<j} ⟨v_i, v_j⟩` via `½ Σ_f [(Σ_i v_{i,f})² − Σ_i v_{i,f}²]`.
pub fn fm_pairwise(fields: &[Vec<f64>]) -> Result<f64> {
    let k = fields.first().ok_or_else(|| Error::Invalid("fm_pairwise needs at least one field".into()))?.len();
    if fields.iter().any(|v| v.len() != k) {
        return Err(Error::Invalid("field embeddings differ in dimension".into()));
    }
    let mut total = 0.0;
    for f in 0..k {
        let s: f64 = fields.iter().map(|v| v[f]).sum();
        let sq: f64 = fields.iter().map(|v| v[f] * v[f]).sum();
        total += s * s - sq;
    }
    Ok(0.5 * total)
}

/// Sum of per-(field, id) weights plus the global bias, for every row.
pub fn wide_logit(ids: &[Vec<usize>], tables: &[&[f64]], bias: f64, names: &[&str]) -> Result<Vec<f64>> {
    if ids.len() != tables.len() {
        return Err(Error::Invalid(format!("{} id columns for {} wide tables", ids.len(), tables.len())));
    }
    let n = ids.first().map_or(0, Vec::len);
    let mut out = vec![bias; n];
    for (f, (col, table)) in ids.iter().zip(tables).enumerate() {
        for (o, &id) in out.iter_mut().zip(col) {
            let w = table.get(id).ok_or_else(|| Error::IdOutOfRange {
                field: names.get(f).map_or_else(|| format!("field {f}"), |s| s.to_string()),
                id,
                cardinality: table.len(),
            })?;
            *o += w;
        }
    }
    Ok(out)
}

impl CtrModel {
    pub fn param_groups(&self) -> Vec<ParamListing> {
        self.params.groups()
    }

    pub fn n_domains(&self) -> usize {
        self.schema.n_domains
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn arch(&self) -> Arch {
        self.config.arch
    }

    /// Records the forward graph, loss included, for `routing`.
    pub fn graph(&self, routing: Routing) -> Result<ModelGraph> {
        let mut tape = Tape::new();
        let route = RouteInputs { domain_ids: DOMAIN_INPUT.into() };
        let mut field_embs = Vec::new();
        for (f, &table) in self.schema.fields.iter().zip(&self.embeddings) {
            let t = tape.param(table);
            field_embs.push(tape.gather(t, f.name.clone()));
        }
        let mut deep_in = field_embs.clone();
        if let Some(d) = self.domain_embedding {
            let t = tape.param(d);
            deep_in.push(tape.gather(t, DOMAIN_INPUT));
        }
        let mut h = tape.concat(&deep_in);
        for layer in &self.layers {
            h = layer.record(&mut tape, h, routing, &route)?;
        }
        let mut logit = h;
        if let Some(w) = &self.wide {
            let mut wide = tape.param(w.bias);
            for (f, &table) in self.schema.fields.iter().zip(&w.tables) {
                let t = tape.param(table);
                let g = tape.gather(t, f.name.clone());
                wide = tape.add(g, wide);
            }
            logit = tape.add(logit, wide);
        }
        if self.config.arch == Arch::Deepfm {
            let mut sum = field_embs[0];
            let mut sq = tape.mul(field_embs[0], field_embs[0]);
            for &e in &field_embs[1..] {
                sum = tape.add(sum, e);
                let e2 = tape.mul(e, e);
                sq = tape.add(sq, e2);
            }
            let sum2 = tape.mul(sum, sum);
            let neg = tape.scale(sq, -1.0);
            let diff = tape.add(sum2, neg);
            let fm = tape.sum_last(diff);
            let fm = tape.scale(fm, 0.5);
            logit = tape.add(logit, fm);
        }
        let prob = tape.sigmoid(logit);
        let labels = tape.input(LABEL_INPUT);
        let loss = tape.bce(prob, labels);
        Ok(ModelGraph { tape, logit, prob, loss, routing })
    }

    /// Rejects rows whose ids or domain fall outside the schema, naming the field.
    pub fn check_rows(&self, rows: &[Example]) -> Result<()> {
        rows.iter().try_for_each(|r| self.schema.check_example(r))
    }

    /// Probabilities for `rows` under `routing`, each row routed by its own domain.
    pub fn predict_rows(&self, rows: &[Example], routing: Routing) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        for r in rows {
            if r.ids.len() != self.schema.n_fields() {
                return Err(Error::Invalid(format!("row has {} ids, schema has {} fields", r.ids.len(), self.schema.n_fields())));
            }
            for (f, &id) in self.schema.fields.iter().zip(&r.ids) {
                if id >= f.cardinality {
                    return Err(Error::IdOutOfRange { field: f.name.clone(), id, cardinality: f.cardinality });
                }
            }
            if r.domain >= self.n_domains() {
                return Err(Error::DomainOutOfRange { domain: r.domain, n_domains: self.n_domains() });
            }
        }
        let mut g = self.graph(routing)?;
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(4096) {
            let batch = Batch::from_rows(chunk, self.schema.n_fields());
            let inputs = batch.inputs(&self.schema)?;
            out.extend_from_slice(g.tape.forward_to(&self.params, &inputs, g.prob)?.data());
        }
        Ok(out)
    }

    pub fn predict(&self, rows: &[Example]) -> Result<Vec<f64>> {
        self.predict_rows(rows, Routing::Mixture)
    }

    /// Eager view of adapted layer `layer` with current values (MoE mode only).
    pub fn moe_layer(&self, layer: usize) -> Result<MoeLayer> {
        self.layers.get(layer).ok_or_else(|| Error::Invalid(format!("no layer {layer}")))?.moe_layer(&self.params)
    }

    /// Gate weights of every adapted layer for `domain`, without input conditioning.
    pub fn gate_weights(&self, domain: usize) -> Result<Vec<Vec<f64>>> {
        (0..self.layers.len()).map(|l| self.moe_layer(l)?.gate.domain_weights(domain)).collect()
    }
}

/// Probabilities for a batch that all belong to `domain`.
pub fn predict_ctr(model: &CtrModel, rows: &[Example], domain: usize) -> Result<Vec<f64>> {
    let routed: Vec<Example> = rows.iter().map(|r| Example { domain, ..r.clone() }).collect();
    model.predict(&routed)
}

impl Scorer for CtrModel {
    fn score(&self, ds: &Dataset) -> Result<Vec<f64>> {
        if ds.schema().fields != self.schema.fields || ds.n_domains() != self.n_domains() {
            return Err(Error::Invalid("dataset schema does not match the model".into()));
        }
        self.predict(ds.rows())
    }
}
