#![allow(dead_code)]

use moelora::autodiff::{grad_check, Inputs, NodeId, Tape, Tensor};
use moelora::data::{Dataset, Example, FeatureSchema, Interactions, SyntheticSpec};
use moelora::layers::{Activation, AdaptedDense, AdapterPlan, RouteInputs, Routing};
use moelora::models::{build_model, AdapterConfig, Arch, Batch, CtrModel, Mode, ModelConfig};
use moelora::params::{GroupTag, ParamId, ParamStore};
use moelora::training::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const GRAD_TOL: f64 = 1e-5;
const EPS: f64 = 1e-5;
/// Relu inputs closer than this to zero are resampled before a check.
const KINK_MARGIN: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64, shift: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std + shift).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Three fields plus a small context column, two or more domains.
pub fn tiny_schema(n_domains: usize) -> FeatureSchema {
    FeatureSchema::standard(5, 6, &[3], 3, n_domains).unwrap()
}

pub fn random_rows(schema: &FeatureSchema, n: usize, seed: u64) -> Vec<Example> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| Example {
            ids: schema.fields.iter().map(|f| r.random_range(0..f.cardinality)).collect(),
            label: (i % 2) as u8,
            domain: r.random_range(0..schema.n_domains),
        })
        .collect()
}

pub fn model_config(arch: Arch, mode: Mode) -> ModelConfig {
    ModelConfig { arch, mode, hidden: vec![6, 4], ..ModelConfig::default() }
}

/// Max relative error over every parameter of `store`, evaluating `loss`.
fn check_all_params(store: &mut ParamStore, tape: &mut Tape, loss: NodeId, inputs: &Inputs) -> f64 {
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let theta = store.value(id).clone();
        let err = grad_check(
            |t| {
                *store.value_mut(id) = t.clone();
                let value = tape.forward_to(store, inputs, loss)?.item();
                let grads = tape.backward(store, loss)?;
                let g = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
                Ok((value, g))
            },
            &theta,
            EPS,
        )
        .unwrap();
        *store.value_mut(id) = theta;
        worst = worst.max(err);
    }
    worst
}

fn relu_clear(store: &ParamStore, tape: &mut Tape, loss: NodeId, inputs: &Inputs) -> bool {
    tape.forward_to(store, inputs, loss).unwrap();
    tape.relu_margin(store).is_none_or(|m| m > KINK_MARGIN)
}

/// Gradient check of one primitive op: parameters with the given shapes feed
/// `build`, whose output is reduced against a random weighting.
fn op_case(shapes: &[&[usize]], shift: f64, inputs: Inputs, seed: u64, build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) -> f64 {
    for attempt in 0..64 {
        let mut r = rng(seed * 1000 + attempt);
        let mut store = ParamStore::new();
        for (i, s) in shapes.iter().enumerate() {
            store.add(format!("p{i}"), GroupTag::Backbone, randn(&mut r, s, 1.0, shift)).unwrap();
        }
        let mut probe = Tape::new();
        let nodes: Vec<NodeId> = (0..shapes.len()).map(|i| probe.param(ParamId(i))).collect();
        let out = build(&mut probe, &nodes);
        let shape = probe.forward_to(&store, &inputs, out).unwrap().shape().to_vec();

        let mut tape = Tape::new();
        let nodes: Vec<NodeId> = (0..shapes.len()).map(|i| tape.param(ParamId(i))).collect();
        let out = build(&mut tape, &nodes);
        let loss = if shape.is_empty() || shape == [1] {
            out
        } else {
            let w = tape.constant(randn(&mut r, &shape, 1.0, 0.0));
            let prod = tape.mul(out, w);
            tape.sum(prod)
        };
        if !relu_clear(&store, &mut tape, loss, &inputs) {
            continue;
        }
        return check_all_params(&mut store, &mut tape, loss, &inputs);
    }
    panic!("no kink-free sample found");
}

fn op_cases() -> Vec<(String, f64)> {
    let none = Inputs::new;
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64| out.push((format!("op/{name}"), err));
    push("matmul", op_case(&[&[3, 4], &[4, 2]], 0.0, none(), 1, |t, p| t.matmul(p[0], p[1])));
    push("matmul_bt", op_case(&[&[3, 4], &[5, 4]], 0.0, none(), 2, |t, p| t.matmul_bt(p[0], p[1])));
    push("add/same", op_case(&[&[3, 4], &[3, 4]], 0.0, none(), 3, |t, p| t.add(p[0], p[1])));
    push("add/row", op_case(&[&[3, 4], &[4]], 0.0, none(), 4, |t, p| t.add(p[0], p[1])));
    push("add/column", op_case(&[&[3, 4], &[3, 1]], 0.0, none(), 5, |t, p| t.add(p[0], p[1])));
    push("mul/same", op_case(&[&[3, 4], &[3, 4]], 0.0, none(), 6, |t, p| t.mul(p[0], p[1])));
    push("mul/row", op_case(&[&[3, 4], &[4]], 0.0, none(), 7, |t, p| t.mul(p[0], p[1])));
    push("mul/shared", op_case(&[&[3, 4]], 0.0, none(), 8, |t, p| t.mul(p[0], p[0])));
    push("scale", op_case(&[&[2, 3]], 0.0, none(), 9, |t, p| t.scale(p[0], -1.7)));
    push("relu", op_case(&[&[4, 5]], 0.1, none(), 10, |t, p| t.relu(p[0])));
    push("sigmoid", op_case(&[&[4, 5]], 0.0, none(), 11, |t, p| t.sigmoid(p[0])));
    push("softmax", op_case(&[&[3, 5]], 0.0, none(), 12, |t, p| t.softmax(p[0])));
    push("concat", op_case(&[&[3, 2], &[3, 4], &[3, 1]], 0.0, none(), 13, |t, p| t.concat(p)));
    push("sum", op_case(&[&[3, 4]], 0.0, none(), 14, |t, p| {
        let sq = t.mul(p[0], p[0]);
        t.sum(sq)
    }));
    push("mean", op_case(&[&[3, 4]], 0.0, none(), 15, |t, p| {
        let sq = t.mul(p[0], p[0]);
        t.mean(sq)
    }));
    push("sum_last", op_case(&[&[3, 4]], 0.0, none(), 16, |t, p| t.sum_last(p[0])));
    let ids = || Inputs::new().ids("ids", vec![2, 0, 2, 4, 1]);
    push("gather", op_case(&[&[5, 3]], 0.0, ids(), 17, |t, p| t.gather(p[0], "ids")));
    push("weighted_sum", op_case(&[&[4, 3], &[4, 2], &[4, 2], &[4, 2]], 0.0, none(), 18, |t, p| {
        let w = t.softmax(p[0]);
        t.weighted_sum(w, &p[1..])
    }));
    let labels = || Inputs::new().tensor("y", Tensor::new(vec![4, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    push("bce", op_case(&[&[4, 1]], 0.0, labels(), 19, |t, p| {
        let prob = t.sigmoid(p[0]);
        let y = t.input("y");
        t.bce(prob, y)
    }));
    out
}

fn layer_case(plan: AdapterPlan, routing: Routing, activation: Activation, seed: u64) -> f64 {
    let (d_in, d_out, batch, n_domains) = (4, 3, 5, 2);
    for attempt in 0..64 {
        let mut r = rng(seed * 1000 + attempt);
        let mut store = ParamStore::new();
        let x = store.add("x", GroupTag::Backbone, randn(&mut r, &[batch, d_in], 1.0, 0.0)).unwrap();
        let w = randn(&mut r, &[d_out, d_in], 1.0, 0.0);
        let b = randn(&mut r, &[d_out], 1.0, 0.1);
        let layer = AdaptedDense::register(&mut store, "l", 0, w, b, activation, plan, 2.0, seed).unwrap();
        // Move every adapter and gate off its initial value so each gradient path is live.
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            if !store.get(id).tag.is_backbone() {
                let shape = store.value(id).shape().to_vec();
                *store.value_mut(id) = randn(&mut r, &shape, 0.5, 0.0);
            }
        }
        let domains: Vec<usize> = (0..batch).map(|i| i % n_domains).collect();
        let inputs = Inputs::new().ids("domain", domains);
        let mut tape = Tape::new();
        let xn = tape.param(x);
        let out = layer.record(&mut tape, xn, routing, &RouteInputs::default()).unwrap();
        let weights = tape.constant(randn(&mut r, &[batch, d_out], 1.0, 0.0));
        let prod = tape.mul(out, weights);
        let loss = tape.sum(prod);
        if !relu_clear(&store, &mut tape, loss, &inputs) {
            continue;
        }
        return check_all_params(&mut store, &mut tape, loss, &inputs);
    }
    panic!("no kink-free sample found");
}

fn layer_cases() -> Vec<(String, f64)> {
    let mixture = |input_gating, gate_includes_backbone, clamp_one_hot, experts_per_domain| AdapterPlan::Mixture {
        n_domains: 2,
        experts_per_domain,
        rank: 2,
        input_gating,
        gate_includes_backbone,
        clamp_one_hot,
    };
    let per_domain = AdapterPlan::PerDomain { n_domains: 2, rank: 2 };
    let mut out = Vec::new();
    for (name, act) in [("relu", Activation::Relu), ("sigmoid", Activation::Sigmoid), ("identity", Activation::Identity)] {
        out.push((format!("layer/dense/{name}"), layer_case(AdapterPlan::None, Routing::Backbone, act, 30)));
    }
    out.push(("layer/lora/expert".into(), layer_case(per_domain, Routing::Expert { domain: 1, replica: 0 }, Activation::Identity, 31)));
    out.push(("layer/mlora".into(), layer_case(per_domain, Routing::Mixture, Activation::Relu, 32)));
    out.push(("layer/moe".into(), layer_case(mixture(false, false, false, 1), Routing::Mixture, Activation::Relu, 33)));
    out.push(("layer/moe/replicas".into(), layer_case(mixture(false, false, false, 2), Routing::Mixture, Activation::Sigmoid, 34)));
    out.push(("layer/moe/input_gating".into(), layer_case(mixture(true, false, false, 1), Routing::Mixture, Activation::Relu, 35)));
    out.push(("layer/moe/backbone_in_gate".into(), layer_case(mixture(false, true, false, 1), Routing::Mixture, Activation::Identity, 36)));
    out.push(("layer/moe/clamped".into(), layer_case(mixture(false, false, true, 1), Routing::Mixture, Activation::Relu, 37)));
    out
}

/// Sets every parameter to a random value so that all paths carry gradient.
pub fn randomize(model: &mut CtrModel, r: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = model.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = model.params.value(id).shape().to_vec();
        *model.params.value_mut(id) = randn(r, &shape, 0.5, 0.05);
    }
}

/// Full-model BCE gradient check on a 4-example batch.
pub fn model_grad_error(config: &ModelConfig, routing: Routing, seed: u64) -> f64 {
    let schema = tiny_schema(2);
    let rows = random_rows(&schema, 4, seed);
    let inputs = Batch::from_rows(&rows, schema.n_fields()).inputs(&schema).unwrap();
    for attempt in 0..64 {
        let mut model = build_model(&schema, config, seed).unwrap();
        model.params.set_trainable(|_| true);
        randomize(&mut model, &mut rng(seed * 1000 + attempt));
        let mut g = model.graph(routing).unwrap();
        if !relu_clear(&model.params, &mut g.tape, g.loss, &inputs) {
            continue;
        }
        return check_all_params(&mut model.params, &mut g.tape, g.loss, &inputs);
    }
    panic!("no kink-free sample found");
}

fn model_cases() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (i, arch) in Arch::ALL.iter().copied().enumerate() {
        for (j, mode) in Mode::ALL.iter().copied().enumerate() {
            let seed = 50 + (i * 3 + j) as u64;
            let cfg = model_config(arch, mode);
            out.push((format!("model/{arch}/{mode}"), model_grad_error(&cfg, Routing::Mixture, seed)));
            if mode != Mode::Plain {
                let phase2 = Routing::Expert { domain: 1, replica: 0 };
                out.push((format!("model/{arch}/{mode}/expert"), model_grad_error(&cfg, phase2, seed)));
            }
        }
        let rich = ModelConfig {
            domain_as_feature: true,
            adapter: AdapterConfig { experts_per_domain: 2, input_gating: true, ..AdapterConfig::default() },
            ..model_config(arch, Mode::Moe)
        };
        out.push((format!("model/{arch}/moe/rich"), model_grad_error(&rich, Routing::Mixture, 70 + i as u64)));
    }
    out
}

/// Every primitive op, adapted layer variant, and backbone-mode pair, with
/// the largest relative gradient error of each.
pub fn grad_suite() -> Vec<(String, f64)> {
    let mut all = op_cases();
    all.extend(layer_cases());
    all.extend(model_cases());
    all
}

pub fn small_spec(n_domains: usize, divergence: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_domains,
        users: 60,
        items: 80,
        interactions_per_domain: Interactions::Uniform(400),
        divergence,
        latent_dim: 2,
        noise: 0.1,
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn quick_train(seed: u64) -> TrainConfig {
    TrainConfig { lr: 1e-2, expert_lr: Some(1e-2), gate_lr: 5e-2, batch_size: 64, epochs: [2, 2, 2], seed, ..TrainConfig::default() }
}

pub fn with_dim(ds: Dataset, dim: usize) -> Dataset {
    let mut schema = ds.schema().clone();
    schema.embedding_dim = dim;
    ds.with_schema(schema).unwrap()
}
