mod common;

use common::{randn, rng};
use moelora::autodiff::{Inputs, Tape, Tensor};
use moelora::layers::{
    dense_forward, gate_weights, lora_delta, mlora_forward, moe_forward, Activation, AdaptedDense, AdapterPlan,
    DenseLayer, GateNet, LoraAdapter, MoeLayer, RouteInputs, Routing,
};
use moelora::params::{GroupTag, ParamId, ParamStore};
use proptest::prelude::*;

fn t(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn dense_examples() {
    let id = DenseLayer::new(Tensor::identity(2), Tensor::zeros(&[2]), Activation::Identity).unwrap();
    assert_eq!(dense_forward(&t(&[vec![1.0, 2.0]]), &id).unwrap().data(), &[1.0, 2.0]);
    let sum = DenseLayer::new(t(&[vec![1.0, 1.0]]), Tensor::vector(vec![1.0]), Activation::Identity).unwrap();
    assert_eq!(dense_forward(&t(&[vec![2.0, 3.0]]), &sum).unwrap().data(), &[6.0]);
    let relu = DenseLayer::new(Tensor::identity(2), Tensor::zeros(&[2]), Activation::Relu).unwrap();
    assert_eq!(dense_forward(&t(&[vec![-5.0, 5.0]]), &relu).unwrap().data(), &[0.0, 5.0]);
    assert!(dense_forward(&t(&[vec![1.0, 2.0, 3.0]]), &relu).is_err());
}

#[test]
fn lora_examples() {
    let fresh = LoraAdapter::init(3, 2, 2, 4.0, &mut rng(1)).unwrap();
    let x = randn(&mut rng(2), &[5, 3], 1.0, 0.0);
    assert!(lora_delta(&x, &fresh).unwrap().data().iter().all(|&v| v == 0.0));

    let a = t(&[vec![1.0, 0.0]]);
    let b = t(&[vec![1.0], vec![1.0]]);
    let ad = LoraAdapter::new(a.clone(), b.clone(), 1.0).unwrap();
    assert_eq!(lora_delta(&t(&[vec![1.0, 2.0]]), &ad).unwrap().data(), &[1.0, 1.0]);

    let x = randn(&mut rng(3), &[4, 2], 1.0, 0.0);
    let single = LoraAdapter::new(a.clone(), b.clone(), 0.7).unwrap();
    let double = LoraAdapter::new(a, b, 1.4).unwrap();
    let d1 = lora_delta(&x, &single).unwrap();
    let d2 = lora_delta(&x, &double).unwrap();
    for (u, v) in d1.data().iter().zip(d2.data()) {
        assert_eq!(2.0 * u, *v);
    }
    assert!(LoraAdapter::new(Tensor::zeros(&[3, 2]), Tensor::zeros(&[2, 3]), 1.0).is_err());
}

fn base(d_in: usize, d_out: usize, seed: u64) -> DenseLayer {
    let mut r = rng(seed);
    DenseLayer::new(randn(&mut r, &[d_out, d_in], 1.0, 0.0), randn(&mut r, &[d_out], 1.0, 0.0), Activation::Relu).unwrap()
}

fn trained_adapter(d_in: usize, d_out: usize, rank: usize, seed: u64) -> LoraAdapter {
    let mut r = rng(seed);
    LoraAdapter::new(randn(&mut r, &[rank, d_in], 1.0, 0.0), randn(&mut r, &[d_out, rank], 1.0, 0.0), 2.0).unwrap()
}

#[test]
fn mlora_examples() {
    let layer = base(3, 2, 5);
    let x = randn(&mut rng(6), &[4, 3], 1.0, 0.0);
    let fresh: Vec<_> = (0..3).map(|d| LoraAdapter::init(3, 2, 2, 4.0, &mut rng(d)).unwrap()).collect();
    assert_eq!(mlora_forward(&x, 1, &layer, &fresh).unwrap(), dense_forward(&x, &layer).unwrap());

    let mut adapters: Vec<_> = (0..3).map(|d| trained_adapter(3, 2, 2, 10 + d)).collect();
    let before = mlora_forward(&x, 0, &layer, &adapters).unwrap();
    adapters[2] = trained_adapter(3, 2, 2, 99);
    assert_eq!(mlora_forward(&x, 0, &layer, &adapters).unwrap(), before);
    assert!(mlora_forward(&x, 3, &layer, &adapters).is_err());

    let ident = DenseLayer::new(Tensor::identity(2), Tensor::zeros(&[2]), Activation::Identity).unwrap();
    let ad = LoraAdapter::new(t(&[vec![1.0, 0.0]]), t(&[vec![1.0], vec![1.0]]), 1.0).unwrap();
    let other = LoraAdapter::init(2, 2, 1, 1.0, &mut rng(0)).unwrap();
    assert_eq!(mlora_forward(&t(&[vec![1.0, 2.0]]), 0, &ident, &[ad, other]).unwrap().data(), &[2.0, 3.0]);
}

#[test]
fn gate_examples() {
    let x = Tensor::zeros(&[2, 3]);
    let uniform = gate_weights(1, &x, &GateNet::uniform(2, 4)).unwrap();
    assert!(uniform.data().iter().all(|&w| (w - 0.25).abs() < 1e-15));

    let sharp = GateNet { logits: t(&[vec![10.0, 0.0]]), projection: None, clamp: None };
    let w = sharp.domain_weights(0).unwrap();
    assert!((w[0] - 0.9999546021312976).abs() < 1e-12 && (w[1] - 4.5397868702434395e-5).abs() < 1e-12);

    let shifted = GateNet { logits: t(&[vec![13.5, 3.5]]), projection: None, clamp: None };
    let w2 = shifted.domain_weights(0).unwrap();
    assert!((w[0] - w2[0]).abs() < 1e-15 && (w[1] - w2[1]).abs() < 1e-15);
}

#[test]
fn moe_examples() {
    let ident = DenseLayer::new(Tensor::identity(2), Tensor::zeros(&[2]), Activation::Identity).unwrap();
    let unit = |col: usize| {
        let b = if col == 0 { t(&[vec![1.0], vec![0.0]]) } else { t(&[vec![0.0], vec![1.0]]) };
        LoraAdapter::new(t(&[vec![1.0, 0.0]]), b, 1.0).unwrap()
    };
    let layer = MoeLayer::new(ident.clone(), vec![unit(0), unit(1)], 1, GateNet::uniform(2, 2), false).unwrap();
    let x = t(&[vec![1.0, 0.0]]);
    assert_eq!(moe_forward(&x, 0, &layer).unwrap().data(), &[1.5, 0.5]);
    assert!(moe_forward(&x, 2, &layer).is_err());

    let fresh: Vec<_> = (0..4).map(|d| LoraAdapter::init(3, 2, 2, 4.0, &mut rng(d)).unwrap()).collect();
    let b = base(3, 2, 4);
    let mut gate = GateNet::uniform(2, 4);
    gate.logits = randn(&mut rng(8), &[2, 4], 3.0, 0.0);
    let moe = MoeLayer::new(b.clone(), fresh, 2, gate, false).unwrap();
    let x = randn(&mut rng(9), &[5, 3], 1.0, 0.0);
    assert_eq!(moe_forward(&x, 1, &moe).unwrap(), dense_forward(&x, &b).unwrap());
}

#[test]
fn moe_param_count_by_enumeration() {
    let (d_in, d_out, rank) = (5, 3, 2);
    let experts: Vec<_> = (0..6).map(|s| trained_adapter(d_in, d_out, rank, s)).collect();
    let mut gate = GateNet::uniform(3, 6);
    gate.projection = Some(Tensor::zeros(&[6, d_in]));
    let layer = MoeLayer::new(base(d_in, d_out, 0), experts, 2, gate, false).unwrap();
    let expected = (d_out * d_in + d_out) + 6 * rank * (d_in + d_out) + (3 * 6 + 6 * d_in);
    assert_eq!(layer.param_count(), expected);
}

fn record(layer: &AdaptedDense, store: &ParamStore, x: &Tensor, domain: usize, routing: Routing) -> Tensor {
    let mut s = store.clone();
    let xid = s.add("__x", GroupTag::Backbone, x.clone()).unwrap();
    let mut tape = Tape::new();
    let xn = tape.param(xid);
    layer.record(&mut tape, xn, routing, &RouteInputs::default()).unwrap();
    tape.forward(&s, &Inputs::new().ids("domain", vec![domain; x.leading()])).unwrap()
}

fn randomize_non_backbone(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| !p.tag.is_backbone()).map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = randn(&mut r, &shape, 1.0, 0.0);
    }
}

fn registered(plan: AdapterPlan, seed: u64) -> (AdaptedDense, ParamStore) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let layer = AdaptedDense::register(
        &mut store,
        "l",
        0,
        randn(&mut r, &[4, 6], 1.0, 0.0),
        randn(&mut r, &[4], 1.0, 0.0),
        Activation::Relu,
        plan,
        4.0,
        seed,
    )
    .unwrap();
    (layer, store)
}

fn mixture(input_gating: bool, gate_includes_backbone: bool, clamp_one_hot: bool, experts_per_domain: usize) -> AdapterPlan {
    AdapterPlan::Mixture { n_domains: 3, experts_per_domain, rank: 2, input_gating, gate_includes_backbone, clamp_one_hot }
}

#[test]
fn taped_layer_matches_eager_layer_bitwise() {
    for (i, plan) in [
        mixture(false, false, false, 1),
        mixture(true, false, false, 2),
        mixture(false, true, false, 1),
        mixture(false, false, true, 1),
    ]
    .into_iter()
    .enumerate()
    {
        let (layer, mut store) = registered(plan, i as u64);
        randomize_non_backbone(&mut store, 100 + i as u64);
        let eager = layer.moe_layer(&store).unwrap();
        let x = randn(&mut rng(200 + i as u64), &[7, 6], 1.0, 0.0);
        for d in 0..3 {
            assert_eq!(record(&layer, &store, &x, d, Routing::Mixture), eager.forward(&x, d).unwrap(), "plan {i} domain {d}");
        }
    }
}

#[test]
fn clamped_moe_equals_mlora_bitwise() {
    let (layer, mut store) = registered(mixture(false, false, true, 1), 3);
    randomize_non_backbone(&mut store, 4);
    let eager = layer.moe_layer(&store).unwrap();
    let adapters: Vec<_> = (0..3).map(|d| layer.adapter(&store, d, 0).unwrap()).collect();
    let x = randn(&mut rng(5), &[6, 6], 1.0, 0.0);
    for d in 0..3 {
        let mlora = mlora_forward(&x, d, &eager.base, &adapters).unwrap();
        assert_eq!(moe_forward(&x, d, &eager).unwrap(), mlora);
        assert_eq!(record(&layer, &store, &x, d, Routing::Mixture), mlora);
        assert_eq!(record(&layer, &store, &x, d, Routing::Expert { domain: d, replica: 0 }), mlora);
    }
}

#[test]
fn expert_routing_ignores_other_experts_and_gate() {
    let (layer, mut store) = registered(mixture(false, false, false, 2), 6);
    randomize_non_backbone(&mut store, 7);
    let x = randn(&mut rng(8), &[4, 6], 1.0, 0.0);
    let routing = Routing::Expert { domain: 1, replica: 1 };
    let before = record(&layer, &store, &x, 0, routing);
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.tag.is_gate() || (p.tag.is_expert() && !p.tag.is_expert_of(1, 1)))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let v = store.value(id).map(|v| v * 3.0 + 1.0);
        *store.value_mut(id) = v;
    }
    assert_eq!(record(&layer, &store, &x, 0, routing), before);
}

#[test]
fn gradient_isolation_to_one_expert() {
    let (layer, mut store) = registered(mixture(true, false, false, 1), 9);
    randomize_non_backbone(&mut store, 10);
    store.set_trainable(|t| t.is_expert_of(2, 0));
    let x = store.add("x", GroupTag::Backbone, randn(&mut rng(11), &[3, 6], 1.0, 0.0)).unwrap();
    store.set_trainable_id(x, false);
    let mut tape = Tape::new();
    let xn = tape.param(x);
    let out = layer.record(&mut tape, xn, Routing::Mixture, &RouteInputs::default()).unwrap();
    let loss = tape.sum(out);
    tape.forward(&store, &Inputs::new().ids("domain", vec![0, 1, 2])).unwrap();
    let grads = tape.backward(&store, loss).unwrap();
    assert!(!grads.is_empty());
    for (id, _) in grads.iter() {
        assert!(store.get(id).tag.is_expert_of(2, 0), "gradient reached {}", store.get(id).name);
    }
}

proptest! {
    #[test]
    fn gate_weights_form_a_simplex(
        logits in prop::collection::vec(-30.0f64..30.0, 12),
        proj in prop::collection::vec(-3.0f64..3.0, 8),
        x in prop::collection::vec(-3.0f64..3.0, 6),
        domain in 0usize..3,
    ) {
        let gate = GateNet {
            logits: Tensor::new(vec![3, 4], logits).unwrap(),
            projection: Some(Tensor::new(vec![4, 2], proj).unwrap()),
            clamp: None,
        };
        let w = gate.weights(domain, &Tensor::new(vec![3, 2], x).unwrap()).unwrap();
        for row in w.data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_shift_invariance(logits in prop::collection::vec(-20.0f64..20.0, 5), c in -50.0f64..50.0) {
        let a = GateNet { logits: Tensor::new(vec![1, 5], logits.clone()).unwrap(), projection: None, clamp: None };
        let b = GateNet { logits: Tensor::new(vec![1, 5], logits.iter().map(|v| v + c).collect()).unwrap(), projection: None, clamp: None };
        for (u, v) in a.domain_weights(0).unwrap().iter().zip(b.domain_weights(0).unwrap()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }
}
