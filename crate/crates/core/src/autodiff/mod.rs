//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod tape;
mod tensor;

pub use tape::{Gradients, Inputs, NodeId, Op, Tape, PROB_CLAMP};
pub use tensor::{sigmoid, Tensor};

pub(crate) use tape::bce_value;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}{}: {detail}", node.map(|n| format!(" (node {n})")).unwrap_or_default())]
    Shape { node: Option<usize>, op: &'static str, detail: String },
    #[error("input `{name}` is not bound")]
    Unbound { name: String },
    #[error("index {index} out of range for table with {rows} rows{}", node.map(|n| format!(" (node {n})")).unwrap_or_default())]
    IndexOutOfRange { node: Option<usize>, index: usize, rows: usize },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("node {node} has not been evaluated")]
    NotEvaluated { node: usize },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("label {value} is not 0 or 1")]
    InvalidLabel { value: f64 },
    #[error("tape is empty")]
    Empty,
    #[error("{0}")]
    InvalidArgument(String),
}

impl AutodiffError {
    /// Attaches the offending node id to shape and index errors.
    pub(crate) fn at(self, node_id: usize) -> Self {
        match self {
            AutodiffError::Shape { node: None, op, detail } => AutodiffError::Shape { node: Some(node_id), op, detail },
            AutodiffError::IndexOutOfRange { node: None, index, rows } => {
                AutodiffError::IndexOutOfRange { node: Some(node_id), index, rows }
            }
            other => other,
        }
    }
}

/// Compares an analytic gradient against central finite differences.
///
/// `f` returns the scalar value and its analytic gradient at the given point.
/// The result is the largest `|analytic - numeric| / max(1, |numeric|)` over
/// all coordinates of `theta`.
pub fn grad_check<F>(mut f: F, theta: &Tensor, eps: f64) -> Result<f64, AutodiffError>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor), AutodiffError>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(AutodiffError::InvalidArgument(format!("eps {eps} outside [1e-6, 1e-4]")));
    }
    let (value, analytic) = f(theta)?;
    if !value.is_finite() {
        return Err(AutodiffError::NonFinite { what: "objective at theta".into() });
    }
    if analytic.shape() != theta.shape() {
        return Err(AutodiffError::Shape {
            node: None,
            op: "grad_check",
            detail: format!("gradient {:?} vs parameters {:?}", analytic.shape(), theta.shape()),
        });
    }
    let mut probe = theta.clone();
    let mut worst: f64 = 0.0;
    for i in 0..theta.numel() {
        let orig = theta.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(AutodiffError::NonFinite { what: format!("objective near coordinate {i}") });
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{GroupTag, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn store_with(values: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, v) in values {
            s.add(*name, GroupTag::Backbone, v.clone()).unwrap();
        }
        s
    }

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize], shift: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) + shift).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn forward_examples() {
        let mut s = store_with(&[("a", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())]);
        let mut tape = Tape::new();
        let a = tape.param(crate::params::ParamId(0));
        let x = tape.input("x");
        tape.matmul(a, x);
        let out = tape.forward(&s, &Inputs::new().tensor("x", Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap())).unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);

        let mut tape = Tape::new();
        let x = tape.input("x");
        tape.sigmoid(x);
        let out = tape.forward(&s, &Inputs::new().tensor("x", Tensor::scalar(0.0))).unwrap();
        assert_eq!(out.item(), 0.5);

        s.set_trainable(|_| false);
        let mut tape = Tape::new();
        let x = tape.input("x");
        tape.softmax(x);
        let out = tape.forward(&s, &Inputs::new().tensor("x", Tensor::vector(vec![0.0; 3]))).unwrap();
        assert!(out.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn unbound_input_named() {
        let s = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input("features");
        tape.relu(x);
        let err = tape.forward(&s, &Inputs::new()).unwrap_err();
        assert_eq!(err, AutodiffError::Unbound { name: "features".into() });
    }

    #[test]
    fn shape_mismatch_reports_node() {
        let s = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input("x");
        let y = tape.input("y");
        let bad = tape.matmul(x, y);
        let err = tape
            .forward(&s, &Inputs::new().tensor("x", Tensor::zeros(&[2, 3])).tensor("y", Tensor::zeros(&[2, 3])))
            .unwrap_err();
        assert!(matches!(err, AutodiffError::Shape { node: Some(n), op: "matmul", .. } if n == bad.index()));
    }

    #[test]
    fn backward_examples() {
        // d/dx sigmoid(x) at 0
        let s = store_with(&[("x", Tensor::scalar(0.0))]);
        let mut tape = Tape::new();
        let x = tape.param(crate::params::ParamId(0));
        let y = tape.sigmoid(x);
        tape.forward(&s, &Inputs::new()).unwrap();
        let g = tape.backward(&s, y).unwrap();
        assert_eq!(g.named(&s)["x"].item(), 0.25);

        // d/dW (W·x) with x = [1, 2]
        let s = store_with(&[("w", Tensor::from_rows(&[vec![0.3, -0.7]]).unwrap())]);
        let mut tape = Tape::new();
        let w = tape.param(crate::params::ParamId(0));
        let x = tape.input("x");
        let out = tape.matmul_bt(x, w);
        tape.forward(&s, &Inputs::new().tensor("x", Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap())).unwrap();
        let g = tape.backward(&s, out).unwrap();
        assert_eq!(g.named(&s)["w"].data(), &[1.0, 2.0]);

        // gradient of sum(relu(x)) at [-1, 2]
        let s = store_with(&[("x", Tensor::vector(vec![-1.0, 2.0]))]);
        let mut tape = Tape::new();
        let x = tape.param(crate::params::ParamId(0));
        let r = tape.relu(x);
        let total = tape.sum(r);
        tape.forward(&s, &Inputs::new()).unwrap();
        let g = tape.backward(&s, total).unwrap();
        assert_eq!(g.named(&s)["x"].data(), &[0.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let s = store_with(&[("x", Tensor::vector(vec![1.0, 2.0]))]);
        let mut tape = Tape::new();
        let x = tape.param(crate::params::ParamId(0));
        let r = tape.relu(x);
        tape.forward(&s, &Inputs::new()).unwrap();
        assert!(matches!(tape.backward(&s, r), Err(AutodiffError::NonScalarLoss { .. })));
    }

    #[test]
    fn shared_parameter_accumulates() {
        // f = sum(x ⊙ x) → 2x
        let s = store_with(&[("x", Tensor::vector(vec![1.5, -2.0]))]);
        let mut tape = Tape::new();
        let x = tape.param(crate::params::ParamId(0));
        let sq = tape.mul(x, x);
        let total = tape.sum(sq);
        tape.forward(&s, &Inputs::new()).unwrap();
        let g = tape.backward(&s, total).unwrap();
        assert_eq!(g.named(&s)["x"].data(), &[3.0, -4.0]);
    }

    #[test]
    fn quadratic_grad_check() {
        let err = grad_check(|t| Ok((t.item() * t.item(), Tensor::scalar(2.0 * t.item()))), &Tensor::scalar(3.0), 1e-5)
            .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_rejects_bad_inputs() {
        let f = |t: &Tensor| Ok((t.item(), Tensor::scalar(1.0)));
        assert!(grad_check(f, &Tensor::scalar(1.0), 1e-2).is_err());
        let g = |_: &Tensor| Ok((f64::NAN, Tensor::scalar(1.0)));
        assert!(matches!(grad_check(g, &Tensor::scalar(1.0), 1e-5), Err(AutodiffError::NonFinite { .. })));
    }

    /// Builds `loss = bce(sigmoid(relu?(x·W1ᵀ + b1)·W2ᵀ + b2), y)` and checks every
    /// parameter tensor against central differences.
    fn mlp_check(hidden_relu: bool, seed: u64, shift: f64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = [
            ("w1", randn(&mut rng, &[5, 3], shift)),
            ("b1", randn(&mut rng, &[5], shift)),
            ("w2", randn(&mut rng, &[1, 5], shift)),
            ("b2", randn(&mut rng, &[1], shift)),
        ];
        let x = randn(&mut rng, &[6, 3], 0.0);
        let y = Tensor::new(vec![6, 1], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let store = store_with(&params.iter().map(|(n, t)| (*n, t.clone())).collect::<Vec<_>>());
        let mut tape = Tape::new();
        let ids: Vec<_> = (0..4).map(|i| tape.param(crate::params::ParamId(i))).collect();
        let xi = tape.input("x");
        let yi = tape.input("y");
        let h = tape.matmul_bt(xi, ids[0]);
        let h = tape.add(h, ids[1]);
        let h = if hidden_relu { tape.relu(h) } else { tape.sigmoid(h) };
        let o = tape.matmul_bt(h, ids[2]);
        let o = tape.add(o, ids[3]);
        let p = tape.sigmoid(o);
        let loss = tape.bce(p, yi);
        let inputs = Inputs::new().tensor("x", x).tensor("y", y);

        let mut worst: f64 = 0.0;
        for target in 0..4 {
            let theta = store.value(crate::params::ParamId(target)).clone();
            let mut local = store.clone();
            let mut tape = tape.clone();
            let err = grad_check(
                |t| {
                    *local.value_mut(crate::params::ParamId(target)) = t.clone();
                    let v = tape.forward(&local, &inputs)?.item();
                    let g = tape.backward(&local, loss)?;
                    Ok((v, g.get(crate::params::ParamId(target)).unwrap().clone()))
                },
                &theta,
                1e-6,
            )
            .unwrap();
            if hidden_relu {
                let margin = tape.relu_margin(&local).unwrap();
                assert!(margin > 1e-4, "relu input too close to kink: {margin}");
            }
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn sigmoid_mlp_bce_grad_check() {
        let err = mlp_check(false, 7, 0.0);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn relu_mlp_grad_check_shifted() {
        let err = mlp_check(true, 11, 0.1);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn backward_linear_in_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = store_with(&[("w", randn(&mut rng, &[4, 3], 0.0)), ("t", randn(&mut rng, &[7, 3], 0.0))]);
        let mut tape = Tape::new();
        let w = tape.param(crate::params::ParamId(0));
        let t = tape.param(crate::params::ParamId(1));
        let g = tape.gather(t, "ids");
        let h = tape.matmul_bt(g, w);
        let h = tape.softmax(h);
        let total = tape.mean(h);
        let inputs = Inputs::new().ids("ids", vec![0, 3, 3, 6, 1]);
        tape.forward(&s, &inputs).unwrap();
        let g1 = tape.backward_scaled(&s, total, 1.7).unwrap();
        let g2 = tape.backward_scaled(&s, total, 3.4).unwrap();
        for (id, a) in g1.iter() {
            let b = g2.get(id).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(2.0 * x, *y);
            }
        }
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut s = store_with(&[("a", Tensor::vector(vec![1.0, 2.0])), ("b", Tensor::vector(vec![3.0, 4.0]))]);
        s.set_trainable(|_| false);
        let mut tape = Tape::new();
        let a = tape.param(crate::params::ParamId(0));
        let b = tape.param(crate::params::ParamId(1));
        let p = tape.mul(a, b);
        let total = tape.sum(p);
        tape.forward(&s, &Inputs::new()).unwrap();
        assert!(tape.backward(&s, total).unwrap().is_empty());
    }

    #[test]
    fn gather_index_out_of_range() {
        let s = store_with(&[("t", Tensor::zeros(&[3, 2]))]);
        let mut tape = Tape::new();
        let t = tape.param(crate::params::ParamId(0));
        tape.gather(t, "ids");
        let err = tape.forward(&s, &Inputs::new().ids("ids", vec![0, 3])).unwrap_err();
        assert!(matches!(err, AutodiffError::IndexOutOfRange { index: 3, rows: 3, node: Some(1) }));
    }

    #[test]
    fn bce_rejects_non_binary_label() {
        let s = ParamStore::new();
        let mut tape = Tape::new();
        let p = tape.input("p");
        let y = tape.input("y");
        tape.bce(p, y);
        let inputs = Inputs::new().tensor("p", Tensor::vector(vec![0.5])).tensor("y", Tensor::vector(vec![2.0]));
        assert!(matches!(tape.forward(&s, &inputs), Err(AutodiffError::InvalidLabel { .. })));
    }
}
