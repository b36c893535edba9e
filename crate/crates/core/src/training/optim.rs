use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_value, Gradients, Tensor};
use crate::params::ParamStore;
use crate::{Error, Result};

/// `−mean[y·ln p + (1−y)·ln(1−p)]` with `p` clamped to `[1e−7, 1−1e−7]`.
pub fn bce_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::Invalid(format!("bce needs equal non-empty lengths, got {} and {}", p.len(), y.len())));
    }
    Ok(bce_value(p, y)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter plus the shared step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam step with bias correction over every trainable parameter.
///
/// Trainable parameters without a gradient are treated as having a zero
/// gradient. Frozen parameters are never touched. Gradients are checked for
/// finiteness before anything moves.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    for (id, g) in grads.iter() {
        if params.is_trainable(id) && !g.is_finite() {
            return Err(Error::NonFinite { what: format!("gradient of {}", params.get(id).name) });
        }
    }
    state.step += 1;
    let n = params.len();
    state.m.resize(n, None);
    state.v.resize(n, None);
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    let ids: Vec<_> = params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let shape = params.value(id).shape().to_vec();
        let m = state.m[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
        let v = state.v[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
        let g = grads.get(id);
        let value = params.value_mut(id);
        for i in 0..value.numel() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            let mi = hyper.beta1 * m.data()[i] + (1.0 - hyper.beta1) * gi;
            let vi = hyper.beta2 * v.data()[i] + (1.0 - hyper.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            value.data_mut()[i] -= hyper.lr * (mi / c1) / ((vi / c2).sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Inputs, Tape};
    use crate::params::GroupTag;

    #[test]
    fn bce_examples() {
        assert!((bce_loss(&[0.5], &[1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_loss(&[0.5, 0.5], &[0.0, 1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let perfect = bce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(perfect > 0.0 && perfect < 2e-7);
        assert!(bce_loss(&[0.5], &[2.0]).is_err());
    }

    fn scalar_store(frozen: bool) -> (ParamStore, Tape, crate::autodiff::NodeId) {
        let mut s = ParamStore::new();
        let id = s.add("w", GroupTag::Backbone, Tensor::vector(vec![1.0])).unwrap();
        if frozen {
            s.set_trainable(|_| false);
        }
        let mut tape = Tape::new();
        let w = tape.param(id);
        let loss = tape.scale(w, 3.0);
        let loss = tape.sum(loss);
        (s, tape, loss)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, mut tape, loss) = scalar_store(false);
        tape.forward(&s, &Inputs::new()).unwrap();
        let g = tape.backward(&s, loss).unwrap();
        let mut st = AdamState::new();
        adam_step(&mut s, &g, &mut st, &AdamHyper::default()).unwrap();
        let moved = 1.0 - s.value(crate::params::ParamId(0)).data()[0];
        assert!((moved - 1e-3).abs() < 1e-10);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn frozen_and_zero_gradients_do_not_move() {
        let (mut s, mut tape, loss) = scalar_store(true);
        tape.forward(&s, &Inputs::new()).unwrap();
        let g = tape.backward(&s, loss).unwrap();
        let mut st = AdamState::new();
        adam_step(&mut s, &g, &mut st, &AdamHyper::default()).unwrap();
        assert_eq!(s.value(crate::params::ParamId(0)).data(), &[1.0]);

        let (mut s, _, _) = scalar_store(false);
        adam_step(&mut s, &Gradients::default(), &mut st, &AdamHyper::default()).unwrap();
        assert_eq!(s.value(crate::params::ParamId(0)).data(), &[1.0]);
        assert_eq!(st.step, 2);
    }
}
