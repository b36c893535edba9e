use std::collections::HashMap;

use super::tensor::{broadcast_kind, Broadcast};
use super::{AutodiffError, Tensor};
use crate::params::{ParamId, ParamStore};

/// Probabilities entering the BCE node are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Input(String),
    Param(ParamId),
    Const(Tensor),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`, the layout used by dense layers storing `W` as `d_out × d_in`.
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Concat(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    SumLast(NodeId),
    Gather { table: NodeId, ids: String },
    WeightedSum { weights: NodeId, terms: Vec<NodeId> },
    Bce { probs: NodeId, labels: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::Concat(_) => "concat",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumLast(_) => "sum_last",
            Op::Gather { .. } => "gather",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Bce { .. } => "bce",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => vec![],
            Op::MatMul(a, b) | Op::MatMulBt(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Relu(a) | Op::Sigmoid(a) | Op::Softmax(a) => vec![*a],
            Op::Sum(a) | Op::Mean(a) | Op::SumLast(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::WeightedSum { weights, terms } => {
                let mut v = vec![*weights];
                v.extend(terms);
                v
            }
            Op::Bce { probs, labels } => vec![*probs, *labels],
        }
    }
}

/// Named values bound to a tape for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Inputs {
    tensors: HashMap<String, Tensor>,
    ids: HashMap<String, Vec<usize>>,
}

impl Inputs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensor(mut self, name: impl Into<String>, value: Tensor) -> Self {
        self.tensors.insert(name.into(), value);
        self
    }

    pub fn ids(mut self, name: impl Into<String>, ids: Vec<usize>) -> Self {
        self.ids.insert(name.into(), ids);
        self
    }

    pub fn set_tensor(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn set_ids(&mut self, name: impl Into<String>, ids: Vec<usize>) {
        self.ids.insert(name.into(), ids);
    }
}

/// Gradients of one backward pass, indexed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gradients keyed by parameter name.
    pub fn named(&self, params: &ParamStore) -> HashMap<String, Tensor> {
        self.iter().map(|(id, g)| (params.get(id).name.clone(), g.clone())).collect()
    }
}

/// A static record of primitive ops in topological order.
///
/// The graph is recorded once and re-executed for every batch with fresh
/// [`Inputs`]; the intermediates of the last forward pass are kept for
/// [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Option<Tensor>>,
    /// Index lists bound to gather nodes in the last forward pass.
    gathered: Vec<Option<Vec<usize>>>,
    evaluated: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn op(&self, node: NodeId) -> &Op {
        &self.ops[node.0]
    }

    fn push(&mut self, op: Op) -> NodeId {
        for operand in op.operands() {
            assert!(operand.0 < self.ops.len(), "operand {} recorded after its consumer", operand.0);
        }
        self.ops.push(op);
        self.values.push(None);
        self.gathered.push(None);
        NodeId(self.ops.len() - 1)
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input(name.into()))
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.push(Op::Param(id))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn sum_last(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumLast(a))
    }

    /// Rows of `table` selected by the integer input `ids`.
    pub fn gather(&mut self, table: NodeId, ids: impl Into<String>) -> NodeId {
        self.push(Op::Gather { table, ids: ids.into() })
    }

    pub fn weighted_sum(&mut self, weights: NodeId, terms: &[NodeId]) -> NodeId {
        self.push(Op::WeightedSum { weights, terms: terms.to_vec() })
    }

    /// Mean binary cross-entropy of probabilities against `{0, 1}` labels.
    pub fn bce(&mut self, probs: NodeId, labels: NodeId) -> NodeId {
        self.push(Op::Bce { probs, labels })
    }

    fn value<'a>(&'a self, params: &'a ParamStore, node: NodeId) -> Result<&'a Tensor, AutodiffError> {
        match &self.ops[node.0] {
            Op::Param(id) => Ok(params.value(*id)),
            Op::Const(t) => Ok(t),
            _ => self.values[node.0].as_ref().ok_or(AutodiffError::NotEvaluated { node: node.0 }),
        }
    }

    /// Value of `node` from the last forward pass.
    pub fn get<'a>(&'a self, params: &'a ParamStore, node: NodeId) -> Option<&'a Tensor> {
        if node.0 >= self.evaluated {
            return None;
        }
        self.value(params, node).ok()
    }

    /// Runs every recorded op and returns the value of the last node.
    pub fn forward(&mut self, params: &ParamStore, inputs: &Inputs) -> Result<Tensor, AutodiffError> {
        let last = NodeId(self.ops.len().checked_sub(1).ok_or(AutodiffError::Empty)?);
        self.forward_to(params, inputs, last)
    }

    /// Runs the prefix of the tape up to and including `target`.
    pub fn forward_to(
        &mut self,
        params: &ParamStore,
        inputs: &Inputs,
        target: NodeId,
    ) -> Result<Tensor, AutodiffError> {
        self.evaluated = 0;
        for v in &mut self.values {
            *v = None;
        }
        for g in &mut self.gathered {
            *g = None;
        }
        for i in 0..=target.0 {
            if let Op::Gather { ids, .. } = &self.ops[i] {
                self.gathered[i] = inputs.ids.get(ids).cloned();
            }
            let out = self.eval_node(params, inputs, i).map_err(|e| e.at(i))?;
            if let Some(t) = &out {
                if !t.is_finite() {
                    return Err(AutodiffError::NonFinite { what: format!("output of node {i} ({})", self.ops[i].name()) });
                }
            }
            self.values[i] = out;
        }
        self.evaluated = target.0 + 1;
        Ok(self.value(params, target)?.clone())
    }

    fn eval_node(&self, params: &ParamStore, inputs: &Inputs, i: usize) -> Result<Option<Tensor>, AutodiffError> {
        let v = |n: NodeId| self.value(params, n);
        let out = match &self.ops[i] {
            Op::Param(_) | Op::Const(_) => return Ok(None),
            Op::Input(name) => {
                inputs.tensors.get(name).cloned().ok_or_else(|| AutodiffError::Unbound { name: name.clone() })?
            }
            Op::MatMul(a, b) => v(*a)?.matmul(v(*b)?)?,
            Op::MatMulBt(a, b) => v(*a)?.matmul_bt(v(*b)?)?,
            Op::Add(a, b) => v(*a)?.add(v(*b)?)?,
            Op::Mul(a, b) => v(*a)?.mul(v(*b)?)?,
            Op::Scale(a, c) => v(*a)?.scale(*c),
            Op::Relu(a) => v(*a)?.relu(),
            Op::Sigmoid(a) => v(*a)?.sigmoid(),
            Op::Softmax(a) => v(*a)?.softmax(),
            Op::Concat(parts) => {
                let parts = parts.iter().map(|p| v(*p)).collect::<Result<Vec<_>, _>>()?;
                Tensor::concat(&parts)?
            }
            Op::Sum(a) => Tensor::scalar(v(*a)?.sum()),
            Op::Mean(a) => {
                let t = v(*a)?;
                Tensor::scalar(t.sum() / t.numel() as f64)
            }
            Op::SumLast(a) => v(*a)?.sum_last(),
            Op::Gather { table, ids } => {
                let ids = inputs.ids.get(ids).ok_or_else(|| AutodiffError::Unbound { name: ids.clone() })?;
                v(*table)?.gather_rows(ids)?
            }
            Op::WeightedSum { weights, terms } => {
                let terms = terms.iter().map(|t| v(*t)).collect::<Result<Vec<_>, _>>()?;
                Tensor::weighted_sum(v(*weights)?, &terms)?
            }
            Op::Bce { probs, labels } => {
                let p = v(*probs)?;
                let y = v(*labels)?;
                if p.numel() != y.numel() {
                    return Err(AutodiffError::Shape {
                        node: None,
                        op: "bce",
                        detail: format!("{:?} probabilities vs {:?} labels", p.shape(), y.shape()),
                    });
                }
                Tensor::scalar(bce_value(p.data(), y.data())?)
            }
        };
        Ok(Some(out))
    }

    /// Reverse pass from a scalar node with unit upstream gradient.
    pub fn backward(&self, params: &ParamStore, loss: NodeId) -> Result<Gradients, AutodiffError> {
        self.backward_scaled(params, loss, 1.0)
    }

    /// Reverse pass with upstream gradient `seed`. Only trainable parameters
    /// receive gradients; branches that cannot reach one are skipped.
    pub fn backward_scaled(&self, params: &ParamStore, loss: NodeId, seed: f64) -> Result<Gradients, AutodiffError> {
        if loss.0 >= self.evaluated {
            return Err(AutodiffError::NotEvaluated { node: loss.0 });
        }
        let loss_value = self.value(params, loss)?;
        if loss_value.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss { shape: loss_value.shape().to_vec() });
        }

        let n = loss.0 + 1;
        let mut needs = vec![false; n];
        for i in 0..n {
            needs[i] = match &self.ops[i] {
                Op::Param(id) => params.is_trainable(*id),
                Op::Input(_) | Op::Const(_) => false,
                op => op.operands().iter().any(|o| needs[o.0]),
            };
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), seed));
        let mut out = Gradients { grads: vec![None; params.len()] };

        for i in (0..n).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let op = &self.ops[i];
            if let Op::Param(id) = op {
                accumulate(&mut out.grads[id.0], g);
                continue;
            }
            let contributions = self.vjp(params, i, &g, &needs).map_err(|e| e.at(i))?;
            for (node, grad) in contributions {
                accumulate(&mut grads[node.0], grad);
            }
        }
        Ok(out)
    }

    /// Vector-Jacobian products of node `i` for operands that need gradients.
    fn vjp(
        &self,
        params: &ParamStore,
        i: usize,
        g: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<(NodeId, Tensor)>, AutodiffError> {
        let v = |n: NodeId| self.value(params, n);
        let want = |n: &NodeId| needs[n.0];
        let y = || self.values[i].as_ref().ok_or(AutodiffError::NotEvaluated { node: i });
        let mut out = Vec::new();
        match &self.ops[i] {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => {}
            Op::MatMul(a, b) => {
                if want(a) {
                    out.push((*a, g.matmul_bt(v(*b)?)?));
                }
                if want(b) {
                    out.push((*b, v(*a)?.matmul_at(g)?));
                }
            }
            Op::MatMulBt(a, b) => {
                if want(a) {
                    out.push((*a, g.matmul(v(*b)?)?));
                }
                if want(b) {
                    out.push((*b, g.matmul_at(v(*a)?)?));
                }
            }
            Op::Add(a, b) => {
                if want(a) {
                    out.push((*a, g.clone()));
                }
                if want(b) {
                    out.push((*b, reduce_to(g, v(*a)?.shape(), v(*b)?.shape())?));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (v(*a)?, v(*b)?);
                if want(a) {
                    out.push((*a, g.mul(bv)?));
                }
                if want(b) {
                    let prod = elementwise(g, av);
                    out.push((*b, reduce_to(&prod, av.shape(), bv.shape())?));
                }
            }
            Op::Scale(a, c) => {
                if want(a) {
                    out.push((*a, g.scale(*c)));
                }
            }
            Op::Relu(a) => {
                let x = v(*a)?;
                let data = g.data().iter().zip(x.data()).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect();
                out.push((*a, Tensor::new(x.shape().to_vec(), data)?));
            }
            Op::Sigmoid(a) => {
                let y = y()?;
                let data = g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * yv * (1.0 - yv)).collect();
                out.push((*a, Tensor::new(y.shape().to_vec(), data)?));
            }
            Op::Softmax(a) => {
                let y = y()?;
                let m = y.last_dim();
                let mut data = vec![0.0; y.numel()];
                for ((dr, yr), gr) in data.chunks_mut(m).zip(y.data().chunks(m)).zip(g.data().chunks(m)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                out.push((*a, Tensor::new(y.shape().to_vec(), data)?));
            }
            Op::Concat(parts) => {
                let total = g.last_dim();
                let rows = g.leading();
                let mut offset = 0;
                for p in parts {
                    let pv = v(*p)?;
                    let m = pv.last_dim();
                    if want(p) {
                        let mut data = Vec::with_capacity(rows * m);
                        for r in 0..rows {
                            data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + m]);
                        }
                        out.push((*p, Tensor::new(pv.shape().to_vec(), data)?));
                    }
                    offset += m;
                }
            }
            Op::Sum(a) => {
                let x = v(*a)?;
                out.push((*a, Tensor::full(x.shape(), g.item())));
            }
            Op::Mean(a) => {
                let x = v(*a)?;
                out.push((*a, Tensor::full(x.shape(), g.item() / x.numel() as f64)));
            }
            Op::SumLast(a) => {
                let x = v(*a)?;
                let m = x.last_dim();
                let data = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv, m)).collect();
                out.push((*a, Tensor::new(x.shape().to_vec(), data)?));
            }
            Op::Gather { table, .. } => {
                // scatter-add back into the table
                let ids = self.gather_ids(i)?;
                let t = v(*table)?;
                let k = t.last_dim();
                let mut dt = Tensor::zeros(t.shape());
                let d = dt.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &gv) in d[id * k..(id + 1) * k].iter_mut().zip(&g.data()[r * k..(r + 1) * k]) {
                        *o += gv;
                    }
                }
                out.push((*table, dt));
            }
            Op::WeightedSum { weights, terms } => {
                let w = v(*weights)?;
                let e = w.last_dim();
                let m = g.last_dim();
                let rows = g.leading();
                if want(weights) {
                    let mut dw = vec![0.0; rows * e];
                    for (j, t) in terms.iter().enumerate() {
                        let tv = v(*t)?;
                        for r in 0..rows {
                            dw[r * e + j] = g.data()[r * m..(r + 1) * m]
                                .iter()
                                .zip(&tv.data()[r * m..(r + 1) * m])
                                .map(|(a, b)| a * b)
                                .sum();
                        }
                    }
                    out.push((*weights, Tensor::new(w.shape().to_vec(), dw)?));
                }
                for (j, t) in terms.iter().enumerate() {
                    if !want(t) {
                        continue;
                    }
                    let mut dt = vec![0.0; rows * m];
                    for r in 0..rows {
                        let wv = w.data()[r * e + j];
                        for (o, &gv) in dt[r * m..(r + 1) * m].iter_mut().zip(&g.data()[r * m..(r + 1) * m]) {
                            *o = wv * gv;
                        }
                    }
                    out.push((*t, Tensor::new(vec![rows, m], dt)?));
                }
            }
            Op::Bce { probs, labels } => {
                let p = v(*probs)?;
                let y = v(*labels)?;
                if want(probs) {
                    let n = p.numel() as f64;
                    let scale = g.item() / n;
                    let data = p
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&pv, &yv)| {
                            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&pv) {
                                0.0
                            } else {
                                scale * (-(yv / pv) + (1.0 - yv) / (1.0 - pv))
                            }
                        })
                        .collect();
                    out.push((*probs, Tensor::new(p.shape().to_vec(), data)?));
                }
            }
        }
        Ok(out)
    }

    fn gather_ids(&self, i: usize) -> Result<&[usize], AutodiffError> {
        self.gathered[i].as_deref().ok_or(AutodiffError::NotEvaluated { node: i })
    }

    /// Smallest |x| over all relu inputs in the last forward pass, for
    /// finite-difference checks that must stay away from kinks.
    pub fn relu_margin(&self, params: &ParamStore) -> Option<f64> {
        let mut margin: Option<f64> = None;
        for op in self.ops.iter().take(self.evaluated) {
            if let Op::Relu(a) = op {
                if let Ok(x) = self.value(params, *a) {
                    let m = x.data().iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
                    margin = Some(margin.map_or(m, |cur| cur.min(m)));
                }
            }
        }
        margin
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn elementwise(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Sums a gradient of shape `out_shape` down to the broadcast operand's shape.
fn reduce_to(g: &Tensor, out_shape: &[usize], operand: &[usize]) -> Result<Tensor, AutodiffError> {
    match broadcast_kind(out_shape, operand) {
        Some(Broadcast::Same) => Ok(g.clone()),
        Some(Broadcast::Row) => {
            let m = operand[0];
            let mut data = vec![0.0; m];
            for chunk in g.data().chunks(m) {
                for (o, v) in data.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            Tensor::new(operand.to_vec(), data)
        }
        Some(Broadcast::Column) => Ok(g.sum_last()),
        None => Err(AutodiffError::Shape {
            node: None,
            op: "broadcast",
            detail: format!("cannot reduce {out_shape:?} to {operand:?}"),
        }),
    }
}

pub(crate) fn bce_value(p: &[f64], y: &[f64]) -> Result<f64, AutodiffError> {
    let mut total = 0.0;
    for (&pv, &yv) in p.iter().zip(y) {
        if yv != 0.0 && yv != 1.0 {
            return Err(AutodiffError::InvalidLabel { value: yv });
        }
        let pc = pv.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total += yv * pc.ln() + (1.0 - yv) * (1.0 - pc).ln();
    }
    Ok(-total / p.len() as f64)
}
