use serde::{Deserialize, Serialize};

use super::AutodiffError;

/// Dense row-major array of `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { node: None, op, detail }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err("tensor", format!("shape {shape:?} must be non-empty and positive")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Builds a 1-D tensor.
    pub fn vector(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "vector must hold at least one value");
        Self { shape: vec![values.len()], data: values }
    }

    /// Builds a 2-D tensor from rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AutodiffError> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(shape_err("tensor", "ragged rows".into()));
        }
        Self::new(vec![n, m], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn leading(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, AutodiffError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize), AutodiffError> {
        match self.shape.as_slice() {
            [n, m] => Ok((*n, *m)),
            s => Err(shape_err(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// `self · other` for `[n, k] · [k, m]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, AutodiffError> {
        let (n, k) = self.dims2("matmul")?;
        let (k2, m) = other.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", self.shape, other.shape)));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b = &other.data[p * m..(p + 1) * m];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    /// `self · otherᵀ` for `[n, k] · [m, k]ᵀ`.
    pub fn matmul_bt(&self, other: &Tensor) -> Result<Tensor, AutodiffError> {
        let (n, k) = self.dims2("matmul_bt")?;
        let (m, k2) = other.dims2("matmul_bt")?;
        if k != k2 {
            return Err(shape_err("matmul_bt", format!("{:?} x {:?}ᵀ", self.shape, other.shape)));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    /// `selfᵀ · other` for `[k, n]ᵀ · [k, m]`.
    pub fn matmul_at(&self, other: &Tensor) -> Result<Tensor, AutodiffError> {
        let (k, n) = self.dims2("matmul_at")?;
        let (k2, m) = other.dims2("matmul_at")?;
        if k != k2 {
            return Err(shape_err("matmul_at", format!("{:?}ᵀ x {:?}", self.shape, other.shape)));
        }
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let b = &other.data[p * m..(p + 1) * m];
            for i in 0..n {
                let a = self.data[p * n + i];
                if a == 0.0 {
                    continue;
                }
                let row = &mut out[i * m..(i + 1) * m];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    /// Elementwise binary op with the broadcasting rules shared by `add` and `mul`:
    /// equal shapes, a trailing-axis vector `[m]` against `[.., m]`, or a column
    /// `[n, 1]` against `[n, m]`.
    fn broadcast_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, AutodiffError> {
        let mut out = self.data.clone();
        match broadcast_kind(&self.shape, &other.shape) {
            Some(Broadcast::Same) => {
                for (o, &b) in out.iter_mut().zip(&other.data) {
                    *o = f(*o, b);
                }
            }
            Some(Broadcast::Row) => {
                let m = other.data.len();
                for chunk in out.chunks_mut(m) {
                    for (o, &b) in chunk.iter_mut().zip(&other.data) {
                        *o = f(*o, b);
                    }
                }
            }
            Some(Broadcast::Column) => {
                let m = self.last_dim();
                for (chunk, &b) in out.chunks_mut(m).zip(&other.data) {
                    for o in chunk.iter_mut() {
                        *o = f(*o, b);
                    }
                }
            }
            None => {
                return Err(shape_err(op, format!("cannot broadcast {:?} with {:?}", self.shape, other.shape)))
            }
        }
        Ok(Tensor { shape: self.shape.clone(), data: out })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, AutodiffError> {
        self.broadcast_with(other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, AutodiffError> {
        self.broadcast_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&self) -> Tensor {
        let m = self.last_dim();
        let mut data = self.data.clone();
        for row in data.chunks_mut(m) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Tensor { shape: self.shape.clone(), data }
    }

    /// Concatenation along the last axis; all parts must agree on leading rows.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let n = first.leading();
        if parts.iter().any(|p| p.leading() != n || p.shape.len() != first.shape.len()) {
            let shapes: Vec<_> = parts.iter().map(|p| p.shape.clone()).collect();
            return Err(shape_err("concat", format!("leading axes differ: {shapes:?}")));
        }
        let total: usize = parts.iter().map(|p| p.last_dim()).sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                let m = p.last_dim();
                data.extend_from_slice(&p.data[i * m..(i + 1) * m]);
            }
        }
        let mut shape = first.shape.clone();
        *shape.last_mut().unwrap() = total;
        Ok(Tensor { shape, data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum over the last axis, keeping it as size 1.
    pub fn sum_last(&self) -> Tensor {
        let m = self.last_dim();
        let data = self.data.chunks(m).map(|r| r.iter().sum()).collect();
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = 1;
        Tensor { shape, data }
    }

    /// Selects rows of a 2-D table.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor, AutodiffError> {
        let (v, k) = self.dims2("gather")?;
        if ids.is_empty() {
            return Err(shape_err("gather", "empty index list".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * k);
        for &id in ids {
            if id >= v {
                return Err(AutodiffError::IndexOutOfRange { node: None, index: id, rows: v });
            }
            data.extend_from_slice(&self.data[id * k..(id + 1) * k]);
        }
        Ok(Tensor { shape: vec![ids.len(), k], data })
    }

    /// Row-wise mixture: `out[i] = Σ_e weights[i, e] · terms[e][i]`, accumulated in
    /// term order. Zero weights are skipped, so a one-hot weight row reproduces the
    /// selected term exactly.
    pub fn weighted_sum(weights: &Tensor, terms: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        let (n, e) = weights.dims2("weighted_sum")?;
        if e != terms.len() {
            return Err(shape_err("weighted_sum", format!("{e} weight columns for {} terms", terms.len())));
        }
        let first = terms[0];
        let (n2, m) = first.dims2("weighted_sum")?;
        if n2 != n || terms.iter().any(|t| t.shape != first.shape) {
            return Err(shape_err("weighted_sum", "terms disagree with weights".into()));
        }
        let mut data = vec![0.0; n * m];
        for (j, term) in terms.iter().enumerate() {
            for i in 0..n {
                let w = weights.data[i * e + j];
                if w == 0.0 {
                    continue;
                }
                let row = &mut data[i * m..(i + 1) * m];
                for (o, &t) in row.iter_mut().zip(&term.data[i * m..(i + 1) * m]) {
                    *o += w * t;
                }
            }
        }
        Ok(Tensor { shape: vec![n, m], data })
    }

    /// Bytes of the little-endian encoding of every value.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    Row,
    Column,
}

pub(crate) fn broadcast_kind(lhs: &[usize], rhs: &[usize]) -> Option<Broadcast> {
    if lhs == rhs {
        return Some(Broadcast::Same);
    }
    if rhs.len() == 1 && lhs.last() == Some(&rhs[0]) {
        return Some(Broadcast::Row);
    }
    if lhs.len() == 2 && rhs.len() == 2 && rhs[1] == 1 && rhs[0] == lhs[0] {
        return Some(Broadcast::Column);
    }
    None
}
