//! Python bindings: datasets, models, the three-phase trainer and the
//! ranking metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use moelora::data::{self, Interactions, SplitRatios, SyntheticSpec};
use moelora::layers::Routing;
use moelora::models::{self, AdapterConfig, Arch, CtrModel, Mode, ModelConfig};
use moelora::training::{train_pipeline, TrainConfig};
use moelora::{eval, Error};

fn py_err(e: Error) -> PyErr {
    if e.is_numeric() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

#[pyclass(name = "Dataset", module = "moelora_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Reads a CSV file, inferring cardinalities from the largest ids.
    #[staticmethod]
    #[pyo3(signature = (path, embedding_dim = data::DEFAULT_EMBEDDING_DIM))]
    fn load_csv(path: PathBuf, embedding_dim: usize) -> PyResult<Self> {
        Ok(Self { inner: data::load_csv_inferred(path, embedding_dim).map_err(py_err)? })
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        data::write_csv(&self.inner, path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn n_domains(&self) -> usize {
        self.inner.n_domains()
    }

    #[getter]
    fn domain_counts(&self) -> Vec<usize> {
        self.inner.domain_counts().to_vec()
    }

    #[getter]
    fn positive_rate(&self) -> f64 {
        self.inner.positive_rate()
    }

    #[getter]
    fn field_names(&self) -> Vec<String> {
        self.inner.schema().fields.iter().map(|f| f.name.clone()).collect()
    }

    /// `(ids, label, domain)` per row.
    fn rows(&self) -> Vec<(Vec<usize>, u8, usize)> {
        self.inner.rows().iter().map(|r| (r.ids.clone(), r.label, r.domain)).collect()
    }

    fn domain_proportions(&self) -> PyResult<Vec<f64>> {
        data::domain_proportions(&self.inner).map_err(py_err)
    }

    /// Overall sparsity and one value per domain.
    fn sparsity(&self) -> PyResult<(f64, Vec<f64>)> {
        let s = eval::sparsity(&self.inner).map_err(py_err)?;
        Ok((s.overall, s.per_domain))
    }

    #[pyo3(signature = (seed, train = 0.8, val = 0.1, test = 0.1))]
    fn split(&self, seed: u64, train: f64, val: f64, test: f64) -> PyResult<(Self, Self, Self)> {
        let (a, b, c) = data::split_dataset(&self.inner, SplitRatios { train, val, test }, seed).map_err(py_err)?;
        Ok((Self { inner: a }, Self { inner: b }, Self { inner: c }))
    }

    fn __repr__(&self) -> String {
        format!("Dataset(rows={}, domains={})", self.inner.len(), self.inner.n_domains())
    }
}

/// Generates a latent-factor multi-domain click dataset.
#[pyfunction]
#[pyo3(signature = (
    n_domains = 4, users = 2000, items = 3000, interactions_per_domain = 12_500, positive_rate = 0.3,
    divergence = 0.5, latent_dim = 4, noise = 0.3, bias_std = 0.5, target_sparsity = None, seed = 0,
    embedding_dim = data::DEFAULT_EMBEDDING_DIM,
))]
#[allow(clippy::too_many_arguments)]
fn generate_synthetic(
    n_domains: usize,
    users: usize,
    items: usize,
    interactions_per_domain: usize,
    positive_rate: f64,
    divergence: f64,
    latent_dim: usize,
    noise: f64,
    bias_std: f64,
    target_sparsity: Option<f64>,
    seed: u64,
    embedding_dim: usize,
) -> PyResult<PyDataset> {
    let spec = SyntheticSpec {
        n_domains,
        users,
        items,
        interactions_per_domain: Interactions::Uniform(interactions_per_domain),
        positive_rate,
        divergence,
        latent_dim,
        noise,
        bias_std,
        context_cardinalities: Vec::new(),
        target_sparsity,
        seed,
    };
    let ds = data::generate_synthetic(&spec).map_err(py_err)?;
    let mut schema = ds.schema().clone();
    schema.embedding_dim = embedding_dim;
    Ok(PyDataset { inner: ds.with_schema(schema).map_err(py_err)? })
}

#[pyclass(name = "Model", module = "moelora_py")]
struct PyModel {
    inner: CtrModel,
}

fn parse_routing(routing: &str) -> PyResult<Routing> {
    match routing {
        "mixture" => Ok(Routing::Mixture),
        "backbone" => Ok(Routing::Backbone),
        other => Err(PyValueError::new_err(format!("routing must be `mixture` or `backbone`, got `{other}`"))),
    }
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (
        dataset, arch = "mlp", mode = "plain", hidden = vec![64, 32], rank = 4, alpha = 4.0,
        experts_per_domain = 1, input_gating = false, clamp_one_hot = false, domain_as_feature = false, seed = 0,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        dataset: &PyDataset,
        arch: &str,
        mode: &str,
        hidden: Vec<usize>,
        rank: usize,
        alpha: f64,
        experts_per_domain: usize,
        input_gating: bool,
        clamp_one_hot: bool,
        domain_as_feature: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            arch: arch.parse::<Arch>().map_err(py_err)?,
            mode: mode.parse::<Mode>().map_err(py_err)?,
            hidden,
            adapter: AdapterConfig { rank, alpha, experts_per_domain, input_gating, clamp_one_hot, ..AdapterConfig::default() },
            domain_as_feature,
            ..ModelConfig::default()
        };
        Ok(Self { inner: models::build_model(dataset.inner.schema(), &config, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: models::load_checkpoint(path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        models::save_checkpoint(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn arch(&self) -> &'static str {
        self.inner.arch().as_str()
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode().as_str()
    }

    /// Click probabilities, each row routed by its own domain.
    #[pyo3(signature = (dataset, routing = "mixture"))]
    fn predict(&self, dataset: &PyDataset, routing: &str) -> PyResult<Vec<f64>> {
        self.inner.predict_rows(dataset.inner.rows(), parse_routing(routing)?).map_err(py_err)
    }

    /// Gate weights of every adapted layer for `domain` (moe models only).
    fn gate_weights(&self, domain: usize) -> PyResult<Vec<Vec<f64>>> {
        self.inner.gate_weights(domain).map_err(py_err)
    }

    /// `(name, group)` for every parameter tensor.
    fn param_groups(&self) -> Vec<(String, String)> {
        self.inner.param_groups().into_iter().map(|p| (p.name, p.tag.to_string())).collect()
    }

    fn param_count(&self) -> usize {
        self.inner.params.scalar_count()
    }

    /// Runs the phases this model's mode needs and evaluates on `test`.
    ///
    /// Returns a dict with `wauc`, `domain_aucs`, `phases` (per-phase epoch
    /// losses) and `warnings`. The model keeps the trained parameters.
    #[pyo3(signature = (
        train, val, test, lr = 1e-3, expert_lr = None, gate_lr = 1e-2, batch_size = 256, epochs = (5, 5, 5),
        patience = 2, seed = 0,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        train: &PyDataset,
        val: &PyDataset,
        test: &PyDataset,
        lr: f64,
        expert_lr: Option<f64>,
        gate_lr: f64,
        batch_size: usize,
        epochs: (usize, usize, usize),
        patience: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let cfg = TrainConfig {
            lr,
            expert_lr,
            gate_lr,
            batch_size,
            epochs: [epochs.0, epochs.1, epochs.2],
            patience,
            seed,
            ..TrainConfig::default()
        };
        let model = self.inner.clone();
        let result = py
            .detach(|| train_pipeline(&cfg, model, &train.inner, &val.inner, &test.inner, None))
            .map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("wauc", result.metrics.wauc)?;
        out.set_item("domain_aucs", result.metrics.domain_aucs())?;
        out.set_item("warnings", result.metrics.warnings.clone())?;
        let phases: Vec<(u8, Vec<f64>)> = result.phases.iter().map(|p| (p.phase, p.loss_curve())).collect();
        out.set_item("phases", phases)?;
        self.inner = result.model;
        Ok(out)
    }

    /// Per-domain AUCs and WAUC of this model on `dataset`.
    fn evaluate(&self, dataset: &PyDataset) -> PyResult<(f64, Vec<Option<f64>>)> {
        let report = eval::evaluate(&self.inner, &dataset.inner, None).map_err(py_err)?;
        Ok((report.wauc, report.domain_aucs()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(arch={}, mode={}, params={})",
            self.inner.arch(),
            self.inner.mode(),
            self.inner.params.scalar_count()
        )
    }
}

/// Rank-based AUC; `None` when the labels hold a single class.
#[pyfunction]
fn auc(labels: Vec<u8>, scores: Vec<f64>) -> PyResult<Option<f64>> {
    eval::auc(&labels, &scores).map_err(py_err)
}

/// Weighted AUC over `(auc or None, row count)` pairs.
#[pyfunction]
fn wauc(per_domain: Vec<(Option<f64>, usize)>) -> PyResult<f64> {
    Ok(eval::wauc(&per_domain).map_err(py_err)?.value)
}

/// Sum of pairwise inner products of field embeddings.
#[pyfunction]
fn fm_pairwise(fields: Vec<Vec<f64>>) -> PyResult<f64> {
    models::fm_pairwise(&fields).map_err(py_err)
}

#[pymodule]
fn moelora_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(wauc, m)?)?;
    m.add_function(wrap_pyfunction!(fm_pairwise, m)?)?;
    Ok(())
}
