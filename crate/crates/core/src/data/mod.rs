//! Multi-domain click logs: schema, CSV ingestion, stratified splitting,
//! domain proportions, batching and a latent-factor synthetic generator.

mod csv_io;
mod split;
mod synthetic;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use csv_io::{infer_schema, load_csv, load_csv_inferred, write_csv, CSV_PREFIX};
pub use split::{split_dataset, SplitRatios};
pub use synthetic::{generate_synthetic, sidecar_path, write_synthetic, Interactions, SyntheticModel, SyntheticSpec};

use crate::{rng, Error, Result};

pub const DEFAULT_EMBEDDING_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    pub cardinality: usize,
}

/// Categorical fields in column order, the embedding width shared by all
/// fields, and the number of domains.
///
/// The first two fields are always the user and item ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub fields: Vec<Field>,
    pub embedding_dim: usize,
    pub n_domains: usize,
}

impl FeatureSchema {
    pub fn new(fields: Vec<Field>, embedding_dim: usize, n_domains: usize) -> Result<Self> {
        let schema = Self { fields, embedding_dim, n_domains };
        schema.validate()?;
        Ok(schema)
    }

    /// `user_id`, `item_id` and `ctx_0..` with the given cardinalities.
    pub fn standard(users: usize, items: usize, contexts: &[usize], embedding_dim: usize, n_domains: usize) -> Result<Self> {
        let mut fields = vec![
            Field { name: "user_id".into(), cardinality: users },
            Field { name: "item_id".into(), cardinality: items },
        ];
        for (k, &c) in contexts.iter().enumerate() {
            fields.push(Field { name: format!("ctx_{k}"), cardinality: c });
        }
        Self::new(fields, embedding_dim, n_domains)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fields.len() < 2 {
            return Err(Error::Invalid("schema needs at least the user and item fields".into()));
        }
        if let Some(f) = self.fields.iter().find(|f| f.cardinality == 0) {
            return Err(Error::Invalid(format!("field {} has cardinality 0", f.name)));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Invalid("embedding_dim must be positive".into()));
        }
        if self.n_domains == 0 {
            return Err(Error::Invalid("n_domains must be positive".into()));
        }
        Ok(())
    }

    pub fn n_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn users(&self) -> usize {
        self.fields[0].cardinality
    }

    pub fn items(&self) -> usize {
        self.fields[1].cardinality
    }

    pub fn check_example(&self, ex: &Example) -> Result<()> {
        if ex.ids.len() != self.fields.len() {
            return Err(Error::Invalid(format!("example has {} ids, schema has {} fields", ex.ids.len(), self.fields.len())));
        }
        for (f, &id) in self.fields.iter().zip(&ex.ids) {
            if id >= f.cardinality {
                return Err(Error::IdOutOfRange { field: f.name.clone(), id, cardinality: f.cardinality });
            }
        }
        if ex.domain >= self.n_domains {
            return Err(Error::DomainOutOfRange { domain: ex.domain, n_domains: self.n_domains });
        }
        if ex.label > 1 {
            return Err(Error::Invalid(format!("label must be 0 or 1, got {}", ex.label)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub ids: Vec<usize>,
    pub label: u8,
    pub domain: usize,
}

/// Validated rows plus per-domain counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    schema: FeatureSchema,
    rows: Vec<Example>,
    counts: Vec<usize>,
}

impl Dataset {
    pub fn new(schema: FeatureSchema, rows: Vec<Example>) -> Result<Self> {
        schema.validate()?;
        let mut counts = vec![0; schema.n_domains];
        for ex in &rows {
            schema.check_example(ex)?;
            counts[ex.domain] += 1;
        }
        Ok(Self { schema, rows, counts })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn rows(&self) -> &[Example] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_domains(&self) -> usize {
        self.schema.n_domains
    }

    pub fn domain_counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn positive_rate(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.label == 1).count() as f64 / self.rows.len() as f64
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let rows: Vec<_> = indices.iter().map(|&i| self.rows[i].clone()).collect();
        let mut counts = vec![0; self.schema.n_domains];
        for r in &rows {
            counts[r.domain] += 1;
        }
        Dataset { schema: self.schema.clone(), rows, counts }
    }

    pub fn domain_subset(&self, domain: usize) -> Dataset {
        let idx: Vec<_> = (0..self.rows.len()).filter(|&i| self.rows[i].domain == domain).collect();
        self.subset(&idx)
    }

    pub fn with_schema(&self, schema: FeatureSchema) -> Result<Dataset> {
        Dataset::new(schema, self.rows.clone())
    }
}

/// `ω_i = count_i / total`.
pub fn domain_proportions(ds: &Dataset) -> Result<Vec<f64>> {
    if ds.is_empty() {
        return Err(Error::Empty("cannot compute domain proportions of an empty dataset".into()));
    }
    let total = ds.len() as f64;
    Ok(ds.domain_counts().iter().map(|&c| c as f64 / total).collect())
}

/// Row-index batches covering `0..n_rows` exactly once.
///
/// With `shuffle`, the order is a permutation drawn from a stream keyed by
/// `(seed, epoch)`; otherwise rows keep their original order.
pub fn batch_iter(n_rows: usize, batch_size: usize, seed: u64, epoch: usize, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n_rows).collect();
    if shuffle {
        order.shuffle(&mut rng::stream(seed, &format!("batches/{epoch}")));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
