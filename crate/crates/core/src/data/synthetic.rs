use std::collections::HashSet;
use std::f64::consts::FRAC_PI_2;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_csv, Dataset, Example, FeatureSchema, DEFAULT_EMBEDDING_DIM};
use crate::{rng, Error, Result};

/// Row count for every domain, or one count per domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Interactions {
    Uniform(usize),
    PerDomain(Vec<usize>),
}

impl Interactions {
    pub fn counts(&self, n_domains: usize) -> Result<Vec<usize>> {
        match self {
            Interactions::Uniform(n) => Ok(vec![*n; n_domains]),
            Interactions::PerDomain(v) if v.len() == n_domains => Ok(v.clone()),
            Interactions::PerDomain(v) => {
                Err(Error::Invalid(format!("{} interaction counts given for {n_domains} domains", v.len())))
            }
        }
    }
}

/// Parameters of the latent-factor click generator.
///
/// Every user and item has a shared factor vector. Domain `d` scores a pair
/// with `uᵀ M_d v` where `M_d = cos(θ)·S + sin(θ)·R_d`, `θ = divergence·π/2`,
/// `S` is shared and `R_d` is drawn independently per domain. Factor vectors
/// carry a leading constant 1, so each `M_d` also sets domain-specific user
/// and item main effects on top of the shared biases. Labels threshold
/// the score plus logistic noise at the per-domain quantile that yields
/// `positive_rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_domains: usize,
    pub users: usize,
    /// Ignored when `target_sparsity` is set.
    pub items: usize,
    pub interactions_per_domain: Interactions,
    pub positive_rate: f64,
    pub divergence: f64,
    pub latent_dim: usize,
    /// Scale of the logistic noise added to scores.
    pub noise: f64,
    /// Standard deviation of the per-user and per-item biases shared by all domains.
    pub bias_std: f64,
    pub context_cardinalities: Vec<usize>,
    /// Overrides `items` with the smallest count reaching this sparsity.
    pub target_sparsity: Option<f64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_domains: 4,
            users: 2000,
            items: 3000,
            interactions_per_domain: Interactions::Uniform(12_500),
            positive_rate: 0.3,
            divergence: 0.5,
            latent_dim: 4,
            noise: 0.3,
            bias_std: 0.5,
            context_cardinalities: Vec::new(),
            target_sparsity: None,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn total_interactions(&self) -> Result<usize> {
        Ok(self.interactions_per_domain.counts(self.n_domains)?.iter().sum())
    }

    /// Item count after applying `target_sparsity`.
    pub fn effective_items(&self) -> Result<usize> {
        match self.target_sparsity {
            None => Ok(self.items),
            Some(s) if (0.0..1.0).contains(&s) => {
                let n = self.total_interactions()? as f64;
                Ok(((n / ((1.0 - s) * self.users as f64)).ceil() as usize).max(1))
            }
            Some(s) => Err(Error::Invalid(format!("target_sparsity must lie in [0, 1), got {s}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_domains == 0 || self.users == 0 || self.latent_dim == 0 {
            return Err(Error::Invalid("n_domains, users and latent_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.divergence) {
            return Err(Error::Invalid(format!("divergence must lie in [0, 1], got {}", self.divergence)));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(Error::Invalid(format!("positive_rate must lie in (0, 1), got {}", self.positive_rate)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.bias_std >= 0.0 && self.bias_std.is_finite()) {
            return Err(Error::Invalid("noise and bias_std must be finite and non-negative".into()));
        }
        if self.context_cardinalities.contains(&0) {
            return Err(Error::Invalid("context cardinalities must be positive".into()));
        }
        let items = self.effective_items()?;
        if items == 0 {
            return Err(Error::Invalid("items must be positive".into()));
        }
        let total = self.total_interactions()?;
        if total as u128 > self.users as u128 * items as u128 {
            return Err(Error::Invalid(format!(
                "{total} interactions cannot be distinct pairs over {} users x {items} items",
                self.users
            )));
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<FeatureSchema> {
        FeatureSchema::standard(
            self.users,
            self.effective_items()?,
            &self.context_cardinalities,
            DEFAULT_EMBEDDING_DIM,
            self.n_domains,
        )
    }
}

/// The scoring rules behind a generated dataset.
#[derive(Debug, Clone)]
pub struct SyntheticModel {
    k: usize,
    user_factors: Vec<f64>,
    item_factors: Vec<f64>,
    user_bias: Vec<f64>,
    item_bias: Vec<f64>,
    context_bias: Vec<Vec<f64>>,
    /// `n_domains` row-major `(k+1) × (k+1)` matrices.
    domain_matrices: Vec<Vec<f64>>,
}

fn normals(n: usize, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

impl SyntheticModel {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let k = spec.latent_dim;
        let items = spec.effective_items()?;
        let seed = spec.seed;
        // one extra row and column for the constant coordinate
        let h = k + 1;
        let entry_std = 1.0 / h as f64;
        let shared = normals(h * h, entry_std.sqrt(), &mut rng::stream(seed, "synthetic/shared"));
        let theta = spec.divergence * FRAC_PI_2;
        let (c, s) = (theta.cos(), theta.sin());
        let domain_matrices = (0..spec.n_domains)
            .map(|d| {
                let own = normals(h * h, entry_std.sqrt(), &mut rng::stream(seed, &format!("synthetic/domain/{d}")));
                shared.iter().zip(&own).map(|(a, b)| c * a + s * b).collect()
            })
            .collect();
        let context_bias = spec
            .context_cardinalities
            .iter()
            .enumerate()
            .map(|(j, &n)| normals(n, spec.bias_std, &mut rng::stream(seed, &format!("synthetic/context/{j}"))))
            .collect();
        Ok(Self {
            k,
            user_factors: normals(spec.users * k, 1.0, &mut rng::stream(seed, "synthetic/users")),
            item_factors: normals(items * k, 1.0, &mut rng::stream(seed, "synthetic/items")),
            user_bias: normals(spec.users, spec.bias_std, &mut rng::stream(seed, "synthetic/user_bias")),
            item_bias: normals(items, spec.bias_std, &mut rng::stream(seed, "synthetic/item_bias")),
            context_bias,
            domain_matrices,
        })
    }

    /// Noise-free score of `ids = [user, item, ctx..]` under domain `d`.
    pub fn score(&self, ids: &[usize], domain: usize) -> f64 {
        let k = self.k;
        let h = k + 1;
        let u = std::iter::once(1.0).chain(self.user_factors[ids[0] * k..(ids[0] + 1) * k].iter().copied());
        let v: Vec<f64> = std::iter::once(1.0).chain(self.item_factors[ids[1] * k..(ids[1] + 1) * k].iter().copied()).collect();
        let m = &self.domain_matrices[domain];
        let mut bilinear = 0.0;
        for (i, ui) in u.enumerate() {
            let row = &m[i * h..(i + 1) * h];
            bilinear += ui * row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        }
        let ctx: f64 = self.context_bias.iter().zip(&ids[2..]).map(|(t, &c)| t[c]).sum();
        bilinear + self.user_bias[ids[0]] + self.item_bias[ids[1]] + ctx
    }
}

fn distinct_pairs(n: usize, users: usize, items: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let grid = users * items;
    if n * 2 > grid {
        return sample(rng, grid, n).into_iter().map(|p| (p / items, p % items)).collect();
    }
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let pair = (rng.random_range(0..users), rng.random_range(0..items));
        if seen.insert(pair) {
            out.push(pair);
        }
    }
    out
}

/// Generates a dataset from `spec`. Pairs are distinct across the whole
/// dataset, and users and items are shared by all domains.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let model = SyntheticModel::new(spec)?;
    let schema = spec.schema()?;
    let counts = spec.interactions_per_domain.counts(spec.n_domains)?;
    let total: usize = counts.iter().sum();
    let pairs = distinct_pairs(total, spec.users, schema.items(), &mut rng::stream(spec.seed, "synthetic/pairs"));
    let mut ctx_rng = rng::stream(spec.seed, "synthetic/contexts");
    let mut noise_rng = rng::stream(spec.seed, "synthetic/noise");
    let mut rows = Vec::with_capacity(total);
    let mut start = 0;
    for (domain, &n) in counts.iter().enumerate() {
        let mut noisy = Vec::with_capacity(n);
        for &(u, i) in &pairs[start..start + n] {
            let mut ids = vec![u, i];
            ids.extend(spec.context_cardinalities.iter().map(|&c| ctx_rng.random_range(0..c)));
            let p: f64 = noise_rng.random_range(f64::EPSILON..1.0);
            let s = model.score(&ids, domain) + spec.noise * (p / (1.0 - p)).ln();
            noisy.push((ids, s));
        }
        let n_pos = (spec.positive_rate * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| noisy[b].1.total_cmp(&noisy[a].1).then(a.cmp(&b)));
        let mut labels = vec![0u8; n];
        for &j in &order[..n_pos] {
            labels[j] = 1;
        }
        rows.extend(noisy.into_iter().zip(labels).map(|((ids, _), label)| Example { ids, label, domain }));
        start += n;
    }
    Dataset::new(schema, rows)
}

/// Sidecar path recording the generator parameters next to `csv_path`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("spec.toml")
}

/// Writes the dataset as CSV plus a TOML sidecar with the spec.
pub fn write_synthetic(spec: &SyntheticSpec, ds: &Dataset, csv_path: impl AsRef<Path>) -> Result<PathBuf> {
    let csv_path = csv_path.as_ref();
    write_csv(ds, csv_path)?;
    let sidecar = sidecar_path(csv_path);
    let text = toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&sidecar, text)?;
    Ok(sidecar)
}
