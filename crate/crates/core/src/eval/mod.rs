//! Ranking metrics: exact rank-based AUC, weighted AUC over domains, grid
//! sparsity, and the evaluation driver that produces a [`MetricsReport`].

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::Dataset;
use crate::{Error, Result};

/// Mann–Whitney AUC with average ranks for ties.
///
/// Returns `None` when either class is absent. The statistic is accumulated as
/// the integer `2·R⁺` (twice the positive rank sum), so the result is the same
/// `f64` as dividing the brute-force pair count `2·#(s⁺>s⁻) + #(s⁺=s⁻)` by
/// `2·P·N`.
pub fn auc(labels: &[u8], scores: &[f64]) -> Result<Option<f64>> {
    if labels.len() != scores.len() {
        return Err(Error::Invalid(format!("{} labels but {} scores", labels.len(), scores.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { what: "AUC scores".into() });
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Invalid(format!("label must be 0 or 1, got {bad}")));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("no NaN"));
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share the average (i+1+j)/2
        let group_pos = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += group_pos * (i + 1 + j) as u128;
        i = j;
    }
    let twice_u = twice_rank_sum - pos * (pos + 1);
    Ok(Some(twice_u as f64 / (2 * pos * neg) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wauc {
    pub value: f64,
    /// Renormalized weights; zero for excluded domains.
    pub weights: Vec<f64>,
    pub excluded: Vec<usize>,
}

/// `Σ ω′_i · AUC_i` with `ω_i ∝ n_i` over domains that have an AUC.
///
/// Domains with `None` (degenerate) or zero rows are excluded and the
/// remaining weights renormalized. The sum is taken as deviations from the
/// first included AUC, so equal AUCs give back that value exactly.
pub fn wauc(per_domain: &[(Option<f64>, usize)]) -> Result<Wauc> {
    let included: Vec<usize> = (0..per_domain.len()).filter(|&i| per_domain[i].0.is_some() && per_domain[i].1 > 0).collect();
    if included.is_empty() {
        return Err(Error::AllDegenerate);
    }
    let total: f64 = included.iter().map(|&i| per_domain[i].1 as f64).sum();
    let mut weights = vec![0.0; per_domain.len()];
    for &i in &included {
        weights[i] = per_domain[i].1 as f64 / total;
    }
    let pivot = per_domain[included[0]].0.expect("included");
    let value = pivot + included.iter().map(|&i| weights[i] * (per_domain[i].0.expect("included") - pivot)).sum::<f64>();
    let excluded = (0..per_domain.len()).filter(|i| !included.contains(i)).collect();
    Ok(Wauc { value, weights, excluded })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sparsity {
    pub overall: f64,
    pub per_domain: Vec<f64>,
}

/// `1 − distinct (user, item) pairs / (users × items)`, where the grid is the
/// schema's user and item cardinalities.
pub fn sparsity(ds: &Dataset) -> Result<Sparsity> {
    if ds.is_empty() {
        return Err(Error::Empty("cannot compute the sparsity of an empty dataset".into()));
    }
    let grid = ds.schema().users() as f64 * ds.schema().items() as f64;
    let mut overall = HashSet::new();
    let mut per = vec![HashSet::new(); ds.n_domains()];
    for r in ds.rows() {
        overall.insert((r.ids[0], r.ids[1]));
        per[r.domain].insert((r.ids[0], r.ids[1]));
    }
    Ok(Sparsity {
        overall: 1.0 - overall.len() as f64 / grid,
        per_domain: per.iter().map(|p| 1.0 - p.len() as f64 / grid).collect(),
    })
}

/// Anything that assigns one score per dataset row.
pub trait Scorer {
    fn score(&self, ds: &Dataset) -> Result<Vec<f64>>;
}

impl<F: Fn(&Dataset) -> Result<Vec<f64>>> Scorer for F {
    fn score(&self, ds: &Dataset) -> Result<Vec<f64>> {
        self(ds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: usize,
    pub auc: Option<f64>,
    /// Row share in the weighting split.
    pub omega: f64,
    /// Weight actually used in the WAUC after exclusions.
    pub weight: f64,
    pub n_rows: usize,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_domain: Vec<DomainMetrics>,
    pub wauc: f64,
    pub sparsity: f64,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    /// One record per domain followed by a summary record.
    pub fn records(&self) -> Vec<Value> {
        let mut out: Vec<Value> = self
            .per_domain
            .iter()
            .map(|d| {
                json!({
                    "record": "domain",
                    "domain": d.domain,
                    "auc": d.auc,
                    "omega": d.omega,
                    "weight": d.weight,
                    "n_rows": d.n_rows,
                    "sparsity": d.sparsity,
                })
            })
            .collect();
        out.push(json!({
            "record": "summary",
            "wauc": self.wauc,
            "sparsity": self.sparsity,
            "warnings": self.warnings,
        }));
        out
    }

    pub fn domain_aucs(&self) -> Vec<Option<f64>> {
        self.per_domain.iter().map(|d| d.auc).collect()
    }
}

/// Scores `test` and reports per-domain AUC and WAUC.
///
/// Weights come from `test`'s own domain counts unless `weight_counts` is
/// given (for instance the training split's counts).
pub fn evaluate(scorer: &dyn Scorer, test: &Dataset, weight_counts: Option<&[usize]>) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set has no rows".into()));
    }
    let counts = weight_counts.unwrap_or(test.domain_counts());
    if counts.len() != test.n_domains() {
        return Err(Error::Invalid(format!("{} weight counts for {} domains", counts.len(), test.n_domains())));
    }
    let scores = scorer.score(test)?;
    if scores.len() != test.len() {
        return Err(Error::Invalid(format!("scorer returned {} scores for {} rows", scores.len(), test.len())));
    }
    let n = test.n_domains();
    let mut labels = vec![Vec::new(); n];
    let mut by_domain = vec![Vec::new(); n];
    for (r, s) in test.rows().iter().zip(&scores) {
        labels[r.domain].push(r.label);
        by_domain[r.domain].push(*s);
    }
    let aucs = (0..n).map(|d| auc(&labels[d], &by_domain[d])).collect::<Result<Vec<_>>>()?;
    let entries: Vec<_> = (0..n).map(|d| (if labels[d].is_empty() { None } else { aucs[d] }, counts[d])).collect();
    let w = wauc(&entries)?;
    let sp = sparsity(test)?;
    let total: usize = counts.iter().sum();
    let mut warnings = Vec::new();
    for &d in &w.excluded {
        let why = if labels[d].is_empty() { "has no test rows" } else { "has single-class test labels" };
        warnings.push(format!("domain {d} {why}; excluded from WAUC with weights renormalized"));
    }
    let per_domain = (0..n)
        .map(|d| DomainMetrics {
            domain: d,
            auc: aucs[d],
            omega: if total == 0 { 0.0 } else { counts[d] as f64 / total as f64 },
            weight: w.weights[d],
            n_rows: labels[d].len(),
            sparsity: sp.per_domain[d],
        })
        .collect();
    Ok(MetricsReport { per_domain, wauc: w.value, sparsity: sp.overall, warnings })
}
