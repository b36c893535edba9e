use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Invalid(format!("split ratios must lie in [0, 1], got {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("split ratios must sum to 1, got {parts:?}")));
        }
        Ok(())
    }
}

/// Stratified random split over `(domain, label)` cells.
///
/// Within a domain, cells are allocated with cumulative rounding, so each
/// domain's split sizes are within one row of the exact ratio. A cell with at
/// least three rows always contributes to every split whose ratio is nonzero.
/// Row order inside each split follows the original dataset.
pub fn split_dataset(ds: &Dataset, ratios: SplitRatios, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    ratios.validate()?;
    let mut cells = vec![Vec::new(); ds.n_domains() * 2];
    for (i, r) in ds.rows().iter().enumerate() {
        cells[r.domain * 2 + usize::from(r.label)].push(i);
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for domain in 0..ds.n_domains() {
        let mut seen = 0usize;
        for label in 0..2 {
            let cell = &mut cells[domain * 2 + label];
            let n = cell.len();
            cell.shuffle(&mut rng::stream(seed, &format!("split/{domain}/{label}")));
            let quota = |r: f64| ((seen + n) as f64 * r).round() as usize - (seen as f64 * r).round() as usize;
            let mut n_val = quota(ratios.val).min(n);
            let mut n_test = quota(ratios.test).min(n - n_val);
            if n >= 3 {
                if ratios.val > 0.0 && n_val == 0 {
                    n_val = 1;
                }
                if ratios.test > 0.0 && n_test == 0 {
                    n_test = 1;
                }
                if ratios.train > 0.0 && n_val + n_test >= n {
                    n_val = n_val.min(n - 2).max(usize::from(ratios.val > 0.0));
                    n_test = n_test.min(n - 1 - n_val);
                }
            }
            val.extend_from_slice(&cell[..n_val]);
            test.extend_from_slice(&cell[n_val..n_val + n_test]);
            train.extend_from_slice(&cell[n_val + n_test..]);
            seen += n;
        }
    }
    for part in [&mut train, &mut val, &mut test] {
        part.sort_unstable();
    }
    Ok((ds.subset(&train), ds.subset(&val), ds.subset(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Example, FeatureSchema};

    fn two_domains() -> Dataset {
        let schema = FeatureSchema::standard(200, 200, &[], 2, 2).unwrap();
        let rows = (0..200).map(|i| Example { ids: vec![i, i], label: u8::from(i % 3 == 0), domain: i % 2 }).collect();
        Dataset::new(schema, rows).unwrap()
    }

    #[test]
    fn eighty_ten_ten_per_domain() {
        let (tr, va, te) = split_dataset(&two_domains(), SplitRatios::default(), 1).unwrap();
        for d in 0..2 {
            assert!(tr.domain_counts()[d].abs_diff(80) <= 1);
            assert!(va.domain_counts()[d].abs_diff(10) <= 1);
            assert!(te.domain_counts()[d].abs_diff(10) <= 1);
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let ds = two_domains();
        let a = split_dataset(&ds, SplitRatios::default(), 9).unwrap();
        assert_eq!(a, split_dataset(&ds, SplitRatios::default(), 9).unwrap());
        let mut users: Vec<_> = [&a.0, &a.1, &a.2].iter().flat_map(|s| s.rows().iter().map(|r| r.ids[0])).collect();
        users.sort_unstable();
        users.dedup();
        assert_eq!(users.len(), 200);
    }

    #[test]
    fn ratios_must_sum_to_one() {
        let bad = SplitRatios { train: 0.8, val: 0.1, test: 0.2 };
        assert!(split_dataset(&two_domains(), bad, 0).is_err());
    }

    #[test]
    fn tiny_cells_reach_every_split() {
        let schema = FeatureSchema::standard(10, 10, &[], 2, 1).unwrap();
        let rows = (0..6).map(|i| Example { ids: vec![i, i], label: u8::from(i < 3), domain: 0 }).collect();
        let (tr, va, te) = split_dataset(&Dataset::new(schema, rows).unwrap(), SplitRatios::default(), 0).unwrap();
        for s in [&tr, &va, &te] {
            assert!(s.rows().iter().any(|r| r.label == 1) && s.rows().iter().any(|r| r.label == 0));
        }
    }
}
