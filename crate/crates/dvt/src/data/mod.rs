//! Datasets: generation (moons, synthetic digit glyphs), ingestion (CSV,
//! IDX images), and supervised/unsupervised splitting.

mod csvio;
mod digits;
mod idx;
mod moons;

pub use csvio::{index_class_names, load_csv_features, write_csv};
pub use digits::generate_digits;
pub use idx::{load_idx_images, write_idx_images};
pub use moons::{generate_moons, shift_target, shift_target_inverse};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// One domain's empirical data: features, optional ground-truth labels, and
/// the mask of rows whose label is visible to training.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub domain_id: String,
    /// [N, D] feature matrix.
    pub x: Tensor,
    /// Ground-truth labels where known; length N.
    pub labels: Vec<Option<usize>>,
    /// Rows whose label training may use; true requires a label.
    pub sup_mask: Vec<bool>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Structural invariants: consistent lengths, labels in range, a label
    /// behind every supervised flag, and at least one supervised row.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.x.rank() != 2 {
            return Err(Error::Data(format!(
                "dataset '{}': features must be [N, D]",
                self.domain_id
            )));
        }
        if self.labels.len() != n || self.sup_mask.len() != n {
            return Err(Error::Data(format!(
                "dataset '{}': {} rows but {} labels / {} mask entries",
                self.domain_id,
                n,
                self.labels.len(),
                self.sup_mask.len()
            )));
        }
        if self.class_count == 0 {
            return Err(Error::Data(format!("dataset '{}': class_count is 0", self.domain_id)));
        }
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(l) = l {
                if *l >= self.class_count {
                    return Err(Error::Data(format!(
                        "dataset '{}': row {} label {} out of range 0..{}",
                        self.domain_id, i, l, self.class_count
                    )));
                }
            }
            if self.sup_mask[i] && l.is_none() {
                return Err(Error::Data(format!(
                    "dataset '{}': row {} marked supervised without a label",
                    self.domain_id, i
                )));
            }
        }
        if !self.sup_mask.iter().any(|&m| m) {
            return Err(Error::Data(format!(
                "dataset '{}': no supervised rows",
                self.domain_id
            )));
        }
        Ok(())
    }

    pub fn supervised_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.sup_mask[i]).collect()
    }

    pub fn unsupervised_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.sup_mask[i]).collect()
    }

    /// New dataset from a subset (or reordering) of rows.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            domain_id: self.domain_id.clone(),
            x: self.x.take_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            sup_mask: idx.iter().map(|&i| self.sup_mask[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// Features and labels of the supervised rows.
    pub fn supervised_xy(&self) -> (Tensor, Vec<usize>) {
        let idx = self.supervised_indices();
        let y = idx.iter().map(|&i| self.labels[i].expect("mask implies label")).collect();
        (self.x.take_rows(&idx), y)
    }

    /// All ground-truth labels, for evaluation; errors when any are missing.
    pub fn true_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.ok_or_else(|| {
                    Error::Data(format!(
                        "dataset '{}': row {} has no ground-truth label",
                        self.domain_id, i
                    ))
                })
            })
            .collect()
    }

    /// Rows of each class among labeled rows (index lists per class).
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.class_count];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(l) = l {
                groups[*l].push(i);
            }
        }
        groups
    }
}

/// How many rows become supervised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SupervisedSplit {
    /// Fraction of rows (per class when stratified), in (0, 1].
    Fraction(f64),
    /// Exact count per class; requires stratified selection.
    PerClass(usize),
}

/// Mark a deterministic subset of labeled rows as supervised; everything
/// else keeps its ground-truth label but is hidden from training.
/// Stratified mode selects per class — `max(1, round(f * n_c))` rows for a
/// fraction — guaranteeing every class at least one supervised example.
pub fn split_supervised(
    ds: &Dataset,
    rule: SupervisedSplit,
    stratified: bool,
    seed: u64,
) -> Result<Dataset> {
    use rand::seq::SliceRandom;
    if let SupervisedSplit::Fraction(f) = rule {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!(
                "supervised fraction must be in (0, 1], got {}",
                f
            )));
        }
    }
    let mut rng = rng::stream(seed, rng::salt::SUP_MASK);
    let mut sup_mask = vec![false; ds.len()];
    if stratified {
        for (c, group) in ds.class_indices().iter().enumerate() {
            if group.is_empty() {
                return Err(Error::Data(format!(
                    "stratified split: class {} has no labeled rows in '{}'",
                    c, ds.domain_id
                )));
            }
            let k = match rule {
                SupervisedSplit::Fraction(f) => {
                    ((f * group.len() as f64).round() as usize).max(1)
                }
                SupervisedSplit::PerClass(k) => k,
            };
            if k > group.len() {
                return Err(Error::Config(format!(
                    "class {} has {} labeled rows, cannot supervise {}",
                    c,
                    group.len(),
                    k
                )));
            }
            let mut g = group.clone();
            g.shuffle(&mut rng);
            for &i in g.iter().take(k) {
                sup_mask[i] = true;
            }
        }
    } else {
        let f = match rule {
            SupervisedSplit::Fraction(f) => f,
            SupervisedSplit::PerClass(_) => {
                return Err(Error::Config(
                    "count-per-class supervision requires stratified mode".into(),
                ))
            }
        };
        let mut candidates: Vec<usize> =
            (0..ds.len()).filter(|&i| ds.labels[i].is_some()).collect();
        if candidates.is_empty() {
            return Err(Error::Data(format!("no labeled rows in '{}'", ds.domain_id)));
        }
        let k = ((f * candidates.len() as f64).round() as usize).max(1);
        candidates.shuffle(&mut rng);
        for &i in candidates.iter().take(k) {
            sup_mask[i] = true;
        }
    }
    let out = Dataset { sup_mask, ..ds.clone() };
    out.validate()?;
    Ok(out)
}

/// Stratified halves: per class (and for unlabeled rows as their own group)
/// shuffle and put the first ceil(n/2) rows in the first half. Both halves
/// keep the original ordering of the parent within each class group removed;
/// rows are returned in ascending original index so the split is stable.
pub fn split_train_test(ds: &Dataset, seed: u64) -> (Dataset, Dataset) {
    use rand::seq::SliceRandom;
    let mut rng = rng::stream(seed, rng::salt::SPLIT);
    let mut groups = ds.class_indices();
    let unlabeled: Vec<usize> =
        (0..ds.len()).filter(|&i| ds.labels[i].is_none()).collect();
    groups.push(unlabeled);
    let mut first = Vec::new();
    let mut second = Vec::new();
    for group in &groups {
        let mut g = group.clone();
        g.shuffle(&mut rng);
        let half = g.len().div_ceil(2);
        first.extend_from_slice(&g[..half]);
        second.extend_from_slice(&g[half..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    (ds.select(&first), ds.select(&second))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n_per_class: usize, k: usize) -> Dataset {
        let n = n_per_class * k;
        let x = Tensor::new(vec![n, 2], (0..2 * n).map(|i| i as f64).collect()).unwrap();
        Dataset {
            domain_id: "toy".into(),
            x,
            labels: (0..n).map(|i| Some(i % k)).collect(),
            sup_mask: vec![true; n],
            class_count: k,
        }
    }

    #[test]
    fn validate_catches_structural_errors() {
        let mut ds = toy(4, 2);
        ds.validate().unwrap();
        ds.labels[0] = Some(7);
        assert!(ds.validate().is_err());
        let mut ds = toy(4, 2);
        ds.labels[0] = None; // still flagged supervised
        assert!(ds.validate().is_err());
        let mut ds = toy(4, 2);
        ds.sup_mask = vec![false; ds.len()];
        assert!(ds.validate().is_err());
    }

    #[test]
    fn fraction_one_supervises_everything() {
        let ds = toy(10, 2);
        let out = split_supervised(&ds, SupervisedSplit::Fraction(1.0), true, 3).unwrap();
        assert!(out.sup_mask.iter().all(|&m| m));
    }

    #[test]
    fn stratified_fraction_pins_per_class_counts() {
        // 200 minority + 5000 majority at 2.5%: exactly 5 and 125.
        let mut ds = toy(1, 2);
        let n0 = 5000usize;
        let n1 = 200usize;
        let n = n0 + n1;
        ds.x = Tensor::zeros(vec![n, 2]);
        ds.labels = (0..n).map(|i| Some(usize::from(i >= n0))).collect();
        ds.sup_mask = vec![true; n];
        let out = split_supervised(&ds, SupervisedSplit::Fraction(0.025), true, 9).unwrap();
        let per_class: Vec<usize> = (0..2)
            .map(|c| {
                (0..n)
                    .filter(|&i| out.sup_mask[i] && out.labels[i] == Some(c))
                    .count()
            })
            .collect();
        assert_eq!(per_class, vec![125, 5]);
        // Different seed: same counts, different mask.
        let out2 = split_supervised(&ds, SupervisedSplit::Fraction(0.025), true, 10).unwrap();
        assert_ne!(out.sup_mask, out2.sup_mask);
        let per_class2: Vec<usize> = (0..2)
            .map(|c| {
                (0..n)
                    .filter(|&i| out2.sup_mask[i] && out2.labels[i] == Some(c))
                    .count()
            })
            .collect();
        assert_eq!(per_class2, vec![125, 5]);
    }

    #[test]
    fn stratified_guarantees_one_per_class() {
        let ds = toy(40, 2);
        let out = split_supervised(&ds, SupervisedSplit::Fraction(0.01), true, 1).unwrap();
        for c in 0..2 {
            assert!(
                (0..ds.len()).any(|i| out.sup_mask[i] && out.labels[i] == Some(c)),
                "class {} unsupervised",
                c
            );
        }
    }

    #[test]
    fn per_class_counts_are_exact_and_checked() {
        let ds = toy(10, 3);
        let out = split_supervised(&ds, SupervisedSplit::PerClass(4), true, 2).unwrap();
        assert_eq!(out.sup_mask.iter().filter(|&&m| m).count(), 12);
        assert!(split_supervised(&ds, SupervisedSplit::PerClass(11), true, 2).is_err());
        assert!(split_supervised(&ds, SupervisedSplit::PerClass(4), false, 2).is_err());
        assert!(split_supervised(&ds, SupervisedSplit::Fraction(0.0), true, 2).is_err());
    }

    #[test]
    fn train_test_halves_are_a_stratified_partition() {
        let ds = toy(25, 2); // odd per-class count: 13 + 12
        let (a, b) = split_train_test(&ds, 5);
        assert_eq!(a.len() + b.len(), ds.len());
        let count = |d: &Dataset, c: usize| {
            d.labels.iter().filter(|l| **l == Some(c)).count()
        };
        assert_eq!(count(&a, 0), 13);
        assert_eq!(count(&b, 0), 12);
        assert_eq!(count(&a, 1), 13);
        assert_eq!(count(&b, 1), 12);
        // Partition: together they reproduce every original row exactly once.
        let mut seen: Vec<f64> = a.x.data().iter().chain(b.x.data()).copied().collect();
        seen.sort_by(f64::total_cmp);
        let mut orig: Vec<f64> = ds.x.data().to_vec();
        orig.sort_by(f64::total_cmp);
        assert_eq!(seen, orig);
    }

    #[test]
    fn select_reorders_consistently() {
        let ds = toy(3, 2);
        let sub = ds.select(&[4, 1]);
        assert_eq!(sub.len(), 2);
        assert_eq!(sub.labels[0], ds.labels[4]);
        assert_eq!(sub.x.row(1), ds.x.row(1));
    }
}
