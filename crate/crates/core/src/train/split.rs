use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Train / validation / test indices into a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    /// `[train, valid, test]` sample count of every class.
    pub class_counts: Vec<[usize; 3]>,
    /// Normalized partition weights.
    pub weights: [f64; 3],
}

impl SplitPlan {
    pub fn partitions(&self) -> [&[usize]; 3] {
        [&self.train, &self.valid, &self.test]
    }

    /// Plan from fixed index lists, e.g. a pre-split directory tree.
    pub fn from_indices(labels: &[usize], train: Vec<usize>, valid: Vec<usize>, test: Vec<usize>) -> Self {
        let k = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut class_counts = vec![[0; 3]; k];
        for (p, part) in [&train, &valid, &test].into_iter().enumerate() {
            for &i in part {
                class_counts[labels[i]][p] += 1;
            }
        }
        let n = (train.len() + valid.len() + test.len()).max(1) as f64;
        let weights = [train.len() as f64 / n, valid.len() as f64 / n, test.len() as f64 / n];
        Self {
            train,
            valid,
            test,
            class_counts,
            weights,
        }
    }
}

fn normalize<const N: usize>(weights: [f64; N]) -> Result<[f64; N]> {
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || total <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "split weights {weights:?} must be non-negative with a positive sum"
        )));
    }
    Ok(weights.map(|w| w / total))
}

/// Largest-remainder apportionment of `n` items; ties go to the lower index.
fn apportion<const N: usize>(n: usize, weights: &[f64; N]) -> [usize; N] {
    let quotas = weights.map(|w| w * n as f64);
    let mut alloc = quotas.map(|q| q.floor() as usize);
    let mut left = n - alloc.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..N).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if weights[i] > 0.0 {
            alloc[i] += 1;
            left -= 1;
        }
    }
    alloc
}

fn by_class(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut classes = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        classes[l].push(i);
    }
    classes
}

fn require_min(classes: &[Vec<usize>], min: usize, why: &str) -> Result<()> {
    let short: Vec<String> = classes
        .iter()
        .enumerate()
        .filter(|(_, c)| c.len() < min)
        .map(|(k, c)| format!("class {k} ({} samples)", c.len()))
        .collect();
    if short.is_empty() {
        Ok(())
    } else {
        Err(Error::Dataset(format!(
            "{why} needs at least {min} samples per class; too few in {}",
            short.join(", ")
        )))
    }
}

/// Shuffles each class with `seed` and apportions it over the partitions in
/// proportion to the normalized `weights`.
pub fn stratified_split(labels: &[usize], weights: [f64; 3], seed: u64) -> Result<SplitPlan> {
    let weights = normalize(weights)?;
    let mut classes = by_class(labels);
    let parts = weights.iter().filter(|&&w| w > 0.0).count();
    require_min(&classes, parts, "a stratified split")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    let mut class_counts = Vec::with_capacity(classes.len());
    for members in &mut classes {
        members.shuffle(&mut rng);
        let alloc = apportion(members.len(), &weights);
        let mut start = 0;
        for (p, &n) in alloc.iter().enumerate() {
            out[p].extend_from_slice(&members[start..start + n]);
            start += n;
        }
        class_counts.push(alloc);
    }
    for part in &mut out {
        part.sort_unstable();
    }
    let [train, valid, test] = out;
    Ok(SplitPlan {
        train,
        valid,
        test,
        class_counts,
        weights,
    })
}

/// `k` stratified folds. Each class is shuffled and dealt round-robin over
/// the folds, starting where the previous class stopped so fold sizes stay
/// balanced. Fold `f` is the test set of plan `f`; the remaining samples are
/// split into train and validation by `train_valid` weights, per class.
pub fn kfold_plans(labels: &[usize], k: usize, train_valid: [f64; 2], seed: u64) -> Result<Vec<SplitPlan>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k-fold needs k ≥ 2, got {k}")));
    }
    let tv = normalize(train_valid)?;
    let mut classes = by_class(labels);
    require_min(&classes, k, "k-fold cross-validation")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // fold_of[class][fold] = members of that class in that fold
    let mut fold_of = vec![vec![Vec::new(); k]; classes.len()];
    let mut offset = 0;
    for (c, members) in classes.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        for (j, &i) in members.iter().enumerate() {
            fold_of[c][(offset + j) % k].push(i);
        }
        offset = (offset + members.len()) % k;
    }
    let mut plans = Vec::with_capacity(k);
    for f in 0..k {
        let mut train = Vec::new();
        let mut valid = Vec::new();
        let mut test = Vec::new();
        let mut class_counts = Vec::with_capacity(classes.len());
        for folds in &fold_of {
            test.extend_from_slice(&folds[f]);
            // rest in fold order, already shuffled within each fold
            let rest: Vec<usize> = (1..k).flat_map(|d| folds[(f + d) % k].iter().copied()).collect();
            let [nt, nv] = apportion(rest.len(), &tv);
            train.extend_from_slice(&rest[..nt]);
            valid.extend_from_slice(&rest[nt..nt + nv]);
            class_counts.push([nt, nv, folds[f].len()]);
        }
        train.sort_unstable();
        valid.sort_unstable();
        test.sort_unstable();
        let n = labels.len() as f64;
        let weights = [train.len() as f64 / n, valid.len() as f64 / n, test.len() as f64 / n];
        plans.push(SplitPlan {
            train,
            valid,
            test,
            class_counts,
            weights,
        });
    }
    Ok(plans)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_per_class_splits_three_one_one() {
        let labels = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let plan = stratified_split(&labels, [0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!(plan.class_counts, vec![[3, 1, 1], [3, 1, 1]]);
        assert_eq!(plan.train.len() + plan.valid.len() + plan.test.len(), 10);
    }

    #[test]
    fn weights_are_normalized() {
        let labels = vec![0; 90];
        let plan = stratified_split(&labels, [60.0, 20.0, 10.0], 0).unwrap();
        assert_eq!(plan.class_counts[0], [60, 20, 10]);
        let w = plan.weights;
        assert!((w[0] - 60.0 / 90.0).abs() < 1e-15);
    }

    #[test]
    fn too_few_samples_names_the_class() {
        let err = stratified_split(&[0, 0, 0, 1, 1], [6.0, 2.0, 1.0], 0).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
        assert!(kfold_plans(&[0, 1, 0, 1], 1, [4.0, 1.0], 0).is_err());
    }

    #[test]
    fn largest_remainder_prefers_lower_index_on_ties() {
        assert_eq!(apportion(1, &[0.5, 0.5]), [1, 0]);
        assert_eq!(apportion(3, &[6.0 / 9.0, 2.0 / 9.0, 1.0 / 9.0]), [2, 1, 0]);
    }
}
