use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Assignment of image ids to `k` cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    k: usize,
    seed: u64,
    assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn assignments(&self) -> &BTreeMap<String, usize> {
        &self.assignments
    }

    pub fn fold_of(&self, image_id: &str) -> Option<usize> {
        self.assignments.get(image_id).copied()
    }

    /// Ids in `fold`, sorted.
    pub fn fold_ids(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Ids outside `fold`, sorted.
    pub fn train_ids(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded shuffle of the sorted ids followed by contiguous chunking; the
/// first `n % k` folds receive one extra id.
pub fn kfold_split(image_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Argument(format!("k must be at least 2, got {k}")));
    }
    let mut ids: Vec<String> = image_ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() != image_ids.len() {
        return Err(Error::Argument("duplicate image ids".into()));
    }
    let n = ids.len();
    if k > n {
        return Err(Error::Argument(format!("k = {k} exceeds {n} images")));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let (base, extra) = (n / k, n % k);
    let mut assignments = BTreeMap::new();
    let mut iter = ids.into_iter();
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        for id in iter.by_ref().take(size) {
            assignments.insert(id, fold);
        }
    }
    Ok(FoldPlan {
        k,
        seed,
        assignments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i:03}")).collect()
    }

    #[test]
    fn exact_division() {
        let plan = kfold_split(&ids(10), 5, 3).unwrap();
        assert_eq!(plan.fold_sizes(), vec![2; 5]);
    }

    #[test]
    fn remainder_spread() {
        let plan = kfold_split(&ids(11), 5, 3).unwrap();
        let mut sizes = plan.fold_sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = kfold_split(&ids(40), 5, 9).unwrap();
        let b = kfold_split(&ids(40), 5, 9).unwrap();
        let c = kfold_split(&ids(40), 5, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.assignments(), c.assignments());
    }

    #[test]
    fn input_order_does_not_matter() {
        let mut rev = ids(20);
        rev.reverse();
        assert_eq!(kfold_split(&ids(20), 4, 1).unwrap(), kfold_split(&rev, 4, 1).unwrap());
    }

    #[test]
    fn argument_errors() {
        assert!(kfold_split(&ids(3), 5, 0).is_err());
        assert!(kfold_split(&ids(3), 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition_ids(n in 2usize..60, k in 2usize..8, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let all = ids(n);
            let plan = kfold_split(&all, k, seed).unwrap();
            let mut union = BTreeSet::new();
            for f in 0..k {
                for id in plan.fold_ids(f) {
                    prop_assert!(union.insert(id));
                }
            }
            prop_assert_eq!(union.into_iter().collect::<Vec<_>>(), all);
            let sizes = plan.fold_sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
