//! Cross-validation splits and resting-state sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{DataError, EegDataset, EegTrial};
use crate::SeededRng;

/// Trial ids of one fold. Each list is sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles each class with a seeded generator and cuts it into `k` equal
/// blocks. Fold `f` tests on block `f`, validates on block `(f + 1) % k`
/// and trains on the rest. Resting trials never appear.
pub fn split_folds(ds: &EegDataset, k: usize, seed: u64) -> Result<Vec<FoldSplit>, DataError> {
    if k < 3 {
        return Err(DataError::TooFewFolds(k));
    }
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut blocks: Vec<Vec<Vec<usize>>> = Vec::with_capacity(ds.n_classes());
    for class in 0..ds.n_classes() {
        let mut ids: Vec<usize> = ds.trials_of_class(class).map(|t| t.trial_id).collect();
        if ids.is_empty() || ids.len() % k != 0 {
            return Err(DataError::IndivisibleClass { class, count: ids.len(), k });
        }
        ids.shuffle(&mut rng);
        blocks.push(ids.chunks(ids.len() / k).map(<[usize]>::to_vec).collect());
    }
    let folds = (0..k)
        .map(|fold| {
            let val_block = (fold + 1) % k;
            let mut split = FoldSplit { fold, train: Vec::new(), val: Vec::new(), test: Vec::new() };
            for class_blocks in &blocks {
                for (b, block) in class_blocks.iter().enumerate() {
                    let dst = if b == fold {
                        &mut split.test
                    } else if b == val_block {
                        &mut split.val
                    } else {
                        &mut split.train
                    };
                    dst.extend_from_slice(block);
                }
            }
            split.train.sort_unstable();
            split.val.sort_unstable();
            split.test.sort_unstable();
            split
        })
        .collect();
    Ok(folds)
}

/// `n` resting trials drawn uniformly with replacement.
pub fn sample_resting_batch<'d, R: Rng + ?Sized>(
    ds: &'d EegDataset,
    n: usize,
    rng: &mut R,
) -> Result<Vec<&'d EegTrial>, DataError> {
    if ds.resting.is_empty() {
        return Err(DataError::EmptyRestingPool);
    }
    Ok((0..n).map(|_| &ds.resting[rng.random_range(0..ds.resting.len())]).collect())
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::data::{synthesize_sparse_dataset, SynthConfig};

    fn dataset(per_class: usize) -> EegDataset {
        synthesize_sparse_dataset(&SynthConfig {
            trials_per_class: per_class,
            n_channels: 2,
            trial_samples: 8,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn reference_counts() {
        let ds = dataset(50);
        let folds = split_folds(&ds, 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        let mut tested = HashSet::new();
        for f in &folds {
            assert_eq!((f.train.len(), f.val.len(), f.test.len()), (180, 60, 60));
            for class in 0..6 {
                let count = |ids: &[usize]| ids.iter().filter(|&&id| ds.trial(id).unwrap().class() == Some(class)).count();
                assert_eq!((count(&f.train), count(&f.val), count(&f.test)), (30, 10, 10));
            }
            let all: HashSet<_> = f.train.iter().chain(&f.val).chain(&f.test).collect();
            assert_eq!(all.len(), 300);
            for id in &f.test {
                assert!(tested.insert(*id), "trial {id} tested twice");
            }
        }
        assert_eq!(tested.len(), 300);
        let resting: HashSet<_> = ds.resting.iter().map(|t| t.trial_id).collect();
        assert!(tested.is_disjoint(&resting));
    }

    #[test]
    fn rejects_bad_k() {
        let ds = dataset(50);
        assert!(matches!(split_folds(&ds, 1, 0), Err(DataError::TooFewFolds(1))));
        assert!(matches!(split_folds(&ds, 2, 0), Err(DataError::TooFewFolds(2))));
        assert!(matches!(split_folds(&ds, 3, 0), Err(DataError::IndivisibleClass { count: 50, .. })));
    }

    #[test]
    fn seeded() {
        let ds = dataset(10);
        assert_eq!(split_folds(&ds, 5, 9).unwrap(), split_folds(&ds, 5, 9).unwrap());
        assert_ne!(split_folds(&ds, 5, 9).unwrap(), split_folds(&ds, 5, 10).unwrap());
    }

    #[test]
    fn resting_sampling() {
        let ds = dataset(5);
        let mut rng = SeededRng::seed_from_u64(1);
        assert!(sample_resting_batch(&ds, 0, &mut rng).unwrap().is_empty());
        let batch = sample_resting_batch(&ds, 100, &mut rng).unwrap();
        assert_eq!(batch.len(), 100);
        let pool: HashSet<_> = ds.resting.iter().map(|t| t.trial_id).collect();
        assert!(batch.iter().all(|t| pool.contains(&t.trial_id)));

        let ids = |seed| {
            let mut rng = SeededRng::seed_from_u64(seed);
            sample_resting_batch(&ds, 20, &mut rng).unwrap().iter().map(|t| t.trial_id).collect::<Vec<_>>()
        };
        assert_eq!(ids(4), ids(4));

        let mut empty = ds.clone();
        empty.resting.clear();
        assert!(matches!(sample_resting_batch(&empty, 1, &mut rng), Err(DataError::EmptyRestingPool)));
    }
}
