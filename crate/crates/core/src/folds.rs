//! Stratified k-fold assignment.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{labels_in_order, CorpusRecord};
use crate::error::DataError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Fold index of every record, parallel to the input slice.
    pub assignment: Vec<usize>,
}

/// Shuffles each label's records and deals them round-robin. The starting
/// fold carries over from one label to the next so fold sizes stay within
/// one of each other overall as well as per label.
pub fn make_folds(records: &[CorpusRecord], k: usize, seed: u64) -> Result<FoldPlan, DataError> {
    if k < 2 {
        return Err(DataError::InvalidK(k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![usize::MAX; records.len()];
    let mut offset = 0;
    for label in labels_in_order(records) {
        let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].label == label).collect();
        if idx.len() < k {
            return Err(DataError::TooFewForFolds {
                label,
                count: idx.len(),
                k,
            });
        }
        idx.shuffle(&mut rng);
        for (j, &i) in idx.iter().enumerate() {
            assignment[i] = (offset + j) % k;
        }
        offset = (offset + idx.len()) % k;
    }
    Ok(FoldPlan { k, seed, assignment })
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != fold).collect()
    }

    /// Fold ids whose records are used for training when `fold` is held out.
    pub fn train_folds(&self, fold: usize) -> BTreeSet<usize> {
        (0..self.k).filter(|&f| f != fold).collect()
    }
}
