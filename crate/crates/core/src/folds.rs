//! Subject-independent cross-validation folds.
//!
//! Fold 0 is the original validation partition. Training trials are grouped
//! by subject and the groups are packed greedily, largest first, into folds
//! 1 to 5, each group going to the currently smallest fold.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ManifestRow, Partition};

pub const NUM_FOLDS: usize = 6;

#[derive(Debug, Error)]
pub enum FoldError {
    #[error("subject {subject} has {trials} training trials, more than the fold capacity {capacity}")]
    SubjectSplitImpossible {
        subject: String,
        trials: usize,
        capacity: usize,
    },
    #[error("subject {0} appears in both the training and validation partitions")]
    SubjectInBothPartitions(String),
    #[error("trial {0} listed more than once")]
    DuplicateTrial(String),
    #[error("fold index {0} out of range")]
    BadFold(usize),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Trial ids per fold; `folds[0]` is the original validation partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct FoldRow {
    trial_id: String,
    fold: usize,
}

impl FoldPlan {
    pub fn sizes(&self) -> Vec<usize> {
        self.folds.iter().map(Vec::len).collect()
    }

    pub fn fold_of(&self, trial_id: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.iter().any(|t| t == trial_id))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FoldError> {
        let mut w = csv::Writer::from_path(path)?;
        for (fold, ids) in self.folds.iter().enumerate() {
            for trial_id in ids {
                w.serialize(FoldRow {
                    trial_id: trial_id.clone(),
                    fold,
                })?;
            }
        }
        w.flush().map_err(|e| FoldError::Csv(e.into()))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FoldError> {
        let mut folds = vec![Vec::new(); NUM_FOLDS];
        let mut reader = csv::Reader::from_path(path)?;
        for row in reader.deserialize::<FoldRow>() {
            let row = row?;
            let fold = folds.get_mut(row.fold).ok_or(FoldError::BadFold(row.fold))?;
            fold.push(row.trial_id);
        }
        let plan = FoldPlan { folds };
        let mut seen: Vec<&String> = plan.folds.iter().flatten().collect();
        seen.sort();
        if let Some(dup) = seen.windows(2).find(|w| w[0] == w[1]) {
            return Err(FoldError::DuplicateTrial(dup[0].clone()));
        }
        Ok(plan)
    }
}

/// Builds the six-fold plan. Test-partition rows are ignored.
pub fn make_folds(manifest: &[ManifestRow], seed: u64) -> Result<FoldPlan, FoldError> {
    let mut folds = vec![Vec::new(); NUM_FOLDS];
    let mut groups: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for row in manifest {
        if !seen.insert(row.trial_id.as_str()) {
            return Err(FoldError::DuplicateTrial(row.trial_id.clone()));
        }
        match row.partition {
            Partition::Validation => folds[0].push(row.trial_id.clone()),
            Partition::Train => groups.entry(&row.subject_id).or_default().push(row.trial_id.clone()),
            Partition::Test => {}
        }
    }
    for row in manifest.iter().filter(|r| r.partition == Partition::Validation) {
        if groups.contains_key(row.subject_id.as_str()) {
            return Err(FoldError::SubjectInBothPartitions(row.subject_id.clone()));
        }
    }

    let n_train: usize = groups.values().map(Vec::len).sum();
    let capacity = n_train.div_ceil(NUM_FOLDS - 1);
    let mut order: Vec<(&str, Vec<String>)> = groups.into_iter().collect();
    if let Some((subject, trials)) = order.iter().find(|(_, t)| t.len() > capacity) {
        return Err(FoldError::SubjectSplitImpossible {
            subject: subject.to_string(),
            trials: trials.len(),
            capacity,
        });
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by(|a, b| b.1.len().cmp(&a.1.len()));
    for (_, trials) in order {
        let target = (1..NUM_FOLDS)
            .min_by_key(|&f| (folds[f].len(), f))
            .expect("five training folds");
        folds[target].extend(trials);
    }
    Ok(FoldPlan { folds })
}
