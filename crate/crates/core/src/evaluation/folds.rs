//! Stratified k-fold assignment and the train/validation/test rotation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::domain::{ClassCounts, Cohort, DataSplit, Label, PatientId, PatientRecord};
use crate::error::{Error, Result};
use crate::nn;

/// Fold index per patient. Normally a partition of the cohort; entries are
/// kept as a list so that a malformed assignment can still be represented
/// and rejected downstream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub entries: Vec<(PatientId, usize)>,
}

impl FoldAssignment {
    pub fn new(k: usize, entries: Vec<(PatientId, usize)>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if let Some((id, f)) = entries.iter().find(|(_, f)| *f >= k) {
            return Err(Error::Config(format!("patient {id} assigned to fold {f} with k = {k}")));
        }
        Ok(FoldAssignment { k, entries })
    }

    pub fn folds_of<'a>(&'a self, id: &'a PatientId) -> impl Iterator<Item = usize> + 'a {
        self.entries.iter().filter(move |(p, _)| p == id).map(|(_, f)| *f)
    }

    pub fn members(&self, fold: usize) -> Vec<&PatientId> {
        self.entries
            .iter()
            .filter(|(_, f)| *f == fold)
            .map(|(p, _)| p)
            .collect()
    }

    /// Per-fold class counts over the cohort.
    pub fn class_counts(&self, cohort: &Cohort) -> Vec<ClassCounts> {
        let labels: BTreeMap<&PatientId, Label> = cohort.records.iter().map(|r| (&r.patient_id, r.label)).collect();
        (0..self.k)
            .map(|f| ClassCounts::of(self.members(f).into_iter().filter_map(|id| labels.get(id))))
            .collect()
    }

    /// True when every cohort patient appears in exactly one fold and no
    /// unknown patient appears.
    pub fn is_partition_of(&self, cohort: &Cohort) -> bool {
        let ids: BTreeSet<&PatientId> = cohort.records.iter().map(|r| &r.patient_id).collect();
        let assigned: BTreeSet<&PatientId> = self.entries.iter().map(|(p, _)| p).collect();
        assigned.len() == self.entries.len() && assigned == ids
    }

    /// Rotation `r`: fold `r` tests, fold `r + 1 (mod k)` validates, the rest train.
    pub fn split<'a>(&self, cohort: &'a Cohort, rotation: usize) -> Result<FoldSplit<'a>> {
        if self.k < 3 {
            return Err(Error::Config(format!(
                "train/validation/test rotation needs k >= 3, got {}",
                self.k
            )));
        }
        if rotation >= self.k {
            return Err(Error::Config(format!(
                "rotation {rotation} out of range for k = {}",
                self.k
            )));
        }
        let test_fold = rotation;
        let validation_fold = (rotation + 1) % self.k;
        let by_id: BTreeMap<&PatientId, &PatientRecord> = cohort.records.iter().map(|r| (&r.patient_id, r)).collect();
        let mut train = Vec::new();
        let mut validation = Vec::new();
        let mut test = Vec::new();
        for (id, f) in &self.entries {
            let rec = *by_id
                .get(id)
                .ok_or_else(|| Error::Config(format!("fold assignment names unknown patient {id}")))?;
            if *f == test_fold {
                test.push(rec);
            } else if *f == validation_fold {
                validation.push(rec);
            } else {
                train.push(rec);
            }
        }
        Ok(FoldSplit {
            dim: cohort.dim,
            test_fold,
            validation_fold,
            train,
            validation,
            test,
        })
    }
}

/// Patients of one rotation, by role.
#[derive(Debug, Clone)]
pub struct FoldSplit<'a> {
    pub dim: usize,
    pub test_fold: usize,
    pub validation_fold: usize,
    pub train: Vec<&'a PatientRecord>,
    pub validation: Vec<&'a PatientRecord>,
    pub test: Vec<&'a PatientRecord>,
}

impl<'a> FoldSplit<'a> {
    pub fn training(&self) -> DataSplit<'a> {
        DataSplit::new(self.dim, self.train.clone(), self.validation.clone())
    }

    pub fn test_ids(&self) -> BTreeSet<PatientId> {
        self.test.iter().map(|r| r.patient_id.clone()).collect()
    }
}

/// Shuffles each class with the seed and deals it round-robin over the folds;
/// the second class starts where the first left off, so fold sizes also stay
/// within one of each other. `k` equal to the cohort size gives leave-one-out.
pub fn stratified_kfold(cohort: &Cohort, k: usize, seed: u64) -> Result<FoldAssignment> {
    let n = cohort.len();
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if k > n {
        return Err(Error::Config(format!("k = {k} exceeds the cohort size {n}")));
    }
    let mut rng = nn::rng_from_seed(nn::derive_seed(seed, 0x464F_4C44));
    let mut entries = Vec::with_capacity(n);
    if k == n {
        let mut ids: Vec<&PatientId> = cohort.records.iter().map(|r| &r.patient_id).collect();
        ids.shuffle(&mut rng);
        entries.extend(ids.into_iter().enumerate().map(|(f, id)| (id.clone(), f)));
        return FoldAssignment::new(k, entries);
    }
    let mut offset = 0;
    for label in [Label::Msi, Label::Mss] {
        let mut ids: Vec<&PatientId> = cohort
            .records
            .iter()
            .filter(|r| r.label == label)
            .map(|r| &r.patient_id)
            .collect();
        if ids.len() < k {
            return Err(Error::Config(format!(
                "class {label} has {} patients, fewer than k = {k}",
                ids.len()
            )));
        }
        ids.shuffle(&mut rng);
        let m = ids.len();
        entries.extend(
            ids.into_iter()
                .enumerate()
                .map(|(i, id)| (id.clone(), (offset + i) % k)),
        );
        offset = (offset + m) % k;
    }
    FoldAssignment::new(k, entries)
}
