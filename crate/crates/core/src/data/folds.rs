use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::manifest::DatasetManifest;
use crate::error::{Error, Result};
use crate::seed::{rng_for, TAG_FOLDS};

/// Patient-wise partition into cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub n_folds: usize,
    pub map: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, patient_id: &str) -> Option<usize> {
        self.map.get(patient_id).copied()
    }

    pub fn patients_in(&self, fold: usize) -> Vec<&str> {
        self.map
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    /// Indices of manifest entries whose patient falls in `fold`.
    pub fn images_in(&self, manifest: &DatasetManifest, fold: usize) -> Vec<usize> {
        manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| self.fold_of(&e.patient_id) == Some(fold))
            .map(|(i, _)| i)
            .collect()
    }

    /// Stable digest of the assignment, for logging controlled comparisons.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (patient, fold) in &self.map {
            hasher.update(format!("{patient}\t{fold}\n").as_bytes());
        }
        hasher
            .finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        self.map.iter().map(|(p, f)| format!("{p}\t{f}\n")).collect()
    }

    /// Parses `patient<TAB>fold` lines written by [`FoldAssignment::to_tsv`].
    pub fn from_tsv(text: &str, n_folds: usize) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::Format(format!("fold table line {}: `{line}`", n + 1));
            let (patient, fold) = line.split_once('\t').ok_or_else(bad)?;
            let fold: usize = fold.parse().map_err(|_| bad())?;
            if fold >= n_folds || map.insert(patient.to_string(), fold).is_some() {
                return Err(bad());
            }
        }
        Ok(FoldAssignment { n_folds, map })
    }
}

/// Shuffles the distinct patients by `seed` and deals them round-robin.
pub fn split_folds(manifest: &DatasetManifest, n_folds: usize, seed: u64) -> Result<FoldAssignment> {
    if n_folds < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {n_folds}")));
    }
    let patients: BTreeSet<&str> = manifest.entries.iter().map(|e| e.patient_id.as_str()).collect();
    if patients.len() < n_folds {
        return Err(Error::Data(format!(
            "{} distinct patients cannot fill {n_folds} folds",
            patients.len()
        )));
    }
    let mut order: Vec<&str> = patients.into_iter().collect();
    order.shuffle(&mut rng_for(seed, &[TAG_FOLDS]));
    let map = order
        .into_iter()
        .enumerate()
        .map(|(i, p)| (p.to_string(), i % n_folds))
        .collect();
    Ok(FoldAssignment { n_folds, map })
}
