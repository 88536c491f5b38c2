//! Subject-grouped, label-stratified k-fold assignment.
//!
//! Every scan of a subject lands in the subject's fold, so no subject is
//! ever on both sides of a train/test split. Within each class, subjects are
//! shuffled with a seeded generator and dealt round-robin, which keeps the
//! per-class fold sizes within one subject of each other.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, VolumeRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: BTreeMap<String, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FoldRow {
    subject_id: String,
    fold: usize,
}

pub fn stratified_group_kfold(manifest: &Manifest, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Argument(format!("k must be at least 2, got {k}")));
    }
    manifest.validate()?;
    let mut by_class: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for (subject, label) in manifest.subjects() {
        by_class[label as usize].push(subject);
    }
    for (label, subjects) in by_class.iter().enumerate() {
        if subjects.len() < k {
            return Err(Error::Argument(format!(
                "class {label} has {} subjects, fewer than k = {k}",
                subjects.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = BTreeMap::new();
    // Continue dealing where the previous class stopped so total fold sizes
    // stay balanced as well.
    let mut next = 0usize;
    for subjects in by_class.iter_mut() {
        subjects.shuffle(&mut rng);
        for s in subjects.iter() {
            folds.insert(s.to_string(), next % k);
            next += 1;
        }
    }
    Ok(FoldAssignment { k, folds })
}

impl FoldAssignment {
    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.folds.get(subject).copied()
    }

    pub fn subjects_in(&self, fold: usize) -> Vec<&str> {
        self.folds
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    /// Splits manifest records into (train, test) for held-out `fold`.
    pub fn split<'a>(
        &self,
        manifest: &'a Manifest,
        fold: usize,
    ) -> Result<(Vec<&'a VolumeRecord>, Vec<&'a VolumeRecord>)> {
        if fold >= self.k {
            return Err(Error::Argument(format!(
                "fold {fold} out of range for k = {}",
                self.k
            )));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for r in &manifest.records {
            match self.fold_of(&r.subject_id) {
                Some(f) if f == fold => test.push(r),
                Some(_) => train.push(r),
                None => {
                    return Err(Error::Data(format!(
                        "subject {} has no fold assignment",
                        r.subject_id
                    )))
                }
            }
        }
        Ok((train, test))
    }

    /// Writes `subject_id,fold` rows ordered by subject id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (subject_id, &fold) in &self.folds {
            w.serialize(FoldRow {
                subject_id: subject_id.clone(),
                fold,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a fold file; `k` is taken as one more than the largest fold.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path.as_ref())?;
        let header: Vec<&str> = r.headers()?.iter().collect();
        if header != ["subject_id", "fold"] {
            return Err(Error::Format(
                "fold file header must be `subject_id,fold`".into(),
            ));
        }
        let mut folds = BTreeMap::new();
        for row in r.deserialize() {
            let row: FoldRow = row?;
            if folds.insert(row.subject_id.clone(), row.fold).is_some() {
                return Err(Error::Format(format!(
                    "subject {} listed twice",
                    row.subject_id
                )));
            }
        }
        let k = folds.values().max().map_or(0, |m| m + 1);
        if k < 2 {
            return Err(Error::Format(
                "fold file must describe at least 2 folds".into(),
            ));
        }
        Ok(Self { k, folds })
    }
}
