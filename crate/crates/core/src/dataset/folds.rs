use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetIndex;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    /// Record id → fold index.
    pub mapping: BTreeMap<String, usize>,
}

/// Folds used for one cross-validation run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldRotation {
    pub train: Vec<usize>,
    pub validation: usize,
    pub test: usize,
}

impl FoldAssignment {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.mapping.get(id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.mapping.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Ids in `fold`, in id order.
    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.mapping
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Run `i` tests on fold `i`, validates on fold `(i + 1) mod k` and trains
    /// on the rest. With `k = 2` there is no training fold left, so the
    /// validation fold doubles as training data; `k = 1` uses fold 0 throughout.
    pub fn rotation(&self, i: usize) -> Result<FoldRotation> {
        if i >= self.k {
            return Err(Error::InvalidArgument(format!("fold {i} out of range for k = {}", self.k)));
        }
        let validation = (i + 1) % self.k;
        let mut train: Vec<usize> = (0..self.k).filter(|&f| f != i && f != validation).collect();
        if train.is_empty() {
            train.push(validation);
        }
        Ok(FoldRotation {
            train,
            validation,
            test: i,
        })
    }

    /// Copies fold indices onto the records of `index`.
    pub fn apply(&self, index: &mut DatasetIndex) {
        for r in &mut index.records {
            r.fold = self.fold_of(&r.id);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a: FoldAssignment = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if a.k == 0 || a.mapping.values().any(|&f| f >= a.k) {
            return Err(Error::Data(format!("{} has fold indices outside 0..{}", path.display(), a.k)));
        }
        Ok(a)
    }
}

/// Volume-stratified assignment: records sorted by (tumor volume, id) are cut
/// into `bins` equal-population bins; each bin is shuffled with `seed` and
/// dealt round-robin, the dealing position carrying over between bins.
pub fn stratified_folds(index: &DatasetIndex, k: usize, bins: usize, seed: u64) -> Result<FoldAssignment> {
    let n = index.records.len();
    if n == 0 {
        return Err(Error::Data("cannot build folds for an empty index".into()));
    }
    if k == 0 || bins == 0 {
        return Err(Error::InvalidArgument(format!("k and bins must be >= 1, got {k} and {bins}")));
    }
    if n < k {
        return Err(Error::Data(format!("{n} records cannot fill {k} folds")));
    }
    let mut order: Vec<(f64, &str)> = index
        .records
        .iter()
        .map(|r| (r.tumor_volume_ml, r.id.as_str()))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mapping = BTreeMap::new();
    let mut next = 0usize;
    for b in 0..bins {
        let mut bin: Vec<&str> = order[b * n / bins..(b + 1) * n / bins].iter().map(|&(_, id)| id).collect();
        bin.shuffle(&mut rng);
        for id in bin {
            if mapping.insert(id.to_string(), next % k).is_some() {
                return Err(Error::Data(format!("duplicate record id `{id}`")));
            }
            next += 1;
        }
    }
    Ok(FoldAssignment { k, seed, mapping })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Origin, PatientRecord, Subset};

    fn index(volumes: &[f64]) -> DatasetIndex {
        DatasetIndex {
            records: volumes
                .iter()
                .enumerate()
                .map(|(i, &v)| PatientRecord {
                    id: format!("p{i:03}"),
                    image: Default::default(),
                    mask: Default::default(),
                    origin: Origin::Hospital,
                    slice_thickness_mm: 1.0,
                    tumor_volume_ml: v,
                    fold: None,
                })
                .collect(),
            subset: Subset::DS1,
        }
    }

    #[test]
    fn fifteen_records_one_per_bin_per_fold() {
        let idx = index(&(0..15).map(|i| i as f64).collect::<Vec<_>>());
        let a = stratified_folds(&idx, 5, 3, 9).unwrap();
        for f in 0..5 {
            let mut bins: Vec<usize> = a
                .members(f)
                .iter()
                .map(|id| idx.get(id).unwrap().tumor_volume_ml as usize / 5)
                .collect();
            bins.sort();
            assert_eq!(bins, vec![0, 1, 2]);
        }
    }

    #[test]
    fn single_fold_and_errors() {
        let idx = index(&[1.0, 2.0, 3.0]);
        let a = stratified_folds(&idx, 1, 3, 0).unwrap();
        assert!(a.mapping.values().all(|&f| f == 0));
        assert!(stratified_folds(&index(&[]), 5, 3, 0).is_err());
        assert!(stratified_folds(&idx, 5, 3, 0).is_err());
    }

    #[test]
    fn rotation_order() {
        let a = FoldAssignment {
            k: 5,
            seed: 0,
            mapping: BTreeMap::new(),
        };
        assert_eq!(
            a.rotation(4).unwrap(),
            FoldRotation {
                train: vec![1, 2, 3],
                validation: 0,
                test: 4
            }
        );
        assert!(a.rotation(5).is_err());
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("folds.json");
        let a = stratified_folds(&index(&[3.0, 1.0, 2.0, 5.0, 4.0, 0.5]), 3, 3, 42).unwrap();
        a.save(&p).unwrap();
        assert_eq!(FoldAssignment::load(&p).unwrap(), a);
    }
}
