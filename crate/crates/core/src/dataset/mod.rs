//! Patient records, manifests, subset filtering, fold stratification, group
//! statistics and the synthetic phantom generator.

mod folds;
mod phantom;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::volcore::nifti_io;

pub use folds::{stratified_folds, FoldAssignment, FoldRotation};
pub use phantom::{cohort_specs, generate_phantom, write_cohort, CohortSpec, PhantomSpec};

/// Where the patient was followed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Hospital,
    Clinic,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Hospital => "hospital",
            Origin::Clinic => "clinic",
        }
    }
}

impl std::str::FromStr for Origin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hospital" => Ok(Origin::Hospital),
            "clinic" => Ok(Origin::Clinic),
            other => Err(Error::Data(format!("unknown origin `{other}` (expected hospital or clinic)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub origin: Origin,
    pub slice_thickness_mm: f64,
    /// Ground-truth tumor volume.
    pub tumor_volume_ml: f64,
    pub fold: Option<usize>,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.slice_thickness_mm.is_finite() && self.slice_thickness_mm > 0.0) {
            return Err(Error::Data(format!(
                "{}: slice thickness must be positive, got {}",
                self.id, self.slice_thickness_mm
            )));
        }
        if !(self.tumor_volume_ml.is_finite() && self.tumor_volume_ml >= 0.0) {
            return Err(Error::Data(format!(
                "{}: tumor volume must be non-negative, got {}",
                self.id, self.tumor_volume_ml
            )));
        }
        Ok(())
    }
}

/// Thin-slice subset (DS1) or everything (DS2).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Subset {
    #[default]
    DS1,
    DS2,
}

impl Subset {
    /// Slice-thickness bound of the subset.
    pub fn max_thickness_mm(self) -> f64 {
        match self {
            Subset::DS1 => DS1_MAX_THICKNESS_MM,
            Subset::DS2 => f64::INFINITY,
        }
    }
}

pub const DS1_MAX_THICKNESS_MM: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub records: Vec<PatientRecord>,
    pub subset: Subset,
}

impl DatasetIndex {
    pub fn new(records: Vec<PatientRecord>, subset: Subset) -> Result<Self> {
        for r in &records {
            r.validate()?;
            if r.slice_thickness_mm > subset.max_thickness_mm() {
                return Err(Error::Data(format!(
                    "{} has {} mm slices, outside {subset:?}",
                    r.id, r.slice_thickness_mm
                )));
            }
        }
        Ok(Self { records, subset })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PatientRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

/// Keeps records with slice thickness at most `max_thickness_mm`.
pub fn filter_subset(index: &DatasetIndex, max_thickness_mm: f64) -> DatasetIndex {
    let subset = if max_thickness_mm <= DS1_MAX_THICKNESS_MM {
        Subset::DS1
    } else {
        Subset::DS2
    };
    DatasetIndex {
        records: index
            .records
            .iter()
            .filter(|r| r.slice_thickness_mm <= max_thickness_mm)
            .cloned()
            .collect(),
        subset,
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct ManifestRow {
    id: String,
    image: PathBuf,
    mask: PathBuf,
    origin: String,
    slice_thickness_mm: f64,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads a manifest CSV (`id,image,mask,origin,slice_thickness_mm`); relative
/// paths are resolved against the manifest's directory and tumor volumes are
/// measured from the masks. Mask reads run on scoped worker threads.
pub fn load_manifest(path: &Path) -> Result<DatasetIndex> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path)?;
    let mut records = Vec::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row?;
        records.push(PatientRecord {
            origin: row.origin.parse()?,
            image: resolve(base, &row.image),
            mask: resolve(base, &row.mask),
            id: row.id,
            slice_thickness_mm: row.slice_thickness_mm,
            tumor_volume_ml: 0.0,
            fold: None,
        });
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(records.len().max(1));
    let chunk = records.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks_mut(chunk)
            .map(|part| {
                s.spawn(move || -> Result<()> {
                    for r in part {
                        r.tumor_volume_ml = nifti_io::read_mask(&r.mask)?.0.volume_ml();
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .try_for_each(|h| h.join().unwrap_or_else(|_| Err(Error::Data("manifest worker panicked".into()))))
    })?;
    let subset = if records.iter().all(|r| r.slice_thickness_mm <= DS1_MAX_THICKNESS_MM) {
        Subset::DS1
    } else {
        Subset::DS2
    };
    DatasetIndex::new(records, subset)
}

/// Writes a manifest with paths relative to the manifest directory when possible.
pub fn write_manifest(path: &Path, records: &[PatientRecord]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        let rel = |p: &Path| p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
        w.serialize(ManifestRow {
            id: r.id.clone(),
            image: rel(&r.image),
            mask: rel(&r.mask),
            origin: r.origin.as_str().into(),
            slice_thickness_mm: r.slice_thickness_mm,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    TumorVolume,
    SliceThickness,
}

impl Covariate {
    pub fn of(self, r: &PatientRecord) -> f64 {
        match self {
            Covariate::TumorVolume => r.tumor_volume_ml,
            Covariate::SliceThickness => r.slice_thickness_mm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
}

/// Welch's unequal-variance two-sample t-test, two-sided.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "t-test needs at least two values per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let moments = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (n, mean, var)
    };
    let (na, ma, va) = moments(a);
    let (nb, mb, vb) = moments(b);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if ma == mb {
        return Ok(TTest {
            t: 0.0,
            p: 1.0,
            df: (na + nb - 2.0),
        });
    }
    if se2 == 0.0 {
        return Ok(TTest {
            t: f64::INFINITY.copysign(ma - mb),
            p: 0.0,
            df: na + nb - 2.0,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric(e.to_string()))?;
    let p = 2.0 * dist.sf(t.abs());
    Ok(TTest { t, p: p.min(1.0), df })
}

/// Compares a covariate between hospital and clinic patients.
pub fn group_ttest(index: &DatasetIndex, covariate: Covariate) -> Result<TTest> {
    let group = |o: Origin| -> Vec<f64> {
        index
            .records
            .iter()
            .filter(|r| r.origin == o)
            .map(|r| covariate.of(r))
            .collect()
    };
    welch_ttest(&group(Origin::Hospital), &group(Origin::Clinic))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(id: &str, thickness: f64, volume: f64, origin: Origin) -> PatientRecord {
        PatientRecord {
            id: id.into(),
            image: PathBuf::new(),
            mask: PathBuf::new(),
            origin,
            slice_thickness_mm: thickness,
            tumor_volume_ml: volume,
            fold: None,
        }
    }

    #[test]
    fn filter_by_thickness() {
        let idx = DatasetIndex::new(
            vec![
                record("a", 1.0, 1.0, Origin::Hospital),
                record("b", 3.0, 1.0, Origin::Clinic),
            ],
            Subset::DS2,
        )
        .unwrap();
        let ds1 = filter_subset(&idx, 2.0);
        assert_eq!(ds1.subset, Subset::DS1);
        assert_eq!(ds1.records.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["a"]);
        assert_eq!(filter_subset(&idx, f64::INFINITY).records, idx.records);
    }

    #[test]
    fn thick_slices_are_rejected_in_ds1() {
        let r = vec![record("b", 3.0, 1.0, Origin::Clinic)];
        assert!(DatasetIndex::new(r, Subset::DS1).is_err());
        assert!(record("c", 0.0, 1.0, Origin::Clinic).validate().is_err());
    }

    #[test]
    fn welch_identical_groups() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let t = welch_ttest(&a, &a).unwrap();
        assert_eq!((t.t, t.p), (0.0, 1.0));
        assert!(welch_ttest(&[1.0], &a).is_err());
    }

    #[test]
    fn welch_matches_reference_values() {
        // Reference from a hand calculation: means 3 and 6, variances 2.5 and 2.5, n = 5.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [4.0, 5.0, 6.0, 7.0, 8.0];
        let t = welch_ttest(&a, &b).unwrap();
        assert!((t.t + 3.0).abs() < 1e-12);
        assert!((t.df - 8.0).abs() < 1e-12);
        // Two-sided p for |t| = 3 with 8 degrees of freedom.
        assert!((t.p - 0.017_071_68).abs() < 1e-7, "{}", t.p);
    }

    #[test]
    fn origin_parses_case_insensitively() {
        assert_eq!("Hospital".parse::<Origin>().unwrap(), Origin::Hospital);
        assert!("ward".parse::<Origin>().is_err());
    }
}
