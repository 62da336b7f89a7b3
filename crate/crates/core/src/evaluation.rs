//! Two-threshold evaluation: a probability threshold (PT) binarizes each map,
//! a detection threshold (DT) on Dice decides detection. Components are paired
//! across prediction and ground truth for recall and precision; folds are
//! pooled with t-based confidence intervals.

use std::collections::HashMap;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::{Origin, PatientRecord, DS1_MAX_THICKNESS_MM};
use crate::error::{Error, Result};
use crate::volcore::{binarize, connected_components, Mask3D, ProbMap3D};

pub const PT_GRID: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
pub const DT_GRID: [f64; 4] = [0.0, 0.25, 0.5, 0.75];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub pt: f64,
    pub dt: f64,
}

impl OperatingPoint {
    /// Snaps to the grids; values off-grid by more than 1e-9 are rejected.
    pub fn new(pt: f64, dt: f64) -> Result<Self> {
        let snap = |v: f64, grid: &[f64], name: &str| {
            grid.iter()
                .copied()
                .find(|g| (g - v).abs() <= 1e-9)
                .ok_or_else(|| Error::InvalidArgument(format!("{name} {v} is not one of {grid:?}")))
        };
        Ok(Self {
            pt: snap(pt, &PT_GRID, "PT")?,
            dt: snap(dt, &DT_GRID, "DT")?,
        })
    }

    /// All 40 points, PT-major in ascending order.
    pub fn grid() -> impl Iterator<Item = OperatingPoint> {
        PT_GRID
            .iter()
            .flat_map(|&pt| DT_GRID.iter().map(move |&dt| OperatingPoint { pt, dt }))
    }
}

/// Plain Dice; two empty masks score 1.
pub fn dice(a: &Mask3D, b: &Mask3D) -> Result<f64> {
    check_aligned(a, b)?;
    let inter = a.data().iter().zip(b.data()).filter(|(&x, &y)| x == 1 && y == 1).count();
    Ok(dice_counts(inter, a.count(), b.count()))
}

fn dice_counts(inter: usize, a: usize, b: usize) -> f64 {
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

fn check_aligned(a: &Mask3D, b: &Mask3D) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::InvalidArgument(format!("grids differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Greedy one-to-one matching of components by pairwise Dice.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub n_gt: usize,
    pub n_pred: usize,
    /// `(gt component, pred component, pairwise dice)`, descending by dice.
    pub pairs: Vec<(usize, usize, f64)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentCounts {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
}

impl Matching {
    /// A matched pair is a true positive iff its Dice exceeds `dt`; everything
    /// else is a miss on the ground-truth side and a false alarm on the
    /// prediction side.
    pub fn counts(&self, dt: f64) -> ComponentCounts {
        let tp = self.pairs.iter().filter(|p| p.2 > dt).count();
        ComponentCounts {
            tp,
            fn_: self.n_gt - tp,
            fp: self.n_pred - tp,
        }
    }
}

pub fn match_components(gt: &Mask3D, pred: &Mask3D) -> Result<Matching> {
    check_aligned(gt, pred)?;
    let gc = connected_components(gt);
    let pc = connected_components(pred);
    let mut label = vec![usize::MAX; pred.len()];
    for (j, c) in pc.iter().enumerate() {
        for &v in &c.voxels {
            label[v] = j;
        }
    }
    let mut candidates = Vec::new();
    for (i, g) in gc.iter().enumerate() {
        let mut overlap: HashMap<usize, usize> = HashMap::new();
        for &v in &g.voxels {
            if label[v] != usize::MAX {
                *overlap.entry(label[v]).or_default() += 1;
            }
        }
        for (j, inter) in overlap {
            candidates.push((i, j, dice_counts(inter, g.size(), pc[j].size())));
        }
    }
    candidates.sort_by(|a, b| {
        b.2.total_cmp(&a.2)
            .then(gc[a.0].first().cmp(&gc[b.0].first()))
            .then(pc[a.1].first().cmp(&pc[b.1].first()))
    });
    let mut used_g = vec![false; gc.len()];
    let mut used_p = vec![false; pc.len()];
    let mut pairs = Vec::new();
    for (i, j, d) in candidates {
        if !used_g[i] && !used_p[j] {
            used_g[i] = true;
            used_p[j] = true;
            pairs.push((i, j, d));
        }
    }
    Ok(Matching {
        n_gt: gc.len(),
        n_pred: pc.len(),
        pairs,
    })
}

/// Component counts at detection threshold `dt`.
pub fn pair_components(gt: &Mask3D, pred: &Mask3D, dt: f64) -> Result<(ComponentCounts, Matching)> {
    let m = match_components(gt, pred)?;
    Ok((m.counts(dt), m))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResolutionClass {
    High,
    Low,
}

impl ResolutionClass {
    pub fn from_thickness(mm: f64) -> Self {
        if mm <= DS1_MAX_THICKNESS_MM {
            ResolutionClass::High
        } else {
            ResolutionClass::Low
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ResolutionClass::High => "high",
            ResolutionClass::Low => "low",
        }
    }
}

/// Per-case metadata carried into the results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseInfo {
    pub id: String,
    pub origin: Origin,
    pub slice_thickness_mm: f64,
}

impl From<&PatientRecord> for CaseInfo {
    fn from(r: &PatientRecord) -> Self {
        Self {
            id: r.id.clone(),
            origin: r.origin,
            slice_thickness_mm: r.slice_thickness_mm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientResult {
    pub id: String,
    pub dice: f64,
    pub detected: bool,
    pub component_tp: usize,
    pub component_fn: usize,
    pub component_fp: usize,
    pub volume_ml: f64,
    pub origin: Origin,
    pub resolution_class: ResolutionClass,
    /// Both masks empty; Dice set to 1.
    pub degenerate: bool,
}

/// Everything about one case at a fixed PT that does not depend on DT.
#[derive(Clone, Debug)]
pub struct PatientScore {
    info: CaseInfo,
    dice: f64,
    volume_ml: f64,
    degenerate: bool,
    matching: Matching,
}

impl PatientScore {
    pub fn new(info: &CaseInfo, prob: &ProbMap3D, gt: &Mask3D, pt: f64) -> Result<Self> {
        let pred = binarize(prob, pt);
        Self::from_masks(info, &pred, gt)
    }

    pub fn from_masks(info: &CaseInfo, pred: &Mask3D, gt: &Mask3D) -> Result<Self> {
        Ok(Self {
            info: info.clone(),
            dice: dice(pred, gt)?,
            volume_ml: gt.volume_ml(),
            degenerate: pred.count() + gt.count() == 0,
            matching: match_components(gt, pred)?,
        })
    }

    pub fn at(&self, dt: f64) -> PatientResult {
        let c = self.matching.counts(dt);
        PatientResult {
            id: self.info.id.clone(),
            dice: self.dice,
            detected: self.dice > dt,
            component_tp: c.tp,
            component_fn: c.fn_,
            component_fp: c.fp,
            volume_ml: self.volume_ml,
            origin: self.info.origin,
            resolution_class: ResolutionClass::from_thickness(self.info.slice_thickness_mm),
            degenerate: self.degenerate,
        }
    }
}

pub fn patient_metrics(info: &CaseInfo, prob: &ProbMap3D, gt: &Mask3D, op: OperatingPoint) -> Result<PatientResult> {
    Ok(PatientScore::new(info, prob, gt, op.pt)?.at(op.dt))
}

/// Cohort summary in percent; `None` marks an undefined value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortMetrics {
    pub n: usize,
    pub n_detected: usize,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub dice_mean: Option<f64>,
    pub dice_sd: Option<f64>,
    pub dice_tp_mean: Option<f64>,
    pub dice_tp_sd: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

/// Harmonic mean; undefined when either input is or both are zero.
pub fn f1_score(recall: Option<f64>, precision: Option<f64>) -> Option<f64> {
    let (r, p) = (recall?, precision?);
    (r + p > 0.0).then(|| 2.0 * r * p / (r + p))
}

/// Mean and sample standard deviation.
pub fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (n > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    (Some(mean), sd)
}

pub fn cohort_metrics(results: &[PatientResult]) -> CohortMetrics {
    let tp: usize = results.iter().map(|r| r.component_tp).sum();
    let fn_: usize = results.iter().map(|r| r.component_fn).sum();
    let fp: usize = results.iter().map(|r| r.component_fp).sum();
    let recall = ratio(tp, tp + fn_);
    let precision = ratio(tp, tp + fp);
    let dices: Vec<f64> = results.iter().map(|r| 100.0 * r.dice).collect();
    let tp_dices: Vec<f64> = results.iter().filter(|r| r.detected).map(|r| 100.0 * r.dice).collect();
    let (dice_mean, dice_sd) = mean_sd(&dices);
    let (dice_tp_mean, dice_tp_sd) = mean_sd(&tp_dices);
    CohortMetrics {
        n: results.len(),
        n_detected: tp_dices.len(),
        recall,
        precision,
        f1: f1_score(recall, precision),
        dice_mean,
        dice_sd,
        dice_tp_mean,
        dice_tp_sd,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Dice,
    DiceTp,
    F1,
    Recall,
    Precision,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Dice, Metric::DiceTp, Metric::F1, Metric::Recall, Metric::Precision];

    pub fn of(self, m: &CohortMetrics) -> Option<f64> {
        match self {
            Metric::Dice => m.dice_mean,
            Metric::DiceTp => m.dice_tp_mean,
            Metric::F1 => m.f1,
            Metric::Recall => m.recall,
            Metric::Precision => m.precision,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::DiceTp => "dice_tp",
            Metric::F1 => "f1",
            Metric::Recall => "recall",
            Metric::Precision => "precision",
        }
    }
}

/// One evaluated case: metadata, probability map and ground truth on a common grid.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub info: CaseInfo,
    pub prob: ProbMap3D,
    pub gt: Mask3D,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub point: OperatingPoint,
    pub metrics: CohortMetrics,
    pub results: Vec<PatientResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub cells: Vec<SweepCell>,
}

fn score_all(cases: &[EvalCase], pt: f64) -> Result<Vec<PatientScore>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(cases.len().max(1));
    let chunk = cases.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = cases
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|c| PatientScore::new(&c.info, &c.prob, &c.gt, pt)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(cases.len());
        for h in handles {
            out.extend(h.join().expect("scoring thread panicked")?);
        }
        Ok(out)
    })
}

/// Evaluates the full PT × DT grid.
pub fn sweep_operating_points(cases: &[EvalCase]) -> Result<Sweep> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("cannot sweep an empty cohort".into()));
    }
    let mut cells = Vec::with_capacity(PT_GRID.len() * DT_GRID.len());
    for &pt in &PT_GRID {
        let scores = score_all(cases, pt)?;
        for &dt in &DT_GRID {
            let results: Vec<PatientResult> = scores.iter().map(|s| s.at(dt)).collect();
            cells.push(SweepCell {
                point: OperatingPoint { pt, dt },
                metrics: cohort_metrics(&results),
                results,
            });
        }
    }
    Ok(Sweep { cells })
}

impl Sweep {
    /// Highest defined value of `metric`; ties go to lower PT, then lower DT.
    pub fn best(&self, metric: Metric) -> Option<&SweepCell> {
        let mut best: Option<(&SweepCell, f64)> = None;
        for c in &self.cells {
            if let Some(v) = metric.of(&c.metrics) {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((c, v));
                }
            }
        }
        best.map(|b| b.0)
    }

    pub fn cell(&self, op: OperatingPoint) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.point == op)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for c in &self.cells {
            w.serialize(MetricsRow::new(format!("{:.1}", c.point.pt), format!("{:.2}", c.point.dt), &c.metrics))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Flat CSV row of a [`CohortMetrics`]; undefined values are left empty.
#[derive(Clone, Debug, Serialize)]
struct MetricsRow {
    key: String,
    key2: String,
    n: usize,
    n_detected: usize,
    dice_mean: Option<f64>,
    dice_sd: Option<f64>,
    dice_tp_mean: Option<f64>,
    dice_tp_sd: Option<f64>,
    recall: Option<f64>,
    precision: Option<f64>,
    f1: Option<f64>,
}

impl MetricsRow {
    fn new(key: String, key2: String, m: &CohortMetrics) -> Self {
        Self {
            key,
            key2,
            n: m.n,
            n_detected: m.n_detected,
            dice_mean: m.dice_mean,
            dice_sd: m.dice_sd,
            dice_tp_mean: m.dice_tp_mean,
            dice_tp_sd: m.dice_tp_sd,
            recall: m.recall,
            precision: m.precision,
            f1: m.f1,
        }
    }
}

/// Pooled cross-fold estimate of one metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pooled {
    pub mean: f64,
    /// Standard deviation of the fold means.
    pub sd: Option<f64>,
    /// 95% interval; absent with a single fold.
    pub ci: Option<[f64; 2]>,
    pub k: usize,
}

/// Pools `(fold mean, patient count)` pairs: count-weighted mean, and
/// `mean ± t(k−1, 0.975)·sd/√k` over the fold means.
pub fn pool(folds: &[(f64, usize)]) -> Result<Pooled> {
    let total: usize = folds.iter().map(|f| f.1).sum();
    if folds.is_empty() || total == 0 {
        return Err(Error::InvalidArgument("nothing to pool".into()));
    }
    let k = folds.len();
    let mean = folds.iter().map(|(m, n)| m * *n as f64).sum::<f64>() / total as f64;
    if k == 1 {
        return Ok(Pooled { mean, sd: None, ci: None, k });
    }
    let means: Vec<f64> = folds.iter().map(|f| f.0).collect();
    let sd = mean_sd(&means).1.expect("k >= 2");
    let t = StudentsT::new(0.0, 1.0, (k - 1) as f64)
        .map_err(|e| Error::Numeric(e.to_string()))?
        .inverse_cdf(0.975);
    let half = t * sd / (k as f64).sqrt();
    Ok(Pooled {
        mean,
        sd: Some(sd),
        ci: Some([mean - half, mean + half]),
        k,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub n_patients: usize,
    pub metrics: CohortMetrics,
}

/// Pools every metric over the folds where it is defined.
pub fn pool_folds(folds: &[FoldSummary]) -> Result<Vec<(Metric, Option<Pooled>)>> {
    if folds.is_empty() {
        return Err(Error::InvalidArgument("no folds to pool".into()));
    }
    Metric::ALL
        .iter()
        .map(|&m| {
            let vals: Vec<(f64, usize)> = folds.iter().filter_map(|f| m.of(&f.metrics).map(|v| (v, f.n_patients))).collect();
            Ok((m, if vals.is_empty() { None } else { Some(pool(&vals)?) }))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grouping {
    Origin,
    Resolution,
    /// Equally populated bins by ascending ground-truth volume.
    VolumeBins(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub group: String,
    pub n: usize,
    pub volume_range_ml: Option<[f64; 2]>,
    /// Absent for empty groups.
    pub metrics: Option<CohortMetrics>,
}

/// Bin of each result by rank of `(volume, id)`: ranks `[b·n/k, (b+1)·n/k)` form bin `b`.
pub fn volume_bins(results: &[PatientResult], bins: usize) -> Vec<usize> {
    let n = results.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        results[a]
            .volume_ml
            .total_cmp(&results[b].volume_ml)
            .then_with(|| results[a].id.cmp(&results[b].id))
    });
    let mut bin = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        bin[i] = rank * bins / n.max(1);
    }
    bin
}

pub fn subgroup_report(results: &[PatientResult], grouping: Grouping) -> Result<Vec<SubgroupRow>> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("no results to group".into()));
    }
    let (names, keys): (Vec<String>, Vec<usize>) = match grouping {
        Grouping::Origin => (
            vec!["hospital".into(), "clinic".into()],
            results.iter().map(|r| usize::from(r.origin == Origin::Clinic)).collect(),
        ),
        Grouping::Resolution => (
            vec!["high".into(), "low".into()],
            results.iter().map(|r| usize::from(r.resolution_class == ResolutionClass::Low)).collect(),
        ),
        Grouping::VolumeBins(k) => {
            if k == 0 {
                return Err(Error::InvalidArgument("volume bins must be >= 1".into()));
            }
            ((0..k).map(|b| format!("bin{}", b + 1)).collect(), volume_bins(results, k))
        }
    };
    Ok(names
        .into_iter()
        .enumerate()
        .map(|(g, group)| {
            let members: Vec<PatientResult> = results.iter().zip(&keys).filter(|(_, &k)| k == g).map(|(r, _)| r.clone()).collect();
            let volume_range_ml = (!members.is_empty()).then(|| {
                members.iter().fold([f64::INFINITY, f64::NEG_INFINITY], |[lo, hi], r| [lo.min(r.volume_ml), hi.max(r.volume_ml)])
            });
            SubgroupRow {
                group,
                n: members.len(),
                volume_range_ml,
                metrics: (!members.is_empty()).then(|| cohort_metrics(&members)),
            }
        })
        .collect())
}

pub fn write_subgroups_csv(rows: &[SubgroupRow], path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        group: &'a str,
        n: usize,
        volume_min_ml: Option<f64>,
        volume_max_ml: Option<f64>,
        dice_mean: Option<f64>,
        dice_sd: Option<f64>,
        dice_tp_mean: Option<f64>,
        recall: Option<f64>,
        precision: Option<f64>,
        f1: Option<f64>,
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        let m = r.metrics.as_ref();
        w.serialize(Row {
            group: &r.group,
            n: r.n,
            volume_min_ml: r.volume_range_ml.map(|v| v[0]),
            volume_max_ml: r.volume_range_ml.map(|v| v[1]),
            dice_mean: m.and_then(|m| m.dice_mean),
            dice_sd: m.and_then(|m| m.dice_sd),
            dice_tp_mean: m.and_then(|m| m.dice_tp_mean),
            recall: m.and_then(|m| m.recall),
            precision: m.and_then(|m| m.precision),
            f1: m.and_then(|m| m.f1),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Mean Dice of the lower, middle and upper thirds of volume-bin rows
/// (bin `b` of `k` falls in third `3b/k`). Empty rows are skipped.
pub fn tercile_dice(rows: &[SubgroupRow]) -> [Option<f64>; 3] {
    let k = rows.len();
    let mut acc = [(0.0, 0usize); 3];
    for (b, r) in rows.iter().enumerate() {
        if let Some(d) = r.metrics.as_ref().and_then(|m| m.dice_mean) {
            let t = 3 * b / k;
            acc[t].0 += d;
            acc[t].1 += 1;
        }
    }
    acc.map(|(s, n)| (n > 0).then(|| s / n as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub n: usize,
    pub mean: f64,
    /// Percentile bootstrap 95% interval of the mean.
    pub ci: [f64; 2],
    pub resamples: usize,
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Dice between two annotations of the same case.
pub fn interannotator_dice(a: &Mask3D, b: &Mask3D) -> Result<f64> {
    dice(a, b)
}

/// Cohort mean of per-pair Dice values with a seeded bootstrap interval.
pub fn agreement_report(dices: &[f64], resamples: usize, seed: u64) -> Result<AgreementReport> {
    let n = dices.len();
    if n == 0 || resamples == 0 {
        return Err(Error::InvalidArgument("need at least one pair and one resample".into()));
    }
    let mean = dices.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| dices[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Ok(AgreementReport {
        n,
        mean,
        ci: [at(0.025), at(0.975)],
        resamples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volcore::Geometry;

    fn info(id: &str) -> CaseInfo {
        CaseInfo {
            id: id.into(),
            origin: Origin::Clinic,
            slice_thickness_mm: 1.0,
        }
    }

    fn boxes(dims: [usize; 3], boxes: &[([usize; 3], [usize; 3])]) -> Mask3D {
        Mask3D::from_fn(Geometry::unit(dims).unwrap(), |x, y, z| {
            boxes.iter().any(|(lo, hi)| {
                let p = [x, y, z];
                (0..3).all(|a| p[a] >= lo[a] && p[a] < hi[a])
            })
        })
        .unwrap()
    }

    #[test]
    fn grid_has_forty_points_and_snaps() {
        assert_eq!(OperatingPoint::grid().count(), 40);
        assert_eq!(OperatingPoint::new(0.6000000001, 0.25).unwrap().pt, 0.6);
        assert!(OperatingPoint::new(0.55, 0.25).is_err());
        assert!(OperatingPoint::new(0.5, 0.3).is_err());
    }

    #[test]
    fn counted_dice_and_detection() {
        let gt = boxes([10, 10, 10], &[([0, 0, 0], [6, 10, 1])]);
        let pm = Mask3D::from_fn(*gt.geometry(), |x, y, z| z == 0 && ((x < 3 && y < 10) || (x == 9 && y < 10))).unwrap();
        assert_eq!(pm.count(), 40);
        let d = dice(&pm, &gt).unwrap();
        assert!((d - 0.6).abs() < 1e-12);
        let at = |dt| patient_metrics(&info("b"), &ProbMap3D::from(&pm), &gt, OperatingPoint::new(0.5, dt).unwrap()).unwrap();
        assert!(at(0.5).detected);
        assert!(!at(0.75).detected);
    }

    #[test]
    fn empty_masks_are_degenerate_ones() {
        let e = boxes([4, 4, 4], &[]);
        let r = patient_metrics(&info("e"), &ProbMap3D::from(&e), &e, OperatingPoint::new(0.5, 0.0).unwrap()).unwrap();
        assert_eq!(r.dice, 1.0);
        assert!(r.degenerate && r.detected);
        let m = cohort_metrics(&[r]);
        assert_eq!((m.recall, m.precision, m.f1), (None, None, None));
    }

    #[test]
    fn multifocal_pairing() {
        let gt = boxes([20, 20, 20], &[([1, 1, 1], [6, 6, 6]), ([12, 12, 12], [15, 15, 15])]);
        let pred = boxes([20, 20, 20], &[([1, 1, 1], [6, 6, 6])]);
        let (c, m) = pair_components(&gt, &pred, 0.25).unwrap();
        assert_eq!(c, ComponentCounts { tp: 1, fn_: 1, fp: 0 });
        assert_eq!(m.pairs.len(), 1);
        let (c, _) = pair_components(&gt, &boxes([20, 20, 20], &[]), 0.0).unwrap();
        assert_eq!(c, ComponentCounts { tp: 0, fn_: 2, fp: 0 });
        let (c, _) = pair_components(&gt, &gt, 0.75).unwrap();
        assert_eq!(c, ComponentCounts { tp: 2, fn_: 0, fp: 0 });
    }

    #[test]
    fn table_relation_between_recall_precision_and_f1() {
        let f1 = f1_score(Some(83.22), Some(94.19)).unwrap();
        assert!((f1 - 88.366).abs() < 1e-3);
        assert!((f1 - 88.34).abs() < 0.1);
        assert_eq!(f1_score(Some(0.0), Some(0.0)), None);
    }

    #[test]
    fn perfect_cohort_ties_break_to_lowest_point() {
        let gt = boxes([8, 8, 8], &[([2, 2, 2], [5, 5, 5])]);
        let case = EvalCase {
            info: info("p"),
            prob: ProbMap3D::from(&gt),
            gt,
        };
        let s = sweep_operating_points(&[case.clone(), case]).unwrap();
        assert_eq!(s.cells.len(), 40);
        let best = s.best(Metric::F1).unwrap();
        assert_eq!(best.point, OperatingPoint { pt: 0.1, dt: 0.0 });
        assert_eq!(best.metrics.f1, Some(100.0));
        assert_eq!(best.metrics.dice_mean, Some(100.0));
        for c in s.cells.iter().filter(|c| c.point.pt < 1.0) {
            assert_eq!(c.metrics.f1, Some(100.0));
        }
    }

    #[test]
    fn identical_folds_have_zero_width_interval() {
        let p = pool(&[(80.0, 10), (80.0, 12), (80.0, 11)]).unwrap();
        assert_eq!(p.ci, Some([80.0, 80.0]));
        let single = pool(&[(70.0, 5)]).unwrap();
        assert_eq!((single.mean, single.ci), (70.0, None));
    }

    #[test]
    fn eroded_cube_agreement() {
        let a = boxes([12, 12, 12], &[([1, 1, 1], [11, 11, 11])]);
        let b = boxes([12, 12, 12], &[([2, 2, 2], [10, 10, 10])]);
        let d = interannotator_dice(&a, &b).unwrap();
        assert!((d - 1024.0 / 1512.0).abs() < 1e-12);
        assert_eq!(interannotator_dice(&a, &a).unwrap(), 1.0);
        let far = boxes([12, 12, 12], &[([0, 0, 0], [1, 1, 1])]);
        assert_eq!(interannotator_dice(&b, &far).unwrap(), 0.0);
    }

    #[test]
    fn bootstrap_is_seeded_and_brackets_the_mean() {
        let d: Vec<f64> = (0..30).map(|i| 0.8 + 0.005 * i as f64).collect();
        let a = agreement_report(&d, BOOTSTRAP_RESAMPLES, 4).unwrap();
        assert_eq!(a, agreement_report(&d, BOOTSTRAP_RESAMPLES, 4).unwrap());
        assert!(a.ci[0] <= a.mean && a.mean <= a.ci[1]);
    }
}
