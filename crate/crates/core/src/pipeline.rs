//! Fold-level orchestration: loading and preprocessing cases, building
//! training examples, training one fold, predicting in original space and
//! assembling the evaluation report.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use volseg_nn::{checkpoint, Architecture, ModelHandle};

use crate::config::{RunConfig, SamplingConfig};
use crate::dataset::{filter_subset, load_manifest, stratified_folds, DatasetIndex, FoldAssignment, PatientRecord};
use crate::error::{Error, Result};
use crate::evaluation::{
    agreement_report, cohort_metrics, interannotator_dice, pool_folds, subgroup_report, sweep_operating_points, write_subgroups_csv, AgreementReport, CaseInfo,
    CohortMetrics, EvalCase, FoldSummary, Grouping, Metric, OperatingPoint, Pooled, SubgroupRow, Sweep,
};
use crate::preprocess::{invert_to_original, run_pipeline, PreprocessConfig, Preprocessed};
use crate::sampling::{balance_slabs, extract_slabs, slab_starts};
use crate::training::{predict_volume, train, volume_tensor, Example, Timing, TrainOptions, TrainingLog};
use crate::volcore::nifti_io::{read_mask, read_volume};
use crate::volcore::{Geometry, Mask3D, ProbMap3D, Volume3D};

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const TRAINING_LOG_FILE: &str = "training_log.csv";

pub fn fold_dir(run_dir: &Path, fold: usize) -> PathBuf {
    run_dir.join(format!("fold{fold}"))
}

/// A case in original space together with its preprocessed form.
#[derive(Clone, Debug)]
pub struct Case {
    pub record: PatientRecord,
    pub image: Volume3D,
    pub gt: Mask3D,
    pub prepared: Preprocessed,
}

impl Case {
    pub fn new(record: PatientRecord, image: Volume3D, gt: Mask3D, pre: &PreprocessConfig) -> Result<Self> {
        let prepared = run_pipeline(&image, Some(&gt), pre)?;
        Ok(Self {
            record,
            image,
            gt,
            prepared,
        })
    }

    pub fn load(record: &PatientRecord, pre: &PreprocessConfig) -> Result<Self> {
        let (image, _) = read_volume(&record.image)?;
        let (gt, _) = read_mask(&record.mask)?;
        Self::new(record.clone(), image, gt, pre)
    }

    fn example(&self) -> Example {
        Example {
            image: self.prepared.volume.clone(),
            label: self.prepared.mask.clone().expect("cases are preprocessed with their mask"),
        }
    }
}

pub fn load_cases(records: &[PatientRecord], pre: &PreprocessConfig) -> Result<Vec<Case>> {
    records.iter().map(|r| Case::load(r, pre)).collect()
}

/// Whole volumes for PLS-Net; balanced slabs for U-Net.
pub fn training_examples(cases: &[&Case], sampling: &SamplingConfig, arch: Architecture, seed: u64) -> Result<Vec<Example>> {
    match arch {
        Architecture::PlsNet => Ok(cases.iter().map(|c| c.example()).collect()),
        Architecture::UNet => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = Vec::new();
            for c in cases {
                let e = c.example();
                let slabs = extract_slabs(
                    &c.record.id,
                    &e.image,
                    &e.label,
                    sampling.depth,
                    sampling.stride,
                    sampling.min_positive_voxels,
                )?;
                out.extend(balance_slabs(slabs, sampling.neg_pos_ratio, &mut rng).into_iter().map(Example::from));
            }
            Ok(out)
        }
    }
}

/// Probability map on the preprocessed grid. U-Net predictions average the
/// overlapping slabs covering each slice.
pub fn predict_prepared(model: &ModelHandle, vol: &Volume3D, sampling: &SamplingConfig) -> Result<ProbMap3D> {
    if model.architecture() == Architecture::PlsNet {
        return predict_volume(model, vol);
    }
    let g = *vol.geometry();
    let [nx, ny, nz] = g.dims;
    let plane = nx * ny;
    let depth = sampling.depth;
    let fill = vol.min_max().0;
    let mut sum = vec![0f32; g.len()];
    let mut count = vec![0u32; nz];
    for z0 in slab_starts(nz, depth, sampling.stride) {
        let avail = nz.saturating_sub(z0).min(depth);
        let mut data = vec![fill; plane * depth];
        data[..avail * plane].copy_from_slice(&vol.data()[z0 * plane..(z0 + avail) * plane]);
        let slab = Volume3D::new(Geometry::new([nx, ny, depth], g.spacing, g.origin)?, data)?;
        let out = model.predict(&volume_tensor(&slab))?;
        let p = &out.data()[..avail * plane];
        for (s, v) in sum[z0 * plane..(z0 + avail) * plane].iter_mut().zip(p) {
            *s += v;
        }
        for c in &mut count[z0..z0 + avail] {
            *c += 1;
        }
    }
    for (z, &c) in count.iter().enumerate() {
        for s in &mut sum[z * plane..(z + 1) * plane] {
            *s /= c.max(1) as f32;
        }
    }
    ProbMap3D::clamped(g, sum)
}

/// Prediction mapped back onto the case's original grid.
pub fn predict_case(model: &ModelHandle, case: &Case, sampling: &SamplingConfig) -> Result<ProbMap3D> {
    let p = predict_prepared(model, &case.prepared.volume, sampling)?;
    invert_to_original(&p, &case.prepared.record)
}

pub fn eval_cases(model: &ModelHandle, cases: &[&Case], sampling: &SamplingConfig) -> Result<Vec<EvalCase>> {
    cases
        .iter()
        .map(|c| {
            Ok(EvalCase {
                info: CaseInfo::from(&c.record),
                prob: predict_case(model, c, sampling)?,
                gt: c.gt.clone(),
            })
        })
        .collect()
}

/// Cases of the given folds, in input order.
pub fn cases_in<'a>(cases: &'a [Case], assignment: &FoldAssignment, folds: &[usize]) -> Vec<&'a Case> {
    cases
        .iter()
        .filter(|c| assignment.fold_of(&c.record.id).is_some_and(|f| folds.contains(&f)))
        .collect()
}

/// Trains run `fold` of the rotation. With `run_dir`, the best checkpoint and
/// the epoch log are written under `fold<i>/`.
pub fn train_fold(
    cfg: &RunConfig,
    cases: &[Case],
    assignment: &FoldAssignment,
    fold: usize,
    run_dir: Option<&Path>,
) -> Result<(ModelHandle, TrainingLog)> {
    let rot = assignment.rotation(fold)?;
    let train_cases = cases_in(cases, assignment, &rot.train);
    let val_cases = cases_in(cases, assignment, &[rot.validation]);
    let seed = cfg.train.seed.wrapping_add(fold as u64);
    let arch = cfg.model.architecture();
    let train_set = training_examples(&train_cases, &cfg.sampling, arch, seed)?;
    let val_set = training_examples(&val_cases, &cfg.sampling, arch, seed ^ 0x5eed)?;
    let dir = run_dir.map(|d| fold_dir(d, fold));
    if let Some(d) = &dir {
        std::fs::create_dir_all(d)?;
    }
    let mut model = ModelHandle::build(cfg.model.clone(), seed)?;
    let opts = TrainOptions {
        config: crate::training::TrainConfig { seed, ..cfg.train.clone() },
        augment: cfg.augment.active().cloned(),
        device: cfg.device,
        checkpoint: dir.as_ref().map(|d| d.join(CHECKPOINT_FILE)),
    };
    let log = train(&mut model, &train_set, &val_set, &opts)?;
    if let Some(d) = &dir {
        log.write_csv(&d.join(TRAINING_LOG_FILE))?;
    }
    Ok((model, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestPoint {
    pub metric: Metric,
    pub point: OperatingPoint,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledMetric {
    pub metric: Metric,
    pub pooled: Option<Pooled>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub operating_point: OperatingPoint,
    pub best_points: Vec<BestPoint>,
    pub overall: CohortMetrics,
    pub folds: Vec<FoldSummary>,
    pub pooled: Vec<PooledMetric>,
    pub by_origin: Vec<SubgroupRow>,
    pub by_resolution: Vec<SubgroupRow>,
    pub by_volume: Vec<SubgroupRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agreement: Option<AgreementReport>,
}

/// Sweeps the pooled test predictions of every fold, fixes the operating
/// point (configured, or best for the target metric) and summarizes per fold
/// and per subgroup at that point.
pub fn evaluate_folds(cfg: &RunConfig, per_fold: &[(usize, Vec<EvalCase>)]) -> Result<(Sweep, EvaluationReport)> {
    let all: Vec<EvalCase> = per_fold.iter().flat_map(|(_, c)| c.iter().cloned()).collect();
    let sweep = sweep_operating_points(&all)?;
    let best_points: Vec<BestPoint> = Metric::ALL
        .iter()
        .filter_map(|&m| {
            sweep.best(m).map(|c| BestPoint {
                metric: m,
                point: c.point,
                value: m.of(&c.metrics).expect("best cell has a defined value"),
            })
        })
        .collect();
    let op = match cfg.operating_point() {
        Some(op) => op,
        None => best_points
            .iter()
            .find(|b| b.metric == cfg.evaluate.target)
            .map(|b| b.point)
            .ok_or_else(|| Error::Numeric(format!("{} is undefined at every operating point", cfg.evaluate.target.name())))?,
    };
    let cell = sweep.cell(op).expect("sweep covers the grid");
    let folds: Vec<FoldSummary> = per_fold
        .iter()
        .map(|(fold, cases)| {
            let results: Vec<_> = cell
                .results
                .iter()
                .filter(|r| cases.iter().any(|c| c.info.id == r.id))
                .cloned()
                .collect();
            FoldSummary {
                fold: *fold,
                n_patients: results.len(),
                metrics: cohort_metrics(&results),
            }
        })
        .collect();
    let pooled = pool_folds(&folds)?
        .into_iter()
        .map(|(metric, pooled)| PooledMetric { metric, pooled })
        .collect();
    let report = EvaluationReport {
        operating_point: op,
        best_points,
        overall: cell.metrics.clone(),
        folds,
        pooled,
        by_origin: subgroup_report(&cell.results, Grouping::Origin)?,
        by_resolution: subgroup_report(&cell.results, Grouping::Resolution)?,
        by_volume: subgroup_report(&cell.results, Grouping::VolumeBins(cfg.evaluate.volume_bins))?,
        timing: None,
        agreement: None,
    };
    Ok((sweep, report))
}

pub const SUMMARY_FILE: &str = "summary.json";

/// Contents of `summary.json`: the resolved configuration and the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: RunConfig,
    pub report: EvaluationReport,
}

impl Summary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes the sweep table, per-patient results, subgroup tables and a JSON
/// summary into `dir`.
pub fn write_report(dir: &Path, cfg: &RunConfig, sweep: &Sweep, report: &EvaluationReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    sweep.write_csv(&dir.join("sweep.csv"))?;
    let cell = sweep.cell(report.operating_point).expect("operating point on grid");
    let mut w = csv::Writer::from_path(dir.join("patients.csv"))?;
    for r in &cell.results {
        w.serialize(r)?;
    }
    w.flush()?;
    write_subgroups_csv(&report.by_origin, &dir.join("subgroups_origin.csv"))?;
    write_subgroups_csv(&report.by_resolution, &dir.join("subgroups_resolution.csv"))?;
    write_subgroups_csv(&report.by_volume, &dir.join("volume_bins.csv"))?;
    let summary = Summary {
        config: cfg.clone(),
        report: report.clone(),
    };
    std::fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

pub const FOLDS_FILE: &str = "folds.json";
pub const REPORT_DIR: &str = "report";

/// Manifest records restricted to the configured subset.
pub fn load_index(cfg: &RunConfig) -> Result<DatasetIndex> {
    let path = cfg
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("data.manifest is not set".into()))?;
    let index = filter_subset(&load_manifest(path)?, cfg.data.subset.max_thickness_mm());
    if index.is_empty() {
        return Err(Error::Data(format!(
            "no records of {} fall in subset {:?}",
            path.display(),
            cfg.data.subset
        )));
    }
    Ok(index)
}

/// Reuses `folds.json` in the run directory when present, otherwise
/// stratifies and writes it.
pub fn fold_assignment(cfg: &RunConfig, index: &DatasetIndex, run_dir: &Path) -> Result<FoldAssignment> {
    let path = run_dir.join(FOLDS_FILE);
    if path.exists() {
        let a = FoldAssignment::load(&path)?;
        if let Some(r) = index.records.iter().find(|r| a.fold_of(&r.id).is_none()) {
            return Err(Error::Data(format!("{} has no fold in {}", r.id, path.display())));
        }
        return Ok(a);
    }
    let a = stratified_folds(index, cfg.folds.k, cfg.folds.bins, cfg.folds.seed)?;
    std::fs::create_dir_all(run_dir)?;
    a.save(&path)?;
    Ok(a)
}

/// Trains the requested folds (all when `only` is `None`) into `cfg.out_dir`,
/// sequentially or on one thread per fold.
pub fn train_run(cfg: &RunConfig, only: Option<usize>, parallel: bool) -> Result<Vec<(usize, TrainingLog)>> {
    let run_dir = cfg.out_dir.as_path();
    cfg.save(run_dir)?;
    let index = load_index(cfg)?;
    let assignment = fold_assignment(cfg, &index, run_dir)?;
    let folds: Vec<usize> = match only {
        Some(f) if f >= cfg.folds.k => {
            return Err(Error::InvalidArgument(format!("fold {f} out of range for k = {}", cfg.folds.k)))
        }
        Some(f) => vec![f],
        None => (0..cfg.folds.k).collect(),
    };
    let cases = load_cases(&index.records, &cfg.preprocess)?;
    let run = |f: usize| train_fold(cfg, &cases, &assignment, f, Some(run_dir)).map(|(_, log)| (f, log));
    if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = folds.iter().map(|&f| s.spawn(move || run(f))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Numeric("fold worker panicked".into()))))
                .collect()
        })
    } else {
        folds.into_iter().map(run).collect()
    }
}

/// Like [`crate::training::measure`], with slab-wise prediction for U-Net.
pub fn measure_case(model: &ModelHandle, image: &Volume3D, cfg: &RunConfig, log: Option<&TrainingLog>) -> Result<Timing> {
    let p = run_pipeline(image, None, &cfg.preprocess)?;
    predict_prepared(model, &p.volume, &cfg.sampling)?;
    let t = Instant::now();
    predict_prepared(model, &p.volume, &cfg.sampling)?;
    let inference = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let p = run_pipeline(image, None, &cfg.preprocess)?;
    let prob = predict_prepared(model, &p.volume, &cfg.sampling)?;
    invert_to_original(&prob, &p.record)?;
    let total = t.elapsed().as_secs_f64();
    Ok(Timing {
        inference_ms: inference * 1e3,
        per_patient_total_s: total.max(inference),
        s_per_epoch: log.map(TrainingLog::mean_epoch_seconds),
    })
}

/// Dice between each case's mask and a second annotation of the same id,
/// summarized with a bootstrap interval.
pub fn agreement(cfg: &RunConfig, index: &DatasetIndex, second: &Path) -> Result<AgreementReport> {
    let other = load_manifest(second)?;
    let mut dices = Vec::new();
    for r in &other.records {
        let Some(first) = index.get(&r.id) else { continue };
        let a = read_mask(&first.mask)?.0;
        let b = read_mask(&r.mask)?.0;
        dices.push(interannotator_dice(&a, &b)?);
    }
    if dices.is_empty() {
        return Err(Error::Data(format!("{} shares no ids with the manifest", second.display())));
    }
    agreement_report(&dices, cfg.evaluate.bootstrap_resamples, cfg.evaluate.bootstrap_seed)
}

/// Scores every fold's test cases with that fold's checkpoint and writes the
/// report under `<out_dir>/report`.
pub fn evaluate_run(cfg: &RunConfig) -> Result<EvaluationReport> {
    let run_dir = cfg.out_dir.as_path();
    let index = load_index(cfg)?;
    let assignment = fold_assignment(cfg, &index, run_dir)?;
    let mut models = Vec::with_capacity(cfg.folds.k);
    for f in 0..cfg.folds.k {
        let ck = fold_dir(run_dir, f).join(CHECKPOINT_FILE);
        if !ck.exists() {
            return Err(Error::Data(format!("missing checkpoint for fold {f}: {}", ck.display())));
        }
        models.push(checkpoint::load(&ck)?.0);
    }
    let cases = load_cases(&index.records, &cfg.preprocess)?;
    let mut per_fold = Vec::with_capacity(cfg.folds.k);
    for (f, model) in models.iter().enumerate() {
        let test = cases_in(&cases, &assignment, &[assignment.rotation(f)?.test]);
        per_fold.push((f, eval_cases(model, &test, &cfg.sampling)?));
    }
    let (sweep, mut report) = evaluate_folds(cfg, &per_fold)?;
    let log_path = fold_dir(run_dir, 0).join(TRAINING_LOG_FILE);
    let log = if log_path.exists() {
        Some(TrainingLog::read_csv(&log_path)?)
    } else {
        None
    };
    let log = log.map(|epochs| TrainingLog {
        best_epoch: epochs
            .iter()
            .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
            .map_or(0, |e| e.epoch),
        stopped_epoch: epochs.len(),
        epochs,
    });
    report.timing = Some(measure_case(&models[0], &cases[0].image, cfg, log.as_ref())?);
    if let Some(second) = &cfg.evaluate.second_annotation {
        report.agreement = Some(agreement(cfg, &index, second)?);
    }
    let dir = run_dir.join(REPORT_DIR);
    cfg.save(run_dir)?;
    write_report(&dir, cfg, &sweep, &report)?;
    Ok(report)
}
