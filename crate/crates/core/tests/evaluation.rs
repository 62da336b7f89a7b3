mod common;

use common::oracle;
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use volseg::dataset::Origin;
use volseg::evaluation::*;
use volseg::volcore::{binarize, Geometry, Mask3D, ProbMap3D};

fn info(i: usize) -> CaseInfo {
    CaseInfo {
        id: format!("c{i:02}"),
        origin: if i % 3 == 0 { Origin::Hospital } else { Origin::Clinic },
        slice_thickness_mm: if i % 4 == 0 { 3.0 } else { 1.0 },
    }
}

/// Sparse random ground truth and a noisy probability map around it.
fn random_case(rng: &mut ChaCha8Rng, max_dim: usize) -> (ProbMap3D, Mask3D) {
    let dims = [0; 3].map(|_| rng.random_range(1..=max_dim));
    let g = Geometry::unit(dims).unwrap();
    let density = rng.random_range(0.02..0.35);
    let noise = rng.random_range(0.01..0.5);
    let gt = Mask3D::from_fn(g, |_, _, _| rng.random::<f64>() < density).unwrap();
    let prob: Vec<f32> = gt
        .data()
        .iter()
        .map(|&v| {
            let base: f64 = if v == 1 { 0.8 } else { 0.1 };
            (base + rng.random_range(-noise..noise)).clamp(0.0, 1.0) as f32
        })
        .collect();
    (ProbMap3D::new(g, prob).unwrap(), gt)
}

fn cases(seed: u64, n: usize, max_dim: usize) -> Vec<EvalCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (prob, gt) = random_case(&mut rng, max_dim);
            EvalCase { info: info(i), prob, gt }
        })
        .collect()
}

#[test]
fn brute_force_recomputation_matches_on_small_cohorts() {
    for seed in 0..10 {
        let cohort = cases(seed, 20, 12);
        let op = OperatingPoint::new(0.5, DT_GRID[seed as usize % 4]).unwrap();
        let results: Vec<PatientResult> = cohort.iter().map(|c| patient_metrics(&c.info, &c.prob, &c.gt, op).unwrap()).collect();
        let mut counts = Vec::new();
        for (c, r) in cohort.iter().zip(&results) {
            let pred = oracle::Grid::from_mask(&binarize(&c.prob, op.pt));
            let gt = oracle::Grid::from_mask(&c.gt);
            assert_eq!(r.dice, oracle::dice(&pred, &gt));
            let k = oracle::pairing(&gt, &pred, op.dt);
            assert_eq!((r.component_tp, r.component_fn, r.component_fp), k);
            counts.push(k);
        }
        let m = cohort_metrics(&results);
        assert_eq!((m.recall, m.precision, m.f1), oracle::cohort(&counts));
    }
}

#[test]
fn sweep_recall_is_non_increasing_in_dt() {
    for seed in 0..4 {
        let sweep = sweep_operating_points(&cases(100 + seed, 12, 10)).unwrap();
        for pt in PT_GRID {
            let row: Vec<&SweepCell> = sweep.cells.iter().filter(|c| c.point.pt == pt).collect();
            assert_eq!(row.len(), 4);
            for w in row.windows(2) {
                assert!(w[1].metrics.n_detected <= w[0].metrics.n_detected);
                match (w[0].metrics.recall, w[1].metrics.recall) {
                    (Some(a), Some(b)) => assert!(b <= a),
                    (a, b) => assert_eq!(a.is_some(), b.is_some()),
                }
            }
        }
        let best = sweep.best(Metric::Dice).unwrap();
        let max = sweep.cells.iter().filter_map(|c| c.metrics.dice_mean).fold(f64::MIN, f64::max);
        assert_eq!(best.metrics.dice_mean, Some(max));
    }
}

#[test]
fn pooled_interval_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let normal = Normal::new(75.0, 12.0).unwrap();
    let sizes = [24, 25, 24, 23, 24];
    let folds: Vec<(f64, usize)> = sizes
        .iter()
        .map(|&n| ((0..n).map(|_| normal.sample(&mut rng)).sum::<f64>() / n as f64, n))
        .collect();
    let p = pool(&folds).unwrap();
    let total: f64 = sizes.iter().sum::<usize>() as f64;
    let mean = folds.iter().map(|(m, n)| m * *n as f64).sum::<f64>() / total;
    let plain = folds.iter().map(|f| f.0).sum::<f64>() / 5.0;
    let sd = (folds.iter().map(|f| (f.0 - plain).powi(2)).sum::<f64>() / 4.0).sqrt();
    // Two-sided 95% quantile of Student's t with four degrees of freedom.
    let half = 2.776_445_105_197_799 * sd / 5f64.sqrt();
    assert!((p.mean - mean).abs() < 1e-12);
    assert!((p.sd.unwrap() - sd).abs() < 1e-12);
    let ci = p.ci.unwrap();
    assert!((ci[0] - (mean - half)).abs() < 1e-9 && (ci[1] - (mean + half)).abs() < 1e-9);
    assert!(ci[0] <= p.mean && p.mean <= ci[1]);
}

#[test]
fn fold_means_example() {
    let p = pool(&[(88.0, 1), (87.0, 1), (89.0, 1), (90.0, 1), (87.7, 1)]).unwrap();
    assert!((p.mean - 88.34).abs() < 1e-9);
    assert!((p.sd.unwrap() - 1.173_882_447).abs() < 1e-8);
}

#[test]
fn volume_bins_are_equally_populated() {
    let results: Vec<PatientResult> = (0..40)
        .map(|i| PatientResult {
            id: format!("p{i}"),
            dice: (i % 7) as f64 / 7.0,
            detected: true,
            component_tp: 1,
            component_fn: 0,
            component_fp: 0,
            volume_ml: ((i * 37) % 40) as f64 * 0.5,
            origin: Origin::Clinic,
            resolution_class: ResolutionClass::High,
            degenerate: false,
        })
        .collect();
    let rows = subgroup_report(&results, Grouping::VolumeBins(10)).unwrap();
    assert!(rows.iter().all(|r| r.n == 4));
    for w in rows.windows(2) {
        assert!(w[0].volume_range_ml.unwrap()[1] <= w[1].volume_range_ml.unwrap()[0]);
    }
    let origin = subgroup_report(&results, Grouping::Origin).unwrap();
    assert_eq!(origin[0].n, 0);
    assert!(origin[0].metrics.is_none());
    assert_eq!(origin[1].metrics.as_ref().unwrap(), &cohort_metrics(&results));
}

#[test]
fn reports_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = sweep_operating_points(&cases(9, 5, 8)).unwrap();
    let path = dir.path().join("sweep.csv");
    sweep.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 41);
    assert!(text.starts_with("key,key2,n,n_detected,dice_mean"));
    let rows = subgroup_report(&sweep.cells[0].results, Grouping::Resolution).unwrap();
    let sub = dir.path().join("groups.csv");
    write_subgroups_csv(&rows, &sub).unwrap();
    assert_eq!(std::fs::read_to_string(&sub).unwrap().lines().count(), 3);
}

fn mask_strategy() -> impl Strategy<Value = (Mask3D, Mask3D)> {
    ([1usize..8, 1usize..8, 1usize..8], any::<u64>()).prop_map(|(dims, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Geometry::unit(dims).unwrap();
        let a = Mask3D::from_fn(g, |_, _, _| rng.random::<f64>() < 0.3).unwrap();
        let b = Mask3D::from_fn(g, |_, _, _| rng.random::<f64>() < 0.3).unwrap();
        (a, b)
    })
}

proptest! {
    #[test]
    fn dice_is_symmetric((a, b) in mask_strategy()) {
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
    }

    #[test]
    fn pairs_are_one_to_one((gt, pred) in mask_strategy(), dt in prop::sample::select(DT_GRID.to_vec())) {
        let (c, m) = pair_components(&gt, &pred, dt).unwrap();
        let mut gi: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
        let mut pj: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
        gi.sort_unstable();
        gi.dedup();
        pj.sort_unstable();
        pj.dedup();
        prop_assert_eq!(gi.len(), m.pairs.len());
        prop_assert_eq!(pj.len(), m.pairs.len());
        prop_assert_eq!(c.tp + c.fn_, m.n_gt);
        prop_assert_eq!(c.tp + c.fp, m.n_pred);
    }

    #[test]
    fn raising_dt_never_raises_recall_or_detections(seed in any::<u64>()) {
        let cohort = cases(seed, 6, 8);
        let mut prev: Option<CohortMetrics> = None;
        for dt in DT_GRID {
            let op = OperatingPoint::new(0.5, dt).unwrap();
            let r: Vec<PatientResult> = cohort.iter().map(|c| patient_metrics(&c.info, &c.prob, &c.gt, op).unwrap()).collect();
            let m = cohort_metrics(&r);
            if let Some(p) = &prev {
                prop_assert!(m.n_detected <= p.n_detected);
                if let (Some(a), Some(b)) = (p.recall, m.recall) {
                    prop_assert!(b <= a);
                }
            }
            prev = Some(m);
        }
    }

    #[test]
    fn f1_lies_between_recall_and_precision(r in 0.0f64..=100.0, p in 0.0f64..=100.0) {
        if let Some(f) = f1_score(Some(r), Some(p)) {
            prop_assert!(f >= r.min(p) - 1e-9 && f <= r.max(p) + 1e-9);
        }
        let same = f1_score(Some(r), Some(r));
        if r > 0.0 {
            prop_assert!((same.unwrap() - r).abs() < 1e-9);
        }
    }

    #[test]
    fn binarization_is_monotone_in_pt(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (prob, _) = random_case(&mut rng, 8);
        for w in PT_GRID.windows(2) {
            let lo = binarize(&prob, w[0]);
            let hi = binarize(&prob, w[1]);
            prop_assert!(lo.data().iter().zip(hi.data()).all(|(a, b)| b <= a));
        }
    }
}
