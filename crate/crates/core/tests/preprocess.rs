use volseg::dataset::{generate_phantom, Origin, PhantomSpec};
use volseg::preprocess::*;
use volseg::volcore::{binarize, Mask3D, ProbMap3D};

fn phantom(spacing: [f64; 3], dims: [usize; 3], volumes: Vec<f64>) -> (volseg::volcore::Volume3D, Mask3D) {
    let spec = PhantomSpec {
        id: "pp".into(),
        dims,
        spacing,
        lesion_volumes_ml: volumes,
        n_distractor_tubes: 2,
        noise_sigma: 0.03,
        origin: Origin::Hospital,
        seed: 11,
    };
    let (v, m, _) = generate_phantom(&spec).unwrap();
    (v, m)
}

fn dice(a: &Mask3D, b: &Mask3D) -> f64 {
    let inter = a.data().iter().zip(b.data()).filter(|(&x, &y)| x == 1 && y == 1).count();
    2.0 * inter as f64 / (a.count() + b.count()) as f64
}

fn cfg(resize: ResizeMode) -> PreprocessConfig {
    PreprocessConfig {
        bias: BiasCorrection::Off,
        spacing_mm: 1.0,
        crop: true,
        resize,
        intensity: IntensityMode::S,
    }
}

#[test]
fn inverted_ones_cover_exactly_the_crop_box() {
    let (v, m) = phantom([1.0; 3], [72, 80, 64], vec![3.0]);
    let out = run_pipeline(&v, Some(&m), &cfg(ResizeMode::Fixed([48, 56, 40]))).unwrap();
    let rec = &out.record;
    assert!(rec.crop_box.dims() != v.dims());
    let ones = ProbMap3D::filled(*out.volume.geometry(), 1.0).unwrap();
    let back = invert_to_original(&ones, rec).unwrap();
    assert_eq!(back.dims(), v.dims());
    let g = *back.geometry();
    for i in 0..g.len() {
        let inside = rec.crop_box.contains(g.coords(i));
        assert_eq!(back.data()[i] > 0.0, inside, "voxel {:?}", g.coords(i));
        if inside {
            assert!((back.data()[i] - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn uniform_map_inverts_to_two_levels_away_from_borders() {
    let (v, m) = phantom([0.8, 0.8, 2.2], [80, 88, 30], vec![4.0]);
    let out = run_pipeline(&v, Some(&m), &cfg(ResizeMode::AutoZ([60, 64]))).unwrap();
    let p = ProbMap3D::filled(*out.volume.geometry(), 0.7).unwrap();
    let back = invert_to_original(&p, &out.record).unwrap();
    let rec = &out.record;
    let g = *back.geometry();
    let mut interior = 0;
    for i in 0..g.len() {
        let val = back.data()[i];
        assert!((0.0..=0.7 + 1e-6).contains(&val));
        // Map the original voxel into resampled space and test its distance to the box faces.
        let c = g.coords(i);
        let r: Vec<f64> = (0..3).map(|a| c[a] as f64 * g.spacing[a] / rec.resampled.spacing[a]).collect();
        let margin = (0..3)
            .map(|a| (r[a] - rec.crop_box.lower[a] as f64).min(rec.crop_box.upper[a] as f64 - 1.0 - r[a]))
            .fold(f64::INFINITY, f64::min);
        if margin >= 1.0 {
            interior += 1;
            assert!((val - 0.7).abs() < 1e-5, "{val} at {c:?}");
        } else if margin <= -1.0 {
            assert_eq!(val, 0.0);
        }
    }
    assert!(interior > g.len() / 10);
}

#[test]
fn large_lesion_round_trip_dice() {
    for (seed_volume, dims) in [(9.0, [96, 112, 88]), (20.0, [96, 112, 88]), (12.0, [100, 100, 96])] {
        let (v, m) = phantom([1.0; 3], dims, vec![seed_volume]);
        let out = run_pipeline(&v, Some(&m), &cfg(ResizeMode::Fixed([64, 80, 56]))).unwrap();
        let pm = out.mask.as_ref().unwrap();
        let back = invert_to_original(&ProbMap3D::from(pm), &out.record).unwrap();
        let d = dice(&binarize(&back, 0.5), &m);
        assert!(d >= 0.95, "{seed_volume} ml: dice {d}");
    }
}

#[test]
fn pipeline_is_deterministic_and_crop_keeps_the_lesion() {
    let (v, m) = phantom([1.2, 1.2, 2.0], [64, 72, 40], vec![2.0, 0.5]);
    let c = cfg(ResizeMode::Fixed([40, 48, 36]));
    let a = run_pipeline(&v, Some(&m), &c).unwrap();
    let b = run_pipeline(&v, Some(&m), &c).unwrap();
    assert_eq!(a.volume, b.volume);
    assert_eq!(a.mask, b.mask);
    assert_eq!(a.record, b.record);

    let uncropped = volseg::volcore::resample_isotropic(&m, 1.0).unwrap();
    assert_eq!(uncropped.crop(&a.record.crop_box).unwrap().count(), uncropped.count());
    let (lo, hi) = a.volume.min_max();
    assert_eq!((lo, hi), (0.0, 1.0));
    assert_eq!(a.mask.as_ref().unwrap().dims(), [40, 48, 36]);
}

#[test]
fn zero_mean_mode_standardizes() {
    let (v, _) = phantom([1.0; 3], [48, 48, 40], vec![1.0]);
    let c = PreprocessConfig {
        intensity: IntensityMode::ZM,
        ..cfg(ResizeMode::Fixed([32, 32, 32]))
    };
    let out = run_pipeline(&v, None, &c).unwrap();
    let n = out.volume.len() as f64;
    let mean = out.volume.data().iter().map(|&x| x as f64).sum::<f64>() / n;
    assert!(mean.abs() < 1e-5);
}

#[test]
fn config_reads_from_toml() {
    let c: PreprocessConfig = toml::from_str(
        r#"
        bias = { external = "N4 -i {input} -o {output}" }
        spacing_mm = 1.0
        resize = { auto_z = [256, 192] }
        intensity = "ZM"
        "#,
    )
    .unwrap();
    assert_eq!(c.resize, ResizeMode::AutoZ([256, 192]));
    assert_eq!(c.intensity, IntensityMode::ZM);
    assert!(c.crop);
    assert!(c.validate().is_empty());
}
