//! Synthetic head phantoms: a mid-intensity ellipsoidal head containing
//! hyperintense ellipsoidal lesions (the ground truth) and curved tubes of
//! similar brightness that mimic vessels.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_manifest, Origin, PatientRecord};
use crate::error::{Error, Result};
use crate::volcore::nifti_io::{self, Orientation};
use crate::volcore::{Geometry, Mask3D, Volume3D};

pub const HEAD_INTENSITY: f32 = 0.3;
pub const TUBE_INTENSITY: f32 = 0.9;
pub const LESION_INTENSITY: f32 = 1.0;
pub const MIN_LESION_ML: f64 = 0.07;
pub const MAX_LESION_ML: f64 = 167.99;

const HEAD_FILL: f64 = 0.42;
const PLACEMENT_ATTEMPTS: usize = 500;
/// Lesions keep at least this many background voxels between each other and
/// from tubes.
const GAP: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub id: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// One entry per lesion.
    pub lesion_volumes_ml: Vec<f64>,
    pub n_distractor_tubes: usize,
    pub noise_sigma: f64,
    pub origin: Origin,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn n_lesions(&self) -> usize {
        self.lesion_volumes_ml.len()
    }

    pub fn validate(&self) -> Result<()> {
        Geometry::new(self.dims, self.spacing, [0.0; 3])?;
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::InvalidArgument(format!("phantom dims {:?} below 8 voxels", self.dims)));
        }
        if let Some(v) = self
            .lesion_volumes_ml
            .iter()
            .find(|v| !(MIN_LESION_ML..=MAX_LESION_ML).contains(*v))
        {
            return Err(Error::InvalidArgument(format!(
                "lesion volume {v} ml outside [{MIN_LESION_ML}, {MAX_LESION_ML}]"
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("noise sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }
}

struct Head {
    centre: [f64; 3],
    semi: [f64; 3],
}

impl Head {
    fn new(g: &Geometry) -> Self {
        Self {
            centre: [0, 1, 2].map(|a| (g.dims[a] - 1) as f64 * g.spacing[a] / 2.0),
            semi: [0, 1, 2].map(|a| HEAD_FILL * g.dims[a] as f64 * g.spacing[a]),
        }
    }

    /// Normalized radius of `p` shrunk inwards by `margin` mm.
    fn radius(&self, p: [f64; 3], margin: f64) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.centre[a]) / (self.semi[a] - margin).max(1e-9)).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn position(g: &Geometry, i: usize) -> [f64; 3] {
    let c = g.coords(i);
    [0, 1, 2].map(|a| c[a] as f64 * g.spacing[a])
}

/// Marks every voxel within `r` voxels (Chebyshev) of a set voxel.
fn dilate(g: &Geometry, src: &[u8], r: usize) -> Vec<u8> {
    let mut out = src.to_vec();
    for axis in 0..3 {
        let cur = out.clone();
        for i in 0..g.len() {
            if cur[i] == 0 {
                continue;
            }
            let c = g.coords(i);
            let lo = c[axis].saturating_sub(r);
            let hi = (c[axis] + r).min(g.dims[axis] - 1);
            for v in lo..=hi {
                let mut p = c;
                p[axis] = v;
                out[g.index(p[0], p[1], p[2])] = 1;
            }
        }
    }
    out
}

/// The `n` voxels closest to `centre` in the ellipsoidal metric with semi-axes
/// `axes`, or `None` if the search box is too small.
fn ellipsoid_voxels(g: &Geometry, centre: [f64; 3], axes: [f64; 3], n: usize) -> Option<Vec<usize>> {
    let reach = 1.8;
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let ext = reach * axes[a] + 2.0 * g.spacing[a];
        lo[a] = ((centre[a] - ext) / g.spacing[a]).floor().max(0.0) as usize;
        hi[a] = (((centre[a] + ext) / g.spacing[a]).ceil() as usize).min(g.dims[a] - 1);
    }
    let mut cand = Vec::new();
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                let p = [x as f64 * g.spacing[0], y as f64 * g.spacing[1], z as f64 * g.spacing[2]];
                let r2: f64 = (0..3).map(|a| ((p[a] - centre[a]) / axes[a]).powi(2)).sum();
                cand.push((r2, g.index(x, y, z)));
            }
        }
    }
    if cand.len() < n {
        return None;
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    // Every voxel inside the chosen radius must have been inside the box.
    if cand[n - 1].0.sqrt() >= reach {
        return None;
    }
    Some(cand[..n].iter().map(|&(_, i)| i).collect())
}

fn random_axes(rng: &mut ChaCha8Rng, radius: f64) -> [f64; 3] {
    let mut a = [0.0; 3].map(|_: f64| rng.random_range(-0.25f64..0.25).exp());
    let gm = (a[0] * a[1] * a[2]).cbrt();
    for v in &mut a {
        *v *= radius / gm;
    }
    a
}

fn place_lesion(
    g: &Geometry,
    head: &Head,
    rng: &mut ChaCha8Rng,
    volume_ml: f64,
    forbidden: &[u8],
) -> Option<Vec<usize>> {
    let n = ((volume_ml * 1000.0 / g.voxel_volume_mm3()).round() as usize).max(1);
    let radius = (3.0 * volume_ml * 1000.0 / (4.0 * PI)).cbrt();
    let margin = GAP as f64 * g.spacing.iter().cloned().fold(0.0, f64::max);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let axes = random_axes(rng, radius);
        let centre = [0, 1, 2].map(|a| head.centre[a] + rng.random_range(-1.0f64..1.0) * head.semi[a]);
        if head.radius(centre, axes.iter().cloned().fold(0.0, f64::max) + margin) > 1.0 {
            continue;
        }
        let Some(voxels) = ellipsoid_voxels(g, centre, axes, n) else {
            continue;
        };
        if voxels
            .iter()
            .all(|&i| forbidden[i] == 0 && head.radius(position(g, i), margin) <= 1.0)
        {
            return Some(voxels);
        }
    }
    None
}

fn perpendicular(d: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let r = [0; 3].map(|_| rng.random_range(-1.0f64..1.0));
        let dot: f64 = (0..3).map(|a| r[a] * d[a]).sum();
        let p = [0, 1, 2].map(|a| r[a] - dot * d[a]);
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return p.map(|v| v / norm);
        }
    }
}

/// Stamps a sinusoidally bent cylinder; voxels outside the head or inside
/// `blocked` are skipped.
fn stamp_tube(g: &Geometry, head: &Head, rng: &mut ChaCha8Rng, blocked: &[u8], tubes: &mut [u8]) {
    let min_sp = g.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_sp = g.spacing.iter().cloned().fold(0.0, f64::max);
    let radius = rng.random_range(0.6f64..1.0) * max_sp;
    let span = 2.0 * head.semi.iter().cloned().fold(f64::INFINITY, f64::min);
    let length = rng.random_range(0.4f64..0.8) * span;
    let start = loop {
        let p = [0, 1, 2].map(|a| head.centre[a] + rng.random_range(-0.6f64..0.6) * head.semi[a]);
        if head.radius(p, 0.0) < 0.7 {
            break p;
        }
    };
    let d = loop {
        let v = [0; 3].map(|_| rng.random_range(-1.0f64..1.0));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            break v.map(|x| x / n);
        }
    };
    let bend = perpendicular(d, rng);
    let amplitude = rng.random_range(0.05f64..0.15) * length;
    let omega = rng.random_range(1.0f64..2.0) * 2.0 * PI / length;
    let steps = (length / (0.25 * min_sp)).ceil() as usize;
    for s in 0..=steps {
        let t = s as f64 * length / steps as f64;
        let c = [0, 1, 2].map(|a| start[a] + d[a] * (t - length / 2.0) + amplitude * (omega * t).sin() * bend[a]);
        let lo = [0, 1, 2].map(|a| ((c[a] - radius) / g.spacing[a]).ceil().max(0.0) as usize);
        let hi = [0, 1, 2].map(|a| ((c[a] + radius) / g.spacing[a]).floor().min((g.dims[a] - 1) as f64));
        if hi.iter().any(|&h| h < 0.0) {
            continue;
        }
        for z in lo[2]..=hi[2] as usize {
            for y in lo[1]..=hi[1] as usize {
                for x in lo[0]..=hi[0] as usize {
                    let i = g.index(x, y, z);
                    let p = position(g, i);
                    let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                    if r2 <= radius * radius && blocked[i] == 0 && head.radius(p, 0.0) <= 1.0 {
                        tubes[i] = 1;
                    }
                }
            }
        }
    }
}

/// Builds a phantom image, its lesion mask and the matching record (with empty
/// file paths). Deterministic in `spec.seed`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume3D, Mask3D, PatientRecord)> {
    spec.validate()?;
    let g = Geometry::new(spec.dims, spec.spacing, [0.0; 3])?;
    let head = Head::new(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut lesions = vec![0u8; g.len()];
    let mut forbidden = vec![0u8; g.len()];
    for (k, &v) in spec.lesion_volumes_ml.iter().enumerate() {
        let voxels = place_lesion(&g, &head, &mut rng, v, &forbidden).ok_or_else(|| {
            Error::Data(format!(
                "{}: cannot place lesion {k} of {v} ml in a {:?} grid without overlap",
                spec.id, spec.dims
            ))
        })?;
        for i in voxels {
            lesions[i] = 1;
        }
        forbidden = dilate(&g, &lesions, GAP);
    }

    let mut tubes = vec![0u8; g.len()];
    for _ in 0..spec.n_distractor_tubes {
        stamp_tube(&g, &head, &mut rng, &forbidden, &mut tubes);
    }

    let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut data = vec![0f32; g.len()];
    for (i, v) in data.iter_mut().enumerate() {
        if head.radius(position(&g, i), 0.0) > 1.0 {
            continue;
        }
        let base = if lesions[i] == 1 {
            LESION_INTENSITY
        } else if tubes[i] == 1 {
            TUBE_INTENSITY
        } else {
            HEAD_INTENSITY
        };
        let noise = if spec.noise_sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        *v = base + noise as f32;
    }

    let image = Volume3D::new(g, data)?;
    let mask = Mask3D::new(g, lesions)?;
    let record = PatientRecord {
        id: spec.id.clone(),
        image: PathBuf::new(),
        mask: PathBuf::new(),
        origin: spec.origin,
        slice_thickness_mm: spec.spacing[2],
        tumor_volume_ml: mask.volume_ml(),
        fold: None,
    };
    Ok((image, mask, record))
}

/// A family of single-purpose phantoms with log-uniformly spread lesion volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub volume_range_ml: [f64; 2],
    pub lesions_per_case: usize,
    pub n_distractor_tubes: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n: 40,
            dims: [80, 96, 48],
            spacing: [2.0, 2.0, 3.0],
            volume_range_ml: [0.1, 80.0],
            lesions_per_case: 1,
            n_distractor_tubes: 3,
            noise_sigma: 0.05,
            seed: 0,
            id_prefix: "ph".into(),
        }
    }
}

/// Lesion volumes are drawn from jittered log-uniform strata so the cohort
/// covers the range evenly; larger lesions are more often hospital cases.
pub fn cohort_specs(c: &CohortSpec) -> Vec<PhantomSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let [lo, hi] = c.volume_range_ml.map(f64::ln);
    let total = (c.n * c.lesions_per_case).max(1);
    let mut volumes: Vec<f64> = (0..total)
        .map(|i| (lo + (hi - lo) * (i as f64 + rng.random::<f64>()) / total as f64).exp())
        .collect();
    for i in (1..volumes.len()).rev() {
        volumes.swap(i, rng.random_range(0..=i));
    }
    (0..c.n)
        .map(|i| {
            let lesion_volumes_ml = volumes[i * c.lesions_per_case..(i + 1) * c.lesions_per_case].to_vec();
            let rank = lesion_volumes_ml.iter().map(|v| (v.ln() - lo) / (hi - lo)).fold(0.0, f64::max);
            let origin = if rng.random::<f64>() < 0.25 + 0.5 * rank {
                Origin::Hospital
            } else {
                Origin::Clinic
            };
            PhantomSpec {
                id: format!("{}{:03}", c.id_prefix, i),
                dims: c.dims,
                spacing: c.spacing,
                lesion_volumes_ml,
                n_distractor_tubes: c.n_distractor_tubes,
                noise_sigma: c.noise_sigma,
                origin,
                seed: rng.random(),
            }
        })
        .collect()
}

/// Writes `images/<id>.nii.gz`, `masks/<id>.nii.gz` and `manifest.csv` under `dir`.
pub fn write_cohort(dir: &Path, specs: &[PhantomSpec]) -> Result<Vec<PatientRecord>> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut records = Vec::with_capacity(specs.len());
    for spec in specs {
        let (image, mask, mut rec) = generate_phantom(spec)?;
        rec.image = dir.join("images").join(format!("{}.nii.gz", spec.id));
        rec.mask = dir.join("masks").join(format!("{}.nii.gz", spec.id));
        nifti_io::write_volume(&rec.image, &image, &Orientation::CANONICAL)?;
        nifti_io::write_mask(&rec.mask, &mask, &Orientation::CANONICAL)?;
        records.push(rec);
    }
    write_manifest(&dir.join("manifest.csv"), &records)?;
    Ok(records)
}
