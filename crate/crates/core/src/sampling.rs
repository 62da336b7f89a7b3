//! Slab extraction, negative/positive balancing and in-plane augmentation.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volcore::{Geometry, Mask3D, Volume3D};

pub const SLAB_DEPTH: usize = 32;

/// A contiguous block of slices used as one training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Slab {
    pub parent_id: String,
    pub z_start: usize,
    pub image: Volume3D,
    pub label: Mask3D,
    pub positive: bool,
}

/// Slab start indices: `0, stride, …` while a full slab fits, then one more
/// start if the tail of the volume is not covered.
pub fn slab_starts(z: usize, depth: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = if z >= depth {
        (0..=z - depth).step_by(stride).collect()
    } else {
        vec![0]
    };
    let last = *starts.last().expect("at least one start");
    if last + depth < z {
        starts.push(last + stride);
    }
    starts
}

/// Cuts `depth`-slice slabs every `stride` slices. Slabs running past the end
/// are padded with the image minimum (labels with 0). A slab is positive when
/// its label has at least `min_positive_voxels` foreground voxels.
pub fn extract_slabs(
    parent_id: &str,
    vol: &Volume3D,
    mask: &Mask3D,
    depth: usize,
    stride: usize,
    min_positive_voxels: usize,
) -> Result<Vec<Slab>> {
    if stride == 0 || depth == 0 {
        return Err(Error::InvalidArgument(format!("slab depth and stride must be >= 1, got {depth} and {stride}")));
    }
    if vol.dims() != mask.dims() {
        return Err(Error::InvalidArgument(format!(
            "image {:?} and label {:?} differ in shape",
            vol.dims(),
            mask.dims()
        )));
    }
    let g = *vol.geometry();
    let [nx, ny, nz] = g.dims;
    let plane = nx * ny;
    let fill = vol.min_max().0;
    slab_starts(nz, depth, stride)
        .into_iter()
        .map(|z0| {
            let sg = Geometry::new(
                [nx, ny, depth],
                g.spacing,
                [g.origin[0], g.origin[1], g.origin[2] + z0 as f64 * g.spacing[2]],
            )?;
            let mut img = vec![fill; plane * depth];
            let mut lab = vec![0u8; plane * depth];
            let avail = nz.saturating_sub(z0).min(depth);
            img[..avail * plane].copy_from_slice(&vol.data()[z0 * plane..(z0 + avail) * plane]);
            lab[..avail * plane].copy_from_slice(&mask.data()[z0 * plane..(z0 + avail) * plane]);
            let label = Mask3D::new(sg, lab)?;
            Ok(Slab {
                parent_id: parent_id.to_string(),
                z_start: z0,
                positive: label.count() >= min_positive_voxels.max(1),
                image: Volume3D::new(sg, img)?,
                label,
            })
        })
        .collect()
}

/// Indices kept after dropping random negatives until
/// `negatives ≤ ratio · positives`; positives always survive and the original
/// order is preserved. Without a ratio, or without positives, everything is kept.
pub fn balance_indices(positive: &[bool], ratio: Option<f64>, rng: &mut impl Rng) -> Vec<usize> {
    let pos = positive.iter().filter(|&&p| p).count();
    let all: Vec<usize> = (0..positive.len()).collect();
    let Some(ratio) = ratio else { return all };
    if pos == 0 {
        return all;
    }
    let negatives: Vec<usize> = all.iter().copied().filter(|&i| !positive[i]).collect();
    let keep = ((ratio * pos as f64).floor() as usize).min(negatives.len());
    if keep == negatives.len() {
        return all;
    }
    let mut kept_neg = vec![false; positive.len()];
    for j in sample(rng, negatives.len(), keep) {
        kept_neg[negatives[j]] = true;
    }
    all.into_iter().filter(|&i| positive[i] || kept_neg[i]).collect()
}

pub fn balance_slabs(slabs: Vec<Slab>, ratio: Option<f64>, rng: &mut impl Rng) -> Vec<Slab> {
    let flags: Vec<bool> = slabs.iter().map(|s| s.positive).collect();
    let keep = balance_indices(&flags, ratio, rng);
    let mut slots: Vec<Option<Slab>> = slabs.into_iter().map(Some).collect();
    keep.into_iter().filter_map(|i| slots[i].take()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PolicyName {
    /// Flips, rotation and translation.
    #[default]
    Augm1,
    /// Augm1 plus zoom and perspective.
    Augm2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub policy: PolicyName,
    pub probability: f64,
    /// Rotation drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Translation up to this fraction of each in-plane axis.
    pub translation_frac: f64,
    pub zoom: [f64; 2],
    /// The perspective scale is drawn from this range, then both
    /// perspective coefficients from `[-scale, scale]`.
    pub perspective_scale: [f64; 2],
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::augm1()
    }
}

impl AugmentPolicy {
    pub fn augm1() -> Self {
        Self {
            policy: PolicyName::Augm1,
            probability: 0.5,
            rotation_deg: 20.0,
            translation_frac: 0.10,
            zoom: [0.8, 1.2],
            perspective_scale: [0.0, 0.1],
        }
    }

    pub fn augm2() -> Self {
        Self {
            policy: PolicyName::Augm2,
            ..Self::augm1()
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(0.0..=1.0).contains(&self.probability) {
            errs.push(format!("augment.probability {} outside [0, 1]", self.probability));
        }
        if !(self.rotation_deg >= 0.0 && self.translation_frac >= 0.0) {
            errs.push("augment.rotation_deg and augment.translation_frac must be >= 0".into());
        }
        if !(self.zoom[0] > 0.0 && self.zoom[0] <= self.zoom[1]) {
            errs.push(format!("augment.zoom {:?} must be an increasing positive range", self.zoom));
        }
        if !(self.perspective_scale[0] >= 0.0 && self.perspective_scale[0] <= self.perspective_scale[1]) {
            errs.push(format!("augment.perspective_scale {:?} invalid", self.perspective_scale));
        }
        errs
    }

    fn extended(&self) -> bool {
        self.policy == PolicyName::Augm2
    }

    /// Draws which transforms fire and their parameters.
    pub fn draw(&self, rng: &mut impl Rng) -> AugmentDraw {
        let mut fires = || rng.random::<f64>() < self.probability;
        let (fx, fy, rot, tr) = (fires(), fires(), fires(), fires());
        let (zm, persp) = if self.extended() { (fires(), fires()) } else { (false, false) };
        let mut d = AugmentDraw {
            flip_x: fx,
            flip_y: fy,
            ..Default::default()
        };
        if rot {
            d.rotation_deg = Some(rng.random_range(-self.rotation_deg..=self.rotation_deg));
        }
        if tr {
            let t = self.translation_frac;
            d.translation = Some([rng.random_range(-t..=t), rng.random_range(-t..=t)]);
        }
        if zm {
            d.zoom = Some(rng.random_range(self.zoom[0]..=self.zoom[1]));
        }
        if persp {
            let s = rng.random_range(self.perspective_scale[0]..=self.perspective_scale[1]);
            d.perspective = Some([rng.random_range(-s..=s), rng.random_range(-s..=s)]);
        }
        d
    }
}

/// Realized augmentation parameters; `None` means the transform did not fire.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub flip_x: bool,
    pub flip_y: bool,
    pub rotation_deg: Option<f64>,
    /// Fractions of the x and y extents.
    pub translation: Option<[f64; 2]>,
    pub zoom: Option<f64>,
    pub perspective: Option<[f64; 2]>,
}

impl AugmentDraw {
    fn warps(&self) -> bool {
        self.rotation_deg.is_some() || self.translation.is_some() || self.zoom.is_some() || self.perspective.is_some()
    }

    /// Forward homography in centred pixel coordinates (output = H · input).
    fn homography(&self, nx: usize, ny: usize) -> Matrix3<f64> {
        let mut h = Matrix3::identity();
        if let Some([g, k]) = self.perspective {
            let p = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0 * g / nx as f64, 2.0 * k / ny as f64, 1.0);
            h = p * h;
        }
        if let Some(z) = self.zoom {
            h = Matrix3::new(z, 0.0, 0.0, 0.0, z, 0.0, 0.0, 0.0, 1.0) * h;
        }
        if let Some(deg) = self.rotation_deg {
            let (s, c) = deg.to_radians().sin_cos();
            h = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0) * h;
        }
        if let Some([tx, ty]) = self.translation {
            h = Matrix3::new(1.0, 0.0, tx * nx as f64, 0.0, 1.0, ty * ny as f64, 0.0, 0.0, 1.0) * h;
        }
        h
    }
}

fn flip_in_plane<T: Copy>(data: &mut [T], dims: [usize; 3], flip_x: bool, flip_y: bool) {
    let [nx, ny, nz] = dims;
    for z in 0..nz {
        for y in 0..ny {
            let row = &mut data[(z * ny + y) * nx..(z * ny + y + 1) * nx];
            if flip_x {
                row.reverse();
            }
        }
        if flip_y {
            for y in 0..ny / 2 {
                for x in 0..nx {
                    data.swap((z * ny + y) * nx + x, (z * ny + ny - 1 - y) * nx + x);
                }
            }
        }
    }
}

/// Applies `draw` slice by slice: flips as exact index reversals, then the
/// in-plane warp, bilinear for the image (filled with its minimum) and
/// nearest-neighbour for the label (filled with 0).
pub fn augment(image: &Volume3D, label: &Mask3D, draw: &AugmentDraw) -> Result<(Volume3D, Mask3D)> {
    if image.dims() != label.dims() {
        return Err(Error::InvalidArgument(format!(
            "image {:?} and label {:?} differ in shape",
            image.dims(),
            label.dims()
        )));
    }
    let dims = image.dims();
    let [nx, ny, nz] = dims;
    let mut img = image.data().to_vec();
    let mut lab = label.data().to_vec();
    flip_in_plane(&mut img, dims, draw.flip_x, draw.flip_y);
    flip_in_plane(&mut lab, dims, draw.flip_x, draw.flip_y);
    if draw.warps() {
        let inv = draw
            .homography(nx, ny)
            .try_inverse()
            .ok_or_else(|| Error::Numeric("singular augmentation transform".into()))?;
        let fill = image.min_max().0;
        let (cx, cy) = ((nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0);
        let mut src = Vec::with_capacity(nx * ny);
        for y in 0..ny {
            for x in 0..nx {
                let q = inv * Vector3::new(x as f64 - cx, y as f64 - cy, 1.0);
                src.push((q.x / q.z + cx, q.y / q.z + cy));
            }
        }
        let mut out_img = vec![fill; img.len()];
        let mut out_lab = vec![0u8; lab.len()];
        for z in 0..nz {
            let base = z * nx * ny;
            let at = |x: i64, y: i64| -> Option<usize> {
                (x >= 0 && y >= 0 && (x as usize) < nx && (y as usize) < ny).then(|| base + y as usize * nx + x as usize)
            };
            for (j, &(sx, sy)) in src.iter().enumerate() {
                if let Some(k) = at(sx.round() as i64, sy.round() as i64) {
                    out_lab[base + j] = lab[k];
                }
                let (x0, y0) = (sx.floor() as i64, sy.floor() as i64);
                let (wx, wy) = (sx - x0 as f64, sy - y0 as f64);
                let tap = |x, y| at(x, y).map_or(fill as f64, |k| img[k] as f64);
                let top = tap(x0, y0) * (1.0 - wx) + tap(x0 + 1, y0) * wx;
                let bottom = tap(x0, y0 + 1) * (1.0 - wx) + tap(x0 + 1, y0 + 1) * wx;
                out_img[base + j] = (top * (1.0 - wy) + bottom * wy) as f32;
            }
        }
        img = out_img;
        lab = out_lab;
    }
    Ok((
        Volume3D::new(*image.geometry(), img)?,
        Mask3D::new(*label.geometry(), lab)?,
    ))
}
