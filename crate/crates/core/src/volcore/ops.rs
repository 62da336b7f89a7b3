use super::components::connected_components;
use super::interp;
use super::volume::{CropBox, Geometry, Mask3D, ProbMap3D, Volume3D};
use crate::error::{Error, Result};

/// Grids that can be resampled as real values and rebuilt afterwards.
pub trait Interpolate: Sized {
    fn grid(&self) -> &Geometry;
    fn values(&self) -> Vec<f32>;
    /// Rebuilds from interpolated values (masks re-binarize at 0.5,
    /// probability maps are clamped to `[0, 1]`).
    fn rebuild(geom: Geometry, values: Vec<f32>) -> Result<Self>;
}

impl Interpolate for Volume3D {
    fn grid(&self) -> &Geometry {
        self.geometry()
    }
    fn values(&self) -> Vec<f32> {
        self.data().to_vec()
    }
    fn rebuild(geom: Geometry, values: Vec<f32>) -> Result<Self> {
        Volume3D::new(geom, values)
    }
}

impl Interpolate for Mask3D {
    fn grid(&self) -> &Geometry {
        self.geometry()
    }
    fn values(&self) -> Vec<f32> {
        self.to_f32()
    }
    fn rebuild(geom: Geometry, values: Vec<f32>) -> Result<Self> {
        Mask3D::from_values(geom, &values)
    }
}

impl Interpolate for ProbMap3D {
    fn grid(&self) -> &Geometry {
        self.geometry()
    }
    fn values(&self) -> Vec<f32> {
        self.data().to_vec()
    }
    fn rebuild(geom: Geometry, values: Vec<f32>) -> Result<Self> {
        ProbMap3D::clamped(geom, values)
    }
}

/// Resamples onto a grid with the same origin, the given spacing and dims.
/// Output voxel `i` lies at `origin + i·spacing`.
pub fn resample_to<T: Interpolate>(grid: &T, spacing: [f64; 3], dims: [usize; 3]) -> Result<T> {
    let g = *grid.grid();
    let out = Geometry::new(dims, spacing, g.origin)?;
    let taps = [0, 1, 2].map(|a| interp::origin_aligned(g.dims[a], dims[a], spacing[a] / g.spacing[a]));
    let values = interp::resample(&grid.values(), g.dims, taps);
    T::rebuild(out, values)
}

/// Isotropic resampling to `target_mm`: each dim becomes `round(n·s/t)` (min 1).
pub fn resample_isotropic<T: Interpolate>(grid: &T, target_mm: f64) -> Result<T> {
    if !(target_mm.is_finite() && target_mm > 0.0) {
        return Err(Error::InvalidArgument(format!("target spacing must be positive, got {target_mm}")));
    }
    let g = grid.grid();
    let dims = [0, 1, 2].map(|a| ((g.dims[a] as f64 * g.spacing[a] / target_mm).round() as usize).max(1));
    resample_to(grid, [target_mm; 3], dims)
}

/// Resizes to `dims` with cell-centre alignment; spacing is scaled so the
/// physical extent is preserved.
pub fn resize_fixed<T: Interpolate>(grid: &T, dims: [usize; 3]) -> Result<T> {
    if dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("resize dims must be >= 1, got {dims:?}")));
    }
    let g = *grid.grid();
    if dims == g.dims {
        return T::rebuild(g, grid.values());
    }
    let mut spacing = g.spacing;
    let mut origin = g.origin;
    for a in 0..3 {
        origin[a] += interp::centre_aligned_offset(g.dims[a], dims[a]) * g.spacing[a];
        spacing[a] *= g.dims[a] as f64 / dims[a] as f64;
    }
    let taps = [0, 1, 2].map(|a| interp::centre_aligned(g.dims[a], dims[a]));
    let values = interp::resample(&grid.values(), g.dims, taps);
    T::rebuild(Geometry::new(dims, spacing, origin)?, values)
}

/// Depth implied by scaling z with the y ratio: `round(z · new_y / y)`, min 1.
pub fn auto_z(dims: [usize; 3], new_y: usize) -> usize {
    ((dims[2] as f64 * new_y as f64 / dims[1] as f64).round() as usize).max(1)
}

/// In-plane resize to `(new_x, new_y)` with the depth inferred by [`auto_z`].
pub fn resize_with_auto_z<T: Interpolate>(grid: &T, new_x: usize, new_y: usize) -> Result<T> {
    if new_x == 0 || new_y == 0 {
        return Err(Error::InvalidArgument(format!("resize dims must be >= 1, got ({new_x}, {new_y})")));
    }
    let z = auto_z(grid.grid().dims, new_y);
    resize_fixed(grid, [new_x, new_y, z])
}

/// Nearest-rank percentile (`p` in percent) of `values`.
pub fn percentile_nearest_rank(values: &[f32], p: f64) -> f32 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Crops to the bounding box of the largest 26-connected region of voxels
/// strictly above the 20th intensity percentile. Volumes without such voxels
/// are returned unchanged with a full-extent box.
pub fn crop_foreground(vol: &Volume3D) -> Result<(Volume3D, CropBox)> {
    let p20 = percentile_nearest_rank(vol.data(), 20.0);
    let fg = Mask3D::new(*vol.geometry(), vol.data().iter().map(|&v| u8::from(v > p20)).collect())?;
    let comps = connected_components(&fg);
    let Some(largest) = comps.first() else {
        return Ok((vol.clone(), CropBox::full(vol.dims())));
    };
    let b = largest.bbox;
    Ok((vol.crop(&b)?, b))
}

/// `(v − min)/(max − min)`; constant volumes map to zeros.
pub fn normalize_minmax(vol: &Volume3D) -> Result<Volume3D> {
    let (lo, hi) = vol.min_max();
    let range = hi as f64 - lo as f64;
    if range <= 0.0 {
        return vol.map(|_| 0.0);
    }
    vol.map(|v| ((v as f64 - lo as f64) / range) as f32)
}

/// `(v − mean)/std` with the population standard deviation; constant volumes
/// map to zeros.
pub fn standardize_zero_mean(vol: &Volume3D) -> Result<Volume3D> {
    let n = vol.len() as f64;
    let mean = vol.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = vol.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd <= 0.0 || !sd.is_finite() {
        return vol.map(|_| 0.0);
    }
    vol.map(|v| ((v as f64 - mean) / sd) as f32)
}

/// Voxel is foreground iff `p > threshold` (strict).
pub fn binarize(p: &ProbMap3D, threshold: f64) -> Mask3D {
    let data = p.data().iter().map(|&v| u8::from(v as f64 > threshold)).collect();
    Mask3D::new(*p.geometry(), data).expect("binarize preserves the grid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(g: Geometry) -> Volume3D {
        Volume3D::from_fn(g, |x, y, z| {
            let p = [0, 1, 2].map(|a| g.origin[a] + [x, y, z][a] as f64 * g.spacing[a]);
            (0.5 + 0.01 * p[0] - 0.02 * p[1] + 0.03 * p[2]) as f32
        })
        .unwrap()
    }

    #[test]
    fn isotropic_dims_follow_spacing() {
        let g = Geometry::new([100, 100, 50], [0.5, 0.5, 2.0], [0.0; 3]).unwrap();
        let v = Volume3D::filled(g, 1.0).unwrap();
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.dims(), [50, 50, 100]);
        assert_eq!(r.spacing(), [1.0; 3]);
        assert!(resample_isotropic(&v, 0.0).is_err());
    }

    #[test]
    fn unit_spacing_resample_is_identity() {
        let g = Geometry::unit([5, 4, 3]).unwrap();
        let v = Volume3D::from_fn(g, |x, y, z| (x * y + z) as f32).unwrap();
        assert_eq!(resample_isotropic(&v, 1.0).unwrap(), v);
    }

    #[test]
    fn resampled_ramp_matches_analytic_field() {
        let g = Geometry::new([9, 7, 5], [0.7, 1.3, 2.5], [-3.0, 1.0, 2.0]).unwrap();
        let r = resample_isotropic(&ramp(g), 1.0).unwrap();
        let expect = ramp(*r.geometry());
        for (a, b) in r.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-6, "{a} {b}");
        }
    }

    #[test]
    fn bright_cube_is_cropped() {
        let g = Geometry::unit([60, 60, 60]).unwrap();
        let v = Volume3D::from_fn(g, |x, y, z| {
            let inside = |lo: usize, hi: usize| (lo..hi).contains(&x) && (lo..hi).contains(&y) && (lo..hi).contains(&z);
            if inside(10, 50) {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let (c, b) = crop_foreground(&v).unwrap();
        assert_eq!(b, CropBox { lower: [10; 3], upper: [50; 3] });
        assert_eq!(c.dims(), [40; 3]);
        assert_eq!(c.origin(), [10.0; 3]);
    }

    #[test]
    fn constant_volume_crop_is_full_extent() {
        let v = Volume3D::filled(Geometry::unit([4, 5, 6]).unwrap(), 3.0).unwrap();
        let (c, b) = crop_foreground(&v).unwrap();
        assert_eq!(b, CropBox::full([4, 5, 6]));
        assert_eq!(c, v);
    }

    #[test]
    fn auto_z_follows_y_ratio() {
        assert_eq!(auto_z([512, 512, 200], 192), 75);
        let v = Volume3D::filled(Geometry::unit([8, 6, 4]).unwrap(), 1.0).unwrap();
        assert_eq!(resize_with_auto_z(&v, 8, 6).unwrap(), v);
    }

    #[test]
    fn resize_preserves_extent_and_reaches_shape() {
        let g = Geometry::new([30, 40, 20], [2.0, 1.5, 3.0], [5.0, 6.0, 7.0]).unwrap();
        let v = ramp(g);
        let r = resize_fixed(&v, [64, 80, 56]).unwrap();
        assert_eq!(r.dims(), [64, 80, 56]);
        for a in 0..3 {
            let before = g.dims[a] as f64 * g.spacing[a];
            let after = r.dims()[a] as f64 * r.spacing()[a];
            assert!((before - after).abs() < 1e-9);
            // Both grids span the same physical interval.
            let lo_before = g.origin[a] - 0.5 * g.spacing[a];
            let lo_after = r.origin()[a] - 0.5 * r.spacing()[a];
            assert!((lo_before - lo_after).abs() < 1e-9);
        }
    }

    #[test]
    fn intensity_normalizations() {
        let g = Geometry::unit([3, 1, 1]).unwrap();
        let v = Volume3D::new(g, vec![0.0, 50.0, 100.0]).unwrap();
        assert_eq!(normalize_minmax(&v).unwrap().data(), &[0.0, 0.5, 1.0]);
        let c = Volume3D::filled(g, 7.0).unwrap();
        assert!(normalize_minmax(&c).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(standardize_zero_mean(&c).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn binarize_is_strict() {
        let g = Geometry::unit([2, 2, 1]).unwrap();
        let p = ProbMap3D::new(g, vec![0.0, 0.2, 0.5, 1.0]).unwrap();
        assert_eq!(binarize(&p, 0.0).data(), &[0, 1, 1, 1]);
        assert_eq!(binarize(&p, 1.0).count(), 0);
        assert_eq!(binarize(&ProbMap3D::filled(g, 0.5).unwrap(), 0.5).count(), 0);
    }
}
