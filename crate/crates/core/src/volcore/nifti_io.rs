//! NIfTI-1 reading and writing (`.nii`, `.nii.gz`).
//!
//! Volumes are reoriented on load so that grid axes follow the world axes
//! (x → R, y → A, z → S) with positive steps; the permutation and flips are
//! kept in an [`Orientation`] so outputs can be written back in the layout of
//! the source file.

use std::path::Path;

use nalgebra::Matrix4;
use ndarray::{Array3, IxDyn};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use super::volume::{Geometry, Mask3D, Volume3D};
use crate::error::{Error, Result};

/// How the file's voxel axes map onto the canonical grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orientation {
    /// Canonical axis `a` is file axis `axes[a]`.
    pub axes: [usize; 3],
    /// Canonical axis `a` runs opposite to the file axis.
    pub flipped: [bool; 3],
}

impl Orientation {
    pub const CANONICAL: Orientation = Orientation {
        axes: [0, 1, 2],
        flipped: [false; 3],
    };

    pub fn is_canonical(&self) -> bool {
        *self == Self::CANONICAL
    }

    /// Derives the orientation from the columns of a voxel-to-world affine.
    pub fn from_affine(affine: &[[f64; 4]; 4]) -> Self {
        let col = |j: usize| [affine[0][j], affine[1][j], affine[2][j]];
        // Greedy assignment of file axes to world axes by descending weight.
        let mut cands: Vec<(f64, usize, usize)> = (0..3)
            .flat_map(|j| (0..3).map(move |w| (j, w)))
            .map(|(j, w)| (col(j)[w].abs(), j, w))
            .collect();
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut axes = [usize::MAX; 3];
        let mut used = [false; 3];
        for (_, j, w) in cands {
            if axes[w] == usize::MAX && !used[j] {
                axes[w] = j;
                used[j] = true;
            }
        }
        let flipped = [0, 1, 2].map(|w| col(axes[w])[w] < 0.0);
        Self { axes, flipped }
    }
}

fn nifti_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Nifti {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn header_affine(h: &NiftiHeader) -> [[f64; 4]; 4] {
    let m = h.affine::<f64>();
    let mut a = [[0.0; 4]; 4];
    for (r, row) in a.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = m[(r, c)];
        }
    }
    a
}

/// Raw canonical samples plus geometry, shared by the volume and mask readers.
fn read_canonical(path: &Path) -> Result<(Geometry, Vec<f32>, Orientation)> {
    let obj = ReaderOptions::new().read_file(path).map_err(|e| nifti_err(path, e))?;
    let header = obj.header().clone();
    let arr = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| nifti_err(path, e))?;
    let shape = arr.shape().to_vec();
    if shape.len() < 3 || shape[3..].iter().any(|&d| d != 1) {
        return Err(nifti_err(path, format!("expected a 3-D volume, got shape {shape:?}")));
    }
    let affine = header_affine(&header);
    let orient = Orientation::from_affine(&affine);
    let file_dims = [shape[0], shape[1], shape[2]];
    let dims = orient.axes.map(|j| file_dims[j]);
    let spacing = orient
        .axes
        .map(|j| (0..3).map(|r| affine[r][j].powi(2)).sum::<f64>().sqrt());
    // World position of canonical voxel 0.
    let first = file_index(&orient, dims, [0, 0, 0]);
    let origin = [0, 1, 2].map(|r| (0..3).map(|j| affine[r][j] * first[j] as f64).sum::<f64>() + affine[r][3]);
    let geom = Geometry::new(dims, spacing, origin).map_err(|e| nifti_err(path, e))?;
    let mut data = Vec::with_capacity(geom.len());
    let mut idx = vec![0; shape.len()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let f = file_index(&orient, dims, [x, y, z]);
                idx[..3].copy_from_slice(&f);
                data.push(arr[IxDyn(&idx)]);
            }
        }
    }
    Ok((geom, data, orient))
}

/// File voxel index of canonical voxel `c`.
fn file_index(o: &Orientation, dims: [usize; 3], c: [usize; 3]) -> [usize; 3] {
    let mut f = [0; 3];
    for a in 0..3 {
        f[o.axes[a]] = if o.flipped[a] { dims[a] - 1 - c[a] } else { c[a] };
    }
    f
}

pub fn read_volume(path: &Path) -> Result<(Volume3D, Orientation)> {
    let (geom, data, orient) = read_canonical(path)?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{} contains non-finite voxels", path.display())));
    }
    Ok((Volume3D::new(geom, data)?, orient))
}

/// Reads a label image; any nonzero voxel is foreground.
pub fn read_mask(path: &Path) -> Result<(Mask3D, Orientation)> {
    let (geom, data, orient) = read_canonical(path)?;
    let bin = data.iter().map(|&v| u8::from(v != 0.0)).collect();
    Ok((Mask3D::new(geom, bin)?, orient))
}

fn file_header(geom: &Geometry, o: &Orientation) -> NiftiHeader {
    let file_dims = {
        let mut d = [0; 3];
        for a in 0..3 {
            d[o.axes[a]] = geom.dims[a];
        }
        d
    };
    let mut m = Matrix4::<f64>::identity();
    let mut translation = geom.origin;
    for a in 0..3 {
        let j = o.axes[a];
        let sign = if o.flipped[a] { -1.0 } else { 1.0 };
        for r in 0..3 {
            m[(r, j)] = 0.0;
        }
        m[(a, j)] = sign * geom.spacing[a];
        if o.flipped[a] {
            translation[a] += (geom.dims[a] - 1) as f64 * geom.spacing[a];
        }
    }
    for (r, t) in translation.iter().enumerate() {
        m[(r, 3)] = *t;
    }
    let mut h = NiftiHeader::default();
    for a in 0..3 {
        h.pixdim[o.axes[a] + 1] = geom.spacing[a] as f32;
    }
    h.dim = [3, file_dims[0] as u16, file_dims[1] as u16, file_dims[2] as u16, 1, 1, 1, 1];
    // Spatial units: millimetres.
    h.xyzt_units = 2;
    h.set_affine(&m);
    h
}

/// Samples arranged in the file's axis order.
fn file_array<T>(geom: &Geometry, o: &Orientation, get: impl Fn(usize) -> T) -> Array3<T> {
    let mut file_dims = [0; 3];
    for a in 0..3 {
        file_dims[o.axes[a]] = geom.dims[a];
    }
    let mut canon_of_file = [0usize; 3];
    for a in 0..3 {
        canon_of_file[o.axes[a]] = a;
    }
    Array3::from_shape_fn((file_dims[0], file_dims[1], file_dims[2]), |(i, j, k)| {
        let f = [i, j, k];
        let mut c = [0; 3];
        for (fa, &a) in canon_of_file.iter().enumerate() {
            c[a] = if o.flipped[a] { geom.dims[a] - 1 - f[fa] } else { f[fa] };
        }
        get(geom.index(c[0], c[1], c[2]))
    })
}

/// Writes `vol` as float32, restoring the file layout described by `o`.
pub fn write_volume(path: &Path, vol: &Volume3D, o: &Orientation) -> Result<()> {
    let arr = file_array(vol.geometry(), o, |i| vol.data()[i]);
    let header = file_header(vol.geometry(), o);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&arr)
        .map_err(|e| nifti_err(path, e))
}

/// Writes `mask` as uint8.
pub fn write_mask(path: &Path, mask: &Mask3D, o: &Orientation) -> Result<()> {
    let arr = file_array(mask.geometry(), o, |i| mask.data()[i]);
    let header = file_header(mask.geometry(), o);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&arr)
        .map_err(|e| nifti_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume3D {
        let g = Geometry::new([4, 3, 2], [0.5, 1.0, 2.5], [-10.0, 5.0, 3.0]).unwrap();
        Volume3D::from_fn(g, |x, y, z| (x + 10 * y + 100 * z) as f32 * 0.25).unwrap()
    }

    #[test]
    fn canonical_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nii.gz");
        let v = sample();
        write_volume(&p, &v, &Orientation::CANONICAL).unwrap();
        let (back, o) = read_volume(&p).unwrap();
        assert!(o.is_canonical());
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.data(), v.data());
        for a in 0..3 {
            assert!((back.spacing()[a] - v.spacing()[a]).abs() < 1e-6);
            assert!((back.origin()[a] - v.origin()[a]).abs() < 1e-4);
        }
    }

    #[test]
    fn permuted_and_flipped_file_is_reoriented() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nii");
        let v = sample();
        let o = Orientation {
            axes: [2, 0, 1],
            flipped: [true, false, true],
        };
        write_volume(&p, &v, &o).unwrap();
        let (back, o2) = read_volume(&p).unwrap();
        assert_eq!(o2, o);
        assert_eq!(back.data(), v.data());
        for a in 0..3 {
            assert!((back.origin()[a] - v.origin()[a]).abs() < 1e-4);
        }
        let q = dir.path().join("w.nii");
        write_volume(&q, &back, &o2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.nii.gz");
        let g = Geometry::unit([5, 4, 3]).unwrap();
        let m = Mask3D::from_fn(g, |x, y, z| (x + y + z) % 3 == 0).unwrap();
        write_mask(&p, &m, &Orientation::CANONICAL).unwrap();
        assert_eq!(read_mask(&p).unwrap().0, m);
    }
}
