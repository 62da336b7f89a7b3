//! Voxel grids, geometry and intensity primitives, connected components and
//! NIfTI-1 input/output.

mod components;
mod interp;
pub mod nifti_io;
mod ops;
mod volume;

pub use components::{component_volume_ml, connected_components, Component};
pub use ops::{
    auto_z, binarize, crop_foreground, normalize_minmax, percentile_nearest_rank, resample_isotropic, resample_to,
    resize_fixed, resize_with_auto_z, standardize_zero_mean, Interpolate,
};
pub use volume::{CropBox, Geometry, Mask3D, ProbMap3D, Volume3D};
