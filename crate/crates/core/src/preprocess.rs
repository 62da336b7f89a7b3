//! The preprocessing chain: bias correction, isotropic resampling, foreground
//! cropping, resizing and intensity normalization, plus the record needed to
//! map network outputs back onto the original grid.

use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volcore::nifti_io::{self, Orientation};
use crate::volcore::{
    crop_foreground, normalize_minmax, resample_isotropic, resample_to, resize_fixed, resize_with_auto_z,
    standardize_zero_mean, CropBox, Geometry, Mask3D, ProbMap3D, Volume3D,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BiasCorrection {
    #[default]
    Off,
    /// Shell command template with `{input}` and `{output}` placeholders.
    External(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    /// In-plane `(x, y)`; depth follows the y ratio.
    AutoZ([usize; 2]),
    Fixed([usize; 3]),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum IntensityMode {
    /// Min-max scaling to `[0, 1]`.
    #[default]
    S,
    /// Zero mean, unit standard deviation.
    ZM,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    #[serde(default)]
    pub bias: BiasCorrection,
    pub spacing_mm: f64,
    #[serde(default = "default_true")]
    pub crop: bool,
    pub resize: ResizeMode,
    #[serde(default)]
    pub intensity: IntensityMode,
}

fn default_true() -> bool {
    true
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            bias: BiasCorrection::Off,
            spacing_mm: 1.0,
            crop: true,
            resize: ResizeMode::Fixed([256, 320, 224]),
            intensity: IntensityMode::S,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.spacing_mm.is_finite() && self.spacing_mm > 0.0) {
            errs.push(format!("preprocess.spacing_mm must be positive, got {}", self.spacing_mm));
        }
        let zero = match self.resize {
            ResizeMode::AutoZ(d) => d.contains(&0),
            ResizeMode::Fixed(d) => d.contains(&0),
        };
        if zero {
            errs.push(format!("preprocess.resize dims must be >= 1, got {:?}", self.resize));
        }
        if let BiasCorrection::External(cmd) = &self.bias {
            if !(cmd.contains("{input}") && cmd.contains("{output}")) {
                errs.push("preprocess.bias external command needs {input} and {output} placeholders".into());
            }
        }
        errs
    }
}

/// Everything needed to map a preprocessed grid back to the source grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub original: Geometry,
    pub resampled: Geometry,
    pub crop_box: CropBox,
    pub cropped_dims: [usize; 3],
    pub final_dims: [usize; 3],
    /// Output over input voxel counts of the resize step, per axis.
    pub resize_factors: [f64; 3],
}

impl TransformRecord {
    pub fn identity(geom: Geometry) -> Self {
        Self {
            original: geom,
            resampled: geom,
            crop_box: CropBox::full(geom.dims),
            cropped_dims: geom.dims,
            final_dims: geom.dims,
            resize_factors: [1.0; 3],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub volume: Volume3D,
    pub mask: Option<Mask3D>,
    pub record: TransformRecord,
}

fn shell_quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', r"'\''"))
}

pub fn bias_correct(vol: &Volume3D, mode: &BiasCorrection) -> Result<Volume3D> {
    let BiasCorrection::External(template) = mode else {
        return Ok(vol.clone());
    };
    let fail = |message: String| Error::Pipeline {
        step: "bias_correction",
        message,
    };
    let dir = tempfile::tempdir().map_err(|e| fail(e.to_string()))?;
    let input = dir.path().join("input.nii.gz");
    let output = dir.path().join("output.nii.gz");
    nifti_io::write_volume(&input, vol, &Orientation::CANONICAL).map_err(|e| fail(e.to_string()))?;
    let cmd = template
        .replace("{input}", &shell_quote(&input))
        .replace("{output}", &shell_quote(&output));
    let out = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .output()
        .map_err(|e| fail(format!("could not launch `{cmd}`: {e}")))?;
    if !out.status.success() {
        return Err(fail(format!(
            "`{cmd}` exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    let (corrected, _) = nifti_io::read_volume(&output).map_err(|e| fail(format!("reading tool output: {e}")))?;
    if corrected.dims() != vol.dims() {
        return Err(fail(format!(
            "tool output has dims {:?}, expected {:?}",
            corrected.dims(),
            vol.dims()
        )));
    }
    corrected.with_geometry(*vol.geometry())
}

fn check_aligned(vol: &Volume3D, mask: &Mask3D) -> Result<()> {
    if !vol.geometry().same_grid(mask.geometry()) {
        return Err(Error::InvalidArgument(format!(
            "mask grid {:?} @ {:?} does not match image grid {:?} @ {:?}",
            mask.dims(),
            mask.spacing(),
            vol.dims(),
            vol.spacing()
        )));
    }
    Ok(())
}

/// Runs bias correction → resample → crop → resize → intensity. The mask, if
/// any, follows the geometric steps only.
pub fn run_pipeline(vol: &Volume3D, mask: Option<&Mask3D>, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    if let Some(m) = mask {
        check_aligned(vol, m)?;
    }
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    let original = *vol.geometry();
    let v = bias_correct(vol, &cfg.bias)?;

    let v = resample_isotropic(&v, cfg.spacing_mm)?;
    let m = mask.map(|m| resample_isotropic(m, cfg.spacing_mm)).transpose()?;
    let resampled = *v.geometry();

    let (v, crop_box) = if cfg.crop {
        crop_foreground(&v)?
    } else {
        (v, CropBox::full(resampled.dims))
    };
    let m = m.map(|m| m.crop(&crop_box)).transpose()?;
    let cropped_dims = v.dims();

    let (v, m) = match cfg.resize {
        ResizeMode::AutoZ([x, y]) => (
            resize_with_auto_z(&v, x, y)?,
            m.map(|m| resize_with_auto_z(&m, x, y)).transpose()?,
        ),
        ResizeMode::Fixed(d) => (resize_fixed(&v, d)?, m.map(|m| resize_fixed(&m, d)).transpose()?),
    };
    let final_dims = v.dims();

    let v = match cfg.intensity {
        IntensityMode::S => normalize_minmax(&v)?,
        IntensityMode::ZM => standardize_zero_mean(&v)?,
    };
    let resize_factors = [0, 1, 2].map(|a| final_dims[a] as f64 / cropped_dims[a] as f64);
    Ok(Preprocessed {
        volume: v,
        mask: m,
        record: TransformRecord {
            original,
            resampled,
            crop_box,
            cropped_dims,
            final_dims,
            resize_factors,
        },
    })
}

/// Maps a probability map from preprocessed space back onto the original grid:
/// resize to the crop extent, embed at the crop offset in a zero grid, then
/// resample to the original spacing. Values stay probabilities.
pub fn invert_to_original(p: &ProbMap3D, rec: &TransformRecord) -> Result<ProbMap3D> {
    if p.dims() != rec.final_dims {
        return Err(Error::InvalidArgument(format!(
            "probability map dims {:?} do not match the recorded preprocessed dims {:?}",
            p.dims(),
            rec.final_dims
        )));
    }
    let restored = resize_fixed(p, rec.cropped_dims)?;
    let r = rec.resampled;
    let mut full = vec![0f32; r.len()];
    let [cx, cy, _] = rec.cropped_dims;
    for (i, &v) in restored.data().iter().enumerate() {
        let (x, rest) = (i % cx, i / cx);
        let (y, z) = (rest % cy, rest / cy);
        let lo = rec.crop_box.lower;
        full[r.index(x + lo[0], y + lo[1], z + lo[2])] = v;
    }
    let embedded = ProbMap3D::clamped(r, full)?;
    let o = rec.original;
    let back = resample_to(&embedded, o.spacing, o.dims)?;
    ProbMap3D::clamped(o, back.into_data())
}
