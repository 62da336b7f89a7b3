use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid extent, spacing (mm per voxel) and the physical position of the
/// centre of voxel `(0, 0, 0)`. Axes are `(x, y, z)`; z is the slice axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = Self { dims, spacing, origin };
        g.validate()?;
        Ok(g)
    }

    /// Unit spacing, zero origin.
    pub fn unit(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("grid dims must be >= 1, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument(format!("origin must be finite, got {:?}", self.origin)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[0];
        let r = i / self.dims[0];
        [x, r % self.dims[1], r / self.dims[1]]
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn same_grid(&self, other: &Geometry) -> bool {
        self.dims == other.dims
            && self.spacing.iter().zip(&other.spacing).all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(1.0))
    }
}

/// Half-open voxel box `[lower, upper)` on each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub lower: [usize; 3],
    pub upper: [usize; 3],
}

impl CropBox {
    pub fn new(lower: [usize; 3], upper: [usize; 3], dims: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if lower[a] >= upper[a] || upper[a] > dims[a] {
                return Err(Error::InvalidArgument(format!(
                    "crop box {lower:?}..{upper:?} invalid for grid {dims:?}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Self { lower: [0; 3], upper: dims }
    }

    pub fn dims(&self) -> [usize; 3] {
        [
            self.upper[0] - self.lower[0],
            self.upper[1] - self.lower[1],
            self.upper[2] - self.lower[2],
        ]
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lower[a] && p[a] < self.upper[a])
    }
}

macro_rules! grid_common {
    ($ty:ident, $elem:ty) => {
        impl $ty {
            pub fn geometry(&self) -> &Geometry {
                &self.geom
            }

            pub fn dims(&self) -> [usize; 3] {
                self.geom.dims
            }

            pub fn spacing(&self) -> [f64; 3] {
                self.geom.spacing
            }

            pub fn origin(&self) -> [f64; 3] {
                self.geom.origin
            }

            pub fn data(&self) -> &[$elem] {
                &self.data
            }

            pub fn into_data(self) -> Vec<$elem> {
                self.data
            }

            pub fn len(&self) -> usize {
                self.data.len()
            }

            pub fn is_empty(&self) -> bool {
                self.data.is_empty()
            }

            #[inline]
            pub fn get(&self, x: usize, y: usize, z: usize) -> $elem {
                self.data[self.geom.index(x, y, z)]
            }

            /// Sub-grid inside `b`; the origin moves to the box's first voxel.
            pub fn crop(&self, b: &CropBox) -> Result<Self> {
                CropBox::new(b.lower, b.upper, self.geom.dims)?;
                let d = b.dims();
                let mut data = Vec::with_capacity(d.iter().product());
                for z in b.lower[2]..b.upper[2] {
                    for y in b.lower[1]..b.upper[1] {
                        let start = self.geom.index(b.lower[0], y, z);
                        data.extend_from_slice(&self.data[start..start + d[0]]);
                    }
                }
                let mut origin = self.geom.origin;
                for a in 0..3 {
                    origin[a] += b.lower[a] as f64 * self.geom.spacing[a];
                }
                Ok(Self {
                    geom: Geometry {
                        dims: d,
                        spacing: self.geom.spacing,
                        origin,
                    },
                    data,
                })
            }
        }
    };
}

/// Scalar intensity grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Volume3D {
    geom: Geometry,
    data: Vec<f32>,
}

/// Binary label grid with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mask3D {
    geom: Geometry,
    data: Vec<u8>,
}

/// Per-voxel probability grid with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbMap3D {
    geom: Geometry,
    data: Vec<f32>,
}

grid_common!(Volume3D, f32);
grid_common!(Mask3D, u8);
grid_common!(ProbMap3D, f32);

fn check_len(geom: &Geometry, len: usize) -> Result<()> {
    geom.validate()?;
    if geom.len() != len {
        return Err(Error::InvalidArgument(format!(
            "data length {len} does not match grid {:?}",
            geom.dims
        )));
    }
    Ok(())
}

impl Volume3D {
    pub fn new(geom: Geometry, data: Vec<f32>) -> Result<Self> {
        check_len(&geom, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("volume contains non-finite values".into()));
        }
        Ok(Self { geom, data })
    }

    pub fn filled(geom: Geometry, value: f32) -> Result<Self> {
        Self::new(geom, vec![value; geom.len()])
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(geom.len());
        for z in 0..geom.dims[2] {
            for y in 0..geom.dims[1] {
                for x in 0..geom.dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(geom, data)
    }

    pub fn with_geometry(&self, geom: Geometry) -> Result<Self> {
        Self::new(geom, self.data.clone())
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.geom, self.data.iter().map(|&v| f(v)).collect())
    }
}

impl Mask3D {
    pub fn new(geom: Geometry, data: Vec<u8>) -> Result<Self> {
        check_len(&geom, data.len())?;
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self { geom, data })
    }

    pub fn empty(geom: Geometry) -> Result<Self> {
        Self::new(geom, vec![0; geom.len()])
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        let mut data = Vec::with_capacity(geom.len());
        for z in 0..geom.dims[2] {
            for y in 0..geom.dims[1] {
                for x in 0..geom.dims[0] {
                    data.push(u8::from(f(x, y, z)));
                }
            }
        }
        Self::new(geom, data)
    }

    /// Re-binarizes real values at 0.5.
    pub fn from_values(geom: Geometry, values: &[f32]) -> Result<Self> {
        Self::new(geom, values.iter().map(|&v| u8::from(v >= 0.5)).collect())
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn with_geometry(&self, geom: Geometry) -> Result<Self> {
        Self::new(geom, self.data.clone())
    }

    /// Mask volume in millilitres.
    pub fn volume_ml(&self) -> f64 {
        super::component_volume_ml(self.count(), self.geom.spacing)
    }
}

impl ProbMap3D {
    pub fn new(geom: Geometry, data: Vec<f32>) -> Result<Self> {
        check_len(&geom, data.len())?;
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("probabilities must lie in [0, 1]".into()));
        }
        Ok(Self { geom, data })
    }

    /// Clamps into `[0, 1]`; non-finite values become 0.
    pub fn clamped(geom: Geometry, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::new(geom, data)
    }

    pub fn filled(geom: Geometry, value: f32) -> Result<Self> {
        Self::new(geom, vec![value; geom.len()])
    }
}

impl From<&Mask3D> for ProbMap3D {
    fn from(m: &Mask3D) -> Self {
        Self {
            geom: m.geom,
            data: m.to_f32(),
        }
    }
}

impl From<&ProbMap3D> for Volume3D {
    fn from(p: &ProbMap3D) -> Self {
        Self {
            geom: p.geom,
            data: p.data.clone(),
        }
    }
}

impl From<&Mask3D> for Volume3D {
    fn from(m: &Mask3D) -> Self {
        Self {
            geom: m.geom,
            data: m.to_f32(),
        }
    }
}
