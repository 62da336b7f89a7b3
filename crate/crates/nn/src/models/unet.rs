//! Seven-level 3-D U-Net for slab-wise segmentation.
//!
//! Each level has two 3×3×3 convolutions (bias, batch normalization,
//! rectifier) followed by spatial dropout. Encoder levels are separated by 2×
//! max pooling in-plane; the slice axis is only pooled while its extent is at
//! least 4 so that 32-slice slabs survive all six reductions. The decoder
//! upsamples (nearest) to the skip resolution, concatenates the skip, and
//! repeats the two-convolution block. A 1×1×1 convolution and logistic
//! activation produce the foreground probability.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::kernels::conv::ConvGeom;
use crate::kernels::resample::Interp;
use crate::layers::{Conv3d, ConvNormAct};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Filters per level; the number of levels is `filters.len()`.
    pub filters: Vec<usize>,
    pub dropout: f32,
    /// Nominal slab shape `(x, y, z)`.
    pub input_shape: [usize; 3],
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            filters: vec![8, 16, 32, 64, 128, 256, 256],
            dropout: 0.1,
            input_shape: [256, 192, 32],
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.filters.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() || self.filters.contains(&0) {
            return Err(NnError::Config(format!("invalid U-Net filters {:?}", self.filters)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        check_input(self.levels(), [self.input_shape[2], self.input_shape[1], self.input_shape[0]])
    }
}

/// In-plane extents must survive `levels - 1` halvings.
fn check_input(levels: usize, zyx: [usize; 3]) -> Result<()> {
    let need = 1usize << (levels - 1);
    if zyx[1] < need || zyx[2] < need || zyx[0] == 0 {
        return Err(NnError::Config(format!(
            "input (x={}, y={}, z={}) too small for {levels} levels (in-plane extent >= {need} required)",
            zyx[2], zyx[1], zyx[0]
        )));
    }
    Ok(())
}

fn pool_window(zyx: [usize; 3]) -> [usize; 3] {
    [if zyx[0] >= 4 { 2 } else { 1 }, 2, 2]
}

#[derive(Clone, Debug)]
struct Level {
    first: ConvNormAct,
    second: ConvNormAct,
}

impl Level {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        let g = ConvGeom::cubic(3, 1, 1);
        Self {
            first: ConvNormAct::new(store, &format!("{name}.0"), cin, cout, g, true),
            second: ConvNormAct::new(store, &format!("{name}.1"), cout, cout, g, true),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, dropout: f32) -> Result<Var> {
        let y = self.first.forward(g, x)?;
        let y = self.second.forward(g, y)?;
        g.spatial_dropout(y, dropout)
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    config: UNetConfig,
    encoder: Vec<Level>,
    decoder: Vec<Level>,
    head: Conv3d,
}

impl UNet {
    pub fn new(config: UNetConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let f = &config.filters;
        let mut encoder = Vec::new();
        let mut cin = 1;
        for (l, &c) in f.iter().enumerate() {
            encoder.push(Level::new(store, &format!("unet.enc{l}"), cin, c));
            cin = c;
        }
        let mut decoder = Vec::new();
        for l in (0..f.len() - 1).rev() {
            decoder.push(Level::new(store, &format!("unet.dec{l}"), f[l] + f[l + 1], f[l]));
        }
        let head = Conv3d::dense(store, "unet.head", f[0], 1, ConvGeom::pointwise(), true);
        Ok(Self {
            config,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        check_input(self.config.levels(), g.value(x).spatial()?)?;
        let dropout = self.config.dropout;
        let last = self.encoder.len() - 1;
        let mut skips = Vec::with_capacity(last);
        let mut h = x;
        for (l, level) in self.encoder.iter().enumerate() {
            h = level.forward(g, h, dropout)?;
            if l < last {
                skips.push(h);
                let window = pool_window(g.value(h).spatial()?);
                h = g.max_pool(h, window)?;
            }
        }
        for (level, skip) in self.decoder.iter().zip(skips.into_iter().rev()) {
            let size = g.value(skip).spatial()?;
            let up = g.resize(h, size, Interp::Nearest)?;
            let cat = g.concat(&[skip, up])?;
            h = level.forward(g, cat, dropout)?;
        }
        let logits = self.head.forward(g, h)?;
        Ok(g.sigmoid(logits))
    }
}
