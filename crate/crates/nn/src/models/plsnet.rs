//! PLS-Net: a lightweight multi-scale 3-D network operating on whole volumes.
//!
//! Three stride-2 depthwise-separable downsampling stages each concatenate a
//! trilinearly downsampled copy of the raw input (input reinforcement) and are
//! followed by dilated residual dense blocks (DRDB). The decoder reduces
//! channels with pointwise convolutions, upsamples with order-1 interpolation,
//! and fuses the matching encoder features with separable convolutions, ending
//! at full input resolution.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::kernels::conv::ConvGeom;
use crate::kernels::resample::Interp;
use crate::layers::{Conv3d, ConvNormAct, SeparableConv3d};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlsNetConfig {
    /// Full-volume input shape `(x, y, z)`.
    pub input_shape: [usize; 3],
    pub stage_channels: [usize; 3],
    pub blocks_per_stage: [usize; 3],
    pub growth_rate: usize,
    pub dilations: Vec<usize>,
    pub head_channels: usize,
    pub input_reinforcement: bool,
}

impl Default for PlsNetConfig {
    fn default() -> Self {
        Self {
            input_shape: [256, 320, 224],
            stage_channels: [16, 64, 128],
            blocks_per_stage: [0, 2, 4],
            growth_rate: 12,
            dilations: vec![1, 2, 3, 4],
            head_channels: 8,
            input_reinforcement: true,
        }
    }
}

impl PlsNetConfig {
    /// Desk-scale preset at `64×80×56`, otherwise identical.
    pub fn reduced() -> Self {
        Self {
            input_shape: [64, 80, 56],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.iter().any(|&c| c < 2) || self.growth_rate == 0 || self.head_channels == 0 {
            return Err(NnError::Config(format!("invalid PLS-Net widths in {self:?}")));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(NnError::Config(format!("invalid dilations {:?}", self.dilations)));
        }
        check_input(self.input_shape)
    }
}

fn check_input(xyz: [usize; 3]) -> Result<()> {
    if xyz.iter().any(|&n| n < 8) {
        return Err(NnError::Config(format!(
            "input {xyz:?} too small for three downsampling stages (each extent >= 8 required)"
        )));
    }
    Ok(())
}

/// Densely connected separable convolutions with increasing dilation, fused
/// back to the block width and added to the block input.
#[derive(Clone, Debug)]
pub struct DilatedResidualDenseBlock {
    layers: Vec<SeparableConv3d>,
    fuse: ConvNormAct,
}

impl DilatedResidualDenseBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, growth: usize, dilations: &[usize]) -> Self {
        let layers = dilations
            .iter()
            .enumerate()
            .map(|(j, &d)| SeparableConv3d::new(store, &format!("{name}.layer{j}"), channels + j * growth, growth, 1, d))
            .collect();
        let fuse = ConvNormAct::new(
            store,
            &format!("{name}.fuse"),
            channels + dilations.len() * growth,
            channels,
            ConvGeom::pointwise(),
            false,
        );
        Self { layers, fuse }
    }

    /// Outputs of each dense layer, in order.
    pub fn layer_outputs(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut feats = vec![x];
        for layer in &self.layers {
            let inp = if feats.len() == 1 { x } else { g.concat(&feats)? };
            let y = layer.forward(g, inp)?;
            feats.push(y);
        }
        Ok(feats.split_off(1))
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut feats = vec![x];
        feats.extend(self.layer_outputs(g, x)?);
        let cat = g.concat(&feats)?;
        let fused = self.fuse.forward(g, cat)?;
        g.add(x, fused)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: SeparableConv3d,
    blocks: Vec<DilatedResidualDenseBlock>,
}

#[derive(Clone, Debug)]
struct UpStage {
    reduce: ConvNormAct,
    fuse: SeparableConv3d,
}

#[derive(Clone, Debug)]
pub struct PlsNet {
    config: PlsNetConfig,
    stages: Vec<Stage>,
    ups: Vec<UpStage>,
    head_reduce: ConvNormAct,
    head_fuse: SeparableConv3d,
    head_out: Conv3d,
}

impl PlsNet {
    pub fn new(config: PlsNetConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let ch = config.stage_channels;
        let reinforce = usize::from(config.input_reinforcement);
        let mut stages = Vec::new();
        let mut cin = 1;
        for s in 0..3 {
            let down = SeparableConv3d::new(store, &format!("pls.down{s}"), cin, ch[s] - reinforce, 2, 1);
            let blocks = (0..config.blocks_per_stage[s])
                .map(|b| {
                    DilatedResidualDenseBlock::new(store, &format!("pls.drdb{s}.{b}"), ch[s], config.growth_rate, &config.dilations)
                })
                .collect();
            stages.push(Stage { down, blocks });
            cin = ch[s];
        }
        let ups = (0..2)
            .map(|s| UpStage {
                reduce: ConvNormAct::new(store, &format!("pls.up{s}.reduce"), ch[s + 1], ch[s], ConvGeom::pointwise(), true),
                fuse: SeparableConv3d::new(store, &format!("pls.up{s}.fuse"), 2 * ch[s], ch[s], 1, 1),
            })
            .collect();
        let head = config.head_channels;
        let head_reduce = ConvNormAct::new(store, "pls.head.reduce", ch[0], head, ConvGeom::pointwise(), true);
        let head_fuse = SeparableConv3d::new(store, "pls.head.fuse", head + 1, head, 1, 1);
        let head_out = Conv3d::dense(store, "pls.head.out", head, 1, ConvGeom::pointwise(), true);
        Ok(Self {
            config,
            stages,
            ups,
            head_reduce,
            head_fuse,
            head_out,
        })
    }

    pub fn config(&self) -> &PlsNetConfig {
        &self.config
    }

    /// First dense block of the deepest populated stage, for probing.
    pub fn first_block(&self) -> Option<&DilatedResidualDenseBlock> {
        self.stages.iter().rev().find_map(|s| s.blocks.first())
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let full = g.value(x).spatial()?;
        check_input([full[2], full[1], full[0]])?;
        let mut encoded = Vec::with_capacity(3);
        let mut h = x;
        for stage in &self.stages {
            h = stage.down.forward(g, h)?;
            if self.config.input_reinforcement {
                let size = g.value(h).spatial()?;
                let raw = g.resize(x, size, Interp::Linear)?;
                h = g.concat(&[h, raw])?;
            }
            for block in &stage.blocks {
                h = block.forward(g, h)?;
            }
            encoded.push(h);
        }
        for s in (0..2).rev() {
            let up = &self.ups[s];
            let reduced = up.reduce.forward(g, h)?;
            let size = g.value(encoded[s]).spatial()?;
            let upsampled = g.resize(reduced, size, Interp::Linear)?;
            let cat = g.concat(&[upsampled, encoded[s]])?;
            h = up.fuse.forward(g, cat)?;
        }
        let reduced = self.head_reduce.forward(g, h)?;
        let upsampled = g.resize(reduced, full, Interp::Linear)?;
        let cat = g.concat(&[upsampled, x])?;
        let h = self.head_fuse.forward(g, cat)?;
        let logits = self.head_out.forward(g, h)?;
        Ok(g.sigmoid(logits))
    }
}
