//! Parameterized building blocks shared by the segmentation networks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::kernels::conv::ConvGeom;
use crate::params::{Init, ParamId, ParamKind, ParamStore};

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub depthwise: bool,
}

impl Conv3d {
    pub fn dense(store: &mut ParamStore, name: &str, cin: usize, cout: usize, geom: ConvGeom, bias: bool) -> Self {
        let [k0, k1, k2] = geom.kernel;
        let weight = store.add(
            &format!("{name}.weight"),
            &[cout, cin, k0, k1, k2],
            Init::HeNormal {
                fan_in: cin * geom.kernel_volume(),
            },
            ParamKind::Trainable,
        );
        let bias = bias.then(|| store.add(&format!("{name}.bias"), &[cout], Init::Zeros, ParamKind::Trainable));
        Self {
            weight,
            bias,
            geom,
            depthwise: false,
        }
    }

    pub fn depthwise(store: &mut ParamStore, name: &str, channels: usize, geom: ConvGeom) -> Self {
        let [k0, k1, k2] = geom.kernel;
        let weight = store.add(
            &format!("{name}.weight"),
            &[channels, 1, k0, k1, k2],
            Init::HeNormal {
                fan_in: geom.kernel_volume(),
            },
            ParamKind::Trainable,
        );
        let bias = Some(store.add(&format!("{name}.bias"), &[channels], Init::Zeros, ParamKind::Trainable));
        Self {
            weight,
            bias,
            geom,
            depthwise: true,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.conv(x, self.weight, self.bias, self.geom, self.depthwise)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm3d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f32,
}

impl BatchNorm3d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), &[channels], Init::Ones, ParamKind::Trainable),
            beta: store.add(&format!("{name}.beta"), &[channels], Init::Zeros, ParamKind::Trainable),
            running_mean: store.add(&format!("{name}.running_mean"), &[channels], Init::Zeros, ParamKind::Buffer),
            running_var: store.add(&format!("{name}.running_var"), &[channels], Init::Ones, ParamKind::Buffer),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)
    }
}

/// Convolution followed by normalization and an optional rectifier.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv3d,
    pub norm: BatchNorm3d,
    pub relu: bool,
}

impl ConvNormAct {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, geom: ConvGeom, relu: bool) -> Self {
        Self {
            conv: Conv3d::dense(store, &format!("{name}.conv"), cin, cout, geom, true),
            norm: BatchNorm3d::new(store, &format!("{name}.norm"), cout),
            relu,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.norm.forward(g, y)?;
        Ok(if self.relu { g.relu(y) } else { y })
    }
}

/// Depthwise-separable convolution: per-channel spatial filter, then a
/// pointwise channel mix, normalization and rectifier.
#[derive(Clone, Debug)]
pub struct SeparableConv3d {
    pub depthwise: Conv3d,
    pub pointwise: Conv3d,
    pub norm: BatchNorm3d,
}

impl SeparableConv3d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, dilation: usize) -> Self {
        Self {
            depthwise: Conv3d::depthwise(store, &format!("{name}.dw"), cin, ConvGeom::cubic(3, stride, dilation)),
            pointwise: Conv3d::dense(store, &format!("{name}.pw"), cin, cout, ConvGeom::pointwise(), true),
            norm: BatchNorm3d::new(store, &format!("{name}.norm"), cout),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.depthwise.forward(g, x)?;
        let y = self.pointwise.forward(g, y)?;
        let y = self.norm.forward(g, y)?;
        Ok(g.relu(y))
    }
}
