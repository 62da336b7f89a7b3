//! The two segmentation architectures behind a common handle.

pub mod plsnet;
pub mod unet;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{Graph, Mode, Var};
use crate::params::ParamStore;
use crate::precision::Precision;
use crate::tensor::Tensor;

pub use plsnet::{DilatedResidualDenseBlock, PlsNet, PlsNetConfig};
pub use unet::{UNet, UNetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    UNet,
    PlsNet,
}

impl Architecture {
    pub fn tag(self) -> &'static str {
        match self {
            Architecture::UNet => "unet",
            Architecture::PlsNet => "plsnet",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "lowercase")]
pub enum ModelConfig {
    UNet(UNetConfig),
    PlsNet(PlsNetConfig),
}

impl ModelConfig {
    pub fn architecture(&self) -> Architecture {
        match self {
            ModelConfig::UNet(_) => Architecture::UNet,
            ModelConfig::PlsNet(_) => Architecture::PlsNet,
        }
    }

    /// Nominal input shape `(x, y, z)`.
    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            ModelConfig::UNet(c) => c.input_shape,
            ModelConfig::PlsNet(c) => c.input_shape,
        }
    }
}

#[derive(Clone, Debug)]
enum Network {
    UNet(UNet),
    PlsNet(PlsNet),
}

/// A built network together with its parameters and precision policy.
#[derive(Clone, Debug)]
pub struct ModelHandle {
    config: ModelConfig,
    store: ParamStore,
    network: Network,
    pub precision: Precision,
}

pub fn build_unet(config: UNetConfig, seed: u64) -> Result<ModelHandle> {
    ModelHandle::build(ModelConfig::UNet(config), seed)
}

pub fn build_plsnet(config: PlsNetConfig, seed: u64) -> Result<ModelHandle> {
    ModelHandle::build(ModelConfig::PlsNet(config), seed)
}

/// Exact number of trainable scalars.
pub fn count_parameters(model: &ModelHandle) -> usize {
    model.store.trainable_count()
}

impl ModelHandle {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed);
        let network = match &config {
            ModelConfig::UNet(c) => Network::UNet(UNet::new(c.clone(), &mut store)?),
            ModelConfig::PlsNet(c) => Network::PlsNet(PlsNet::new(c.clone(), &mut store)?),
        };
        Ok(Self {
            config,
            store,
            network,
            precision: Precision::Full,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn plsnet(&self) -> Option<&PlsNet> {
        match &self.network {
            Network::PlsNet(n) => Some(n),
            Network::UNet(_) => None,
        }
    }

    /// Records the network on `g`; returns per-voxel foreground probabilities.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.value(x).dims5()?;
        if shape[1] != 1 {
            return Err(NnError::Shape(format!("expected single-channel input, got {shape:?}")));
        }
        match &self.network {
            Network::UNet(n) => n.forward(g, x),
            Network::PlsNet(n) => n.forward(g, x),
        }
    }

    /// Evaluation-mode forward of a `[n, 1, z, y, x]` batch.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store, Mode::Eval, self.precision, 0);
        let x = g.input(input.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}
