//! Numeric precision policy.
//!
//! In mixed mode, activations, parameters as seen by the forward pass, and
//! backward gradients are rounded to IEEE binary16 after every operation. The
//! loss and normalization statistics stay in 32-bit, and the optimizer updates
//! a 32-bit master copy of the weights. Dynamic loss scaling keeps small
//! gradients representable in 16-bit.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Full,
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    #[default]
    Cpu,
    Gpu,
}

/// Fails when `device` cannot execute the requested precision. The CPU backend
/// emulates 16-bit storage exactly; no GPU backend is compiled in.
pub fn check_capability(device: Device, precision: Precision) -> Result<()> {
    match device {
        Device::Cpu => Ok(()),
        Device::Gpu => Err(NnError::Capability(format!(
            "no GPU backend available for {precision:?} precision; use --device cpu"
        ))),
    }
}

#[inline]
pub fn round_half(v: f32) -> f32 {
    f16::from_f32(v).to_f32()
}

pub fn round_half_slice(values: &mut [f32]) {
    for v in values {
        *v = round_half(*v);
    }
}

/// Dynamic loss scale: start at 2^16, halve on overflow, double after a run of
/// clean steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossScaler {
    pub scale: f32,
    pub growth_interval: u32,
    pub clean_steps: u32,
    pub skipped_steps: u64,
}

impl Default for LossScaler {
    fn default() -> Self {
        Self {
            scale: 65536.0,
            growth_interval: 2000,
            clean_steps: 0,
            skipped_steps: 0,
        }
    }
}

impl LossScaler {
    /// Records the outcome of a step. Returns whether the optimizer may apply it.
    pub fn update(&mut self, grads_finite: bool) -> bool {
        if grads_finite {
            self.clean_steps += 1;
            if self.clean_steps >= self.growth_interval {
                self.scale *= 2.0;
                self.clean_steps = 0;
            }
            true
        } else {
            self.scale = (self.scale * 0.5).max(1.0);
            self.clean_steps = 0;
            self.skipped_steps += 1;
            false
        }
    }
}
