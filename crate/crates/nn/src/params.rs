//! Named parameter storage shared by all layers of a model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer and counted as a model parameter.
    Trainable,
    /// Persistent state such as normalization running statistics.
    Buffer,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// He-normal initialization with the given fan-in.
    HeNormal { fan_in: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    seed: u64,
    entries: Vec<ParamEntry>,
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

impl ParamStore {
    /// Empty store; initial values are a deterministic function of `seed` and
    /// each parameter's name.
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, kind: ParamKind) -> ParamId {
        let mut value = Tensor::zeros(shape);
        match init {
            Init::Zeros => {}
            Init::Ones => value.data_mut().fill(1.0),
            Init::HeNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
                for v in value.data_mut() {
                    *v = dist.sample(&mut rng) as f32;
                }
            }
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            kind,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Blend batch statistics into running statistics.
    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate], momentum: f32) {
        for u in updates {
            for (r, b) in self.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.batch_mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, b) in self.get_mut(u.running_var).data_mut().iter_mut().zip(&u.batch_var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}

/// Batch statistics observed by a normalization layer during a training forward.
#[derive(Clone, Debug)]
pub struct NormUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
}
