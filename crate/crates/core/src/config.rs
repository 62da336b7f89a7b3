//! Run configuration: one TOML document with a section per pipeline stage,
//! optionally seeded from a named preset.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use volseg_nn::{Device, ModelConfig, PlsNetConfig, UNetConfig};

use crate::dataset::Subset;
use crate::error::{Error, Result};
use crate::evaluation::{Metric, OperatingPoint, BOOTSTRAP_RESAMPLES};
use crate::preprocess::{BiasCorrection, IntensityMode, PreprocessConfig, ResizeMode};
use crate::sampling::{AugmentPolicy, SLAB_DEPTH};
use crate::training::TrainConfig;

/// Bias-correction command used by presets that enable it.
pub const DEFAULT_BIAS_COMMAND: &str = "N4BiasFieldCorrection -d 3 -i {input} -o {output}";
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Preset {
    UNetCfg1,
    UNetCfg2,
    UNetCfg3,
    UNetCfg4,
    PlsCfg1,
    PlsCfg2,
    PlsCfg3,
    PlsCfg4,
    PlsCfg5,
}

impl Preset {
    pub const ALL: [Preset; 9] = [
        Preset::UNetCfg1,
        Preset::UNetCfg2,
        Preset::UNetCfg3,
        Preset::UNetCfg4,
        Preset::PlsCfg1,
        Preset::PlsCfg2,
        Preset::PlsCfg3,
        Preset::PlsCfg4,
        Preset::PlsCfg5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::UNetCfg1 => "UNet-Cfg1",
            Preset::UNetCfg2 => "UNet-Cfg2",
            Preset::UNetCfg3 => "UNet-Cfg3",
            Preset::UNetCfg4 => "UNet-Cfg4",
            Preset::PlsCfg1 => "PLS-Cfg1",
            Preset::PlsCfg2 => "PLS-Cfg2",
            Preset::PlsCfg3 => "PLS-Cfg3",
            Preset::PlsCfg4 => "PLS-Cfg4",
            Preset::PlsCfg5 => "PLS-Cfg5",
        }
    }

    /// Fully populated configuration for this preset.
    pub fn config(self) -> RunConfig {
        let mut c = RunConfig {
            preset: Some(self),
            ..RunConfig::default()
        };
        match self {
            Preset::UNetCfg1 | Preset::UNetCfg2 | Preset::UNetCfg3 | Preset::UNetCfg4 => {
                let (stride, ratio) = match self {
                    Preset::UNetCfg1 => (8, None),
                    Preset::UNetCfg2 => (8, Some(2.0)),
                    Preset::UNetCfg3 => (16, Some(2.0)),
                    _ => (8, Some(1.0)),
                };
                c.model = ModelConfig::UNet(UNetConfig::default());
                c.train = TrainConfig::unet();
                c.preprocess.resize = ResizeMode::AutoZ([256, 192]);
                c.sampling.stride = stride;
                c.sampling.neg_pos_ratio = ratio;
                c.augment = AugmentConfig::on(AugmentPolicy::augm1());
            }
            _ => {
                c.model = ModelConfig::PlsNet(PlsNetConfig::default());
                c.train = TrainConfig::plsnet();
                c.preprocess.resize = ResizeMode::Fixed([256, 320, 224]);
                if self == Preset::PlsCfg2 {
                    c.preprocess.bias = BiasCorrection::External(DEFAULT_BIAS_COMMAND.into());
                }
                if self == Preset::PlsCfg3 {
                    c.preprocess.intensity = IntensityMode::ZM;
                }
                let extended = matches!(self, Preset::PlsCfg4 | Preset::PlsCfg5);
                c.augment = AugmentConfig::on(if extended { AugmentPolicy::augm2() } else { AugmentPolicy::augm1() });
                if self == Preset::PlsCfg5 {
                    c.data.subset = Subset::DS2;
                }
            }
        }
        c
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!("unknown preset `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

impl TryFrom<String> for Preset {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Preset> for String {
    fn from(p: Preset) -> Self {
        p.name().into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub subset: Subset,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            subset: Subset::DS1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldsConfig {
    pub k: usize,
    pub bins: usize,
    pub seed: u64,
}

impl Default for FoldsConfig {
    fn default() -> Self {
        Self { k: 5, bins: 3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub depth: usize,
    pub stride: usize,
    /// Maximum negative-to-positive slab ratio; `"none"` keeps every slab.
    #[serde(with = "ratio_keyword")]
    pub neg_pos_ratio: Option<f64>,
    pub min_positive_voxels: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            depth: SLAB_DEPTH,
            stride: 8,
            neg_pos_ratio: None,
            min_positive_voxels: 1,
        }
    }
}

mod ratio_keyword {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Value(f64),
        Keyword(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(r) => Repr::Value(*r),
            None => Repr::Keyword("none".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Value(r) => Ok(Some(r)),
            Repr::Keyword(k) if k.eq_ignore_ascii_case("none") => Ok(None),
            Repr::Keyword(k) => Err(serde::de::Error::custom(format!("expected a number or \"none\", got `{k}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "toml::Table")]
pub struct AugmentConfig {
    pub enabled: bool,
    #[serde(flatten)]
    pub policy: AugmentPolicy,
}

impl TryFrom<toml::Table> for AugmentConfig {
    type Error = toml::de::Error;

    fn try_from(mut t: toml::Table) -> std::result::Result<Self, Self::Error> {
        let enabled = match t.remove("enabled") {
            None => true,
            Some(toml::Value::Boolean(b)) => b,
            Some(other) => return Err(serde::de::Error::custom(format!("augment.enabled must be a boolean, got {other}"))),
        };
        Ok(Self {
            enabled,
            policy: t.try_into()?,
        })
    }
}

impl AugmentConfig {
    pub fn on(policy: AugmentPolicy) -> Self {
        Self { enabled: true, policy }
    }

    pub fn active(&self) -> Option<&AugmentPolicy> {
        self.enabled.then_some(&self.policy)
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::on(AugmentPolicy::augm1())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Fixed operating point; when absent the best point of `target` is used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub target: Metric,
    pub volume_bins: usize,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    /// Manifest of second annotations for the agreement report.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub second_annotation: Option<PathBuf>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            pt: None,
            dt: None,
            target: Metric::F1,
            volume_bins: 10,
            bootstrap_resamples: BOOTSTRAP_RESAMPLES,
            bootstrap_seed: 0,
            second_annotation: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    pub out_dir: PathBuf,
    pub device: Device,
    pub data: DataConfig,
    pub folds: FoldsConfig,
    pub preprocess: PreprocessConfig,
    pub sampling: SamplingConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            out_dir: PathBuf::from("runs"),
            device: Device::Cpu,
            data: DataConfig::default(),
            folds: FoldsConfig::default(),
            preprocess: PreprocessConfig::default(),
            sampling: SamplingConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainConfig::plsnet(),
            model: ModelConfig::PlsNet(PlsNetConfig::default()),
            evaluate: EvaluateConfig::default(),
        }
    }
}

/// Overlays `user` on `base` section by section. Keys inside a section
/// replace the base value whole; a model section naming a different
/// architecture replaces the base model entirely.
fn merge(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => {
                let switches = key == "model" && u.get("architecture").is_some_and(|a| Some(a) != b.get("architecture"));
                if switches {
                    *b = u;
                } else {
                    b.extend(u);
                }
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

impl RunConfig {
    /// Resolves `preset` (or the document's own `preset` key) overlaid with
    /// `user_toml`, then validates. Every problem found is reported at once.
    pub fn resolve(preset: Option<Preset>, user_toml: Option<&str>) -> Result<Self> {
        let user: toml::Table = match user_toml {
            Some(text) => text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?,
            None => toml::Table::new(),
        };
        let named = match (preset, user.get("preset")) {
            (Some(p), _) => Some(p),
            (None, Some(toml::Value::String(s))) => Some(s.parse()?),
            (None, Some(other)) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            (None, None) => None,
        };
        let base = named.map_or_else(RunConfig::default, Preset::config);
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut table, user);
        if let Some(p) = named {
            table.insert("preset".into(), toml::Value::String(p.name().into()));
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let errs = cfg.validate();
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(format!("{} problem(s):\n  - {}", errs.len(), errs.join("\n  - "))))
        }
    }

    pub fn from_file(preset: Option<Preset>, path: Option<&Path>) -> Result<Self> {
        let text = path
            .map(|p| std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display()))))
            .transpose()?;
        Self::resolve(preset, text.as_deref())
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.preprocess.validate();
        errs.extend(self.augment.policy.validate());
        errs.extend(self.train.validate());
        let model_check = match &self.model {
            ModelConfig::UNet(c) => c.validate(),
            ModelConfig::PlsNet(c) => c.validate(),
        };
        if let Err(e) = model_check {
            errs.push(format!("model: {e}"));
        }
        if let (ModelConfig::PlsNet(c), ResizeMode::Fixed(dims)) = (&self.model, self.preprocess.resize) {
            if c.input_shape != dims {
                errs.push(format!(
                    "model.input_shape {:?} differs from preprocess.resize {:?}",
                    c.input_shape, dims
                ));
            }
        }
        if self.folds.k < 2 {
            errs.push(format!("folds.k must be >= 2, got {}", self.folds.k));
        }
        if self.folds.bins == 0 {
            errs.push("folds.bins must be >= 1".into());
        }
        if self.sampling.depth == 0 || self.sampling.stride == 0 {
            errs.push("sampling.depth and sampling.stride must be >= 1".into());
        }
        if let Some(r) = self.sampling.neg_pos_ratio {
            if !(r >= 0.0 && r.is_finite()) {
                errs.push(format!("sampling.neg_pos_ratio must be >= 0, got {r}"));
            }
        }
        match (self.evaluate.pt, self.evaluate.dt) {
            (Some(pt), Some(dt)) => {
                if let Err(e) = OperatingPoint::new(pt, dt) {
                    errs.push(format!("evaluate: {e}"));
                }
            }
            (None, None) => {}
            _ => errs.push("evaluate.pt and evaluate.dt must be given together".into()),
        }
        if self.evaluate.volume_bins == 0 || self.evaluate.bootstrap_resamples == 0 {
            errs.push("evaluate.volume_bins and evaluate.bootstrap_resamples must be >= 1".into());
        }
        errs
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved configuration into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }

    pub fn operating_point(&self) -> Option<OperatingPoint> {
        match (self.evaluate.pt, self.evaluate.dt) {
            (Some(pt), Some(dt)) => OperatingPoint::new(pt, dt).ok(),
            _ => None,
        }
    }
}
