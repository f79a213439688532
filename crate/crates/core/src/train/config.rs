use std::fmt;
use std::str::FromStr;

use fenestra_nn::model::BackboneConfig;
use fenestra_nn::AdamConfig;
use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Classifier, regressor and generator trained together.
    PretrainMultitask,
    FinetuneClassifier,
    FinetuneRegressor,
    FinetuneClassifierGan,
    FinetuneRegressorGan,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::PretrainMultitask,
        TrainMode::FinetuneClassifier,
        TrainMode::FinetuneRegressor,
        TrainMode::FinetuneClassifierGan,
        TrainMode::FinetuneRegressorGan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::PretrainMultitask => "pretrain",
            Self::FinetuneClassifier => "classifier",
            Self::FinetuneRegressor => "regressor",
            Self::FinetuneClassifierGan => "classifier-gan",
            Self::FinetuneRegressorGan => "regressor-gan",
        }
    }

    pub fn is_adversarial(self) -> bool {
        matches!(self, Self::PretrainMultitask | Self::FinetuneClassifierGan | Self::FinetuneRegressorGan)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s || serde_json::to_value(m).ok().and_then(|v| v.as_str().map(|n| n == s)) == Some(true))
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|m| m.name()).collect();
                format!("unknown mode {s:?}, expected one of {}", names.join(", "))
            })
    }
}

/// Named hyperparameter bundles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Batch 32, 60 epochs: fits a laptop CPU.
    Desk,
    /// Batch 100, 300 epochs.
    Paper,
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            _ => Err(format!("unknown profile {s:?}, expected desk or paper")),
        }
    }
}

/// Network sizes, serializable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub channels: [usize; 4],
    pub feature_dim: usize,
    pub gen_channels: usize,
    pub z_dim: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneConfig::default().into()
    }
}

impl From<BackboneConfig> for BackboneSpec {
    fn from(c: BackboneConfig) -> Self {
        Self {
            channels: c.channels,
            feature_dim: c.feature_dim,
            gen_channels: c.gen_channels,
            z_dim: c.z_dim,
        }
    }
}

impl From<BackboneSpec> for BackboneConfig {
    fn from(s: BackboneSpec) -> Self {
        Self {
            channels: s.channels,
            feature_dim: s.feature_dim,
            gen_channels: s.gen_channels,
            z_dim: s.z_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamSpec {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSpec {
    fn default() -> Self {
        AdamConfig::default().into()
    }
}

impl From<AdamConfig> for AdamSpec {
    fn from(c: AdamConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

impl From<AdamSpec> for AdamConfig {
    fn from(s: AdamSpec) -> Self {
        Self {
            lr: s.lr,
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Labeled (and unlabeled, and noise) samples per iteration.
    pub batch: usize,
    /// Passes over the labeled pool.
    pub epochs: usize,
    /// Weight of the absolute-error term in the multitask objective.
    pub lambda: f64,
    pub seed: u64,
    /// Dropout rate on the recognizer features during training.
    pub dropout: f64,
    pub backbone: BackboneSpec,
    pub adam: AdamSpec,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::profile(Profile::Paper)
    }
}

impl TrainConfig {
    pub fn profile(p: Profile) -> Self {
        let (batch, epochs) = match p {
            Profile::Desk => (32, 60),
            Profile::Paper => (100, 300),
        };
        Self {
            batch,
            epochs,
            lambda: 2e-5,
            seed: 0,
            dropout: 0.0,
            backbone: BackboneSpec::default(),
            adam: AdamSpec::default(),
            mode: TrainMode::PretrainMultitask,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch < 2 {
            return Err(TrainError::Config(format!("batch {} below 2", self.batch)));
        }
        if self.epochs < 1 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TrainError::Config(format!("lambda {} must be finite and non-negative", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        let a = self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(TrainError::Config(format!("bad Adam settings {a:?}")));
        }
        BackboneConfig::from(self.backbone).validate().map_err(|e| TrainError::Config(e.to_string()))
    }
}
