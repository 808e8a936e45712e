//! The two-loss objective, Adam, pseudo-labels and the epoch loop.

mod adam;
mod grid;
mod loss;
mod trainer;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamParams, AdamState};
pub use grid::{grid_search_lambda, paper_grid, GridResult, GridRow, ValidationSplit};
pub use loss::{check_total_loss_gradient, loss_adv, loss_cls, total_loss, LossParts, LossSpec};
pub use trainer::{accuracy, generate_pseudo_labels, predict, train, EvalSets, Trainer};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, StaticMode};

/// Which parts of the method are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// No subtraction: `F = M1(X + P)`.
    WoSub,
    /// No adversarial loss.
    WoAdv,
    /// The static part is the temporal mean of `M1` instead of `M2`.
    FsPooling,
    /// Source labels only: no subtraction, no adversary, no target data.
    SourceOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::WoSub,
        Variant::WoAdv,
        Variant::FsPooling,
        Variant::SourceOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoSub => "wo_sub",
            Variant::WoAdv => "wo_adv",
            Variant::FsPooling => "fs_pooling",
            Variant::SourceOnly => "source_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn static_mode(self) -> StaticMode {
        match self {
            Variant::Full | Variant::WoAdv => StaticMode::Encoder,
            Variant::FsPooling => StaticMode::PooledTemporal,
            Variant::WoSub | Variant::SourceOnly => StaticMode::None,
        }
    }

    pub fn adversarial(self) -> bool {
        !matches!(self, Variant::WoAdv | Variant::SourceOnly)
    }

    pub fn uses_target(self) -> bool {
        self != Variant::SourceOnly
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: String,
    pub variant: Variant,
    pub lambda1: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Samples per step; half source and half target.
    pub batch_size: usize,
    pub epochs: usize,
    pub pseudo_start_epoch: usize,
    /// Pseudo-labels below this softmax confidence are dropped; `None` keeps all.
    pub pseudo_threshold: Option<f64>,
    /// When false the domain losses also wait for `pseudo_start_epoch`.
    pub adversarial_warmup: bool,
    pub seed: u64,
    pub model: ModelConfig,
}

impl TrainConfig {
    /// Desk-scale defaults for `d`-dimensional features, `t` frames, `k` classes.
    pub fn desk(d: usize, t: usize, k: usize) -> Self {
        Self {
            preset: "desk".into(),
            variant: Variant::Full,
            lambda1: 0.05,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 60,
            pseudo_start_epoch: 20,
            pseudo_threshold: None,
            adversarial_warmup: true,
            seed: 0,
            model: ModelConfig::desk(d, t, k),
        }
    }

    /// The published schedule on 2048-dimensional features.
    pub fn paper(t: usize, k: usize) -> Self {
        Self {
            preset: "paper".into(),
            variant: Variant::Full,
            lambda1: 0.05,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            batch_size: 256,
            epochs: 500,
            pseudo_start_epoch: 100,
            pseudo_threshold: None,
            adversarial_warmup: true,
            seed: 0,
            model: ModelConfig::paper(t, k),
        }
    }

    pub fn preset(name: &str, d: usize, t: usize, k: usize) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(d, t, k)),
            "paper" => Ok(Self::paper(t, k)),
            other => Err(Error::config("preset", format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::config("lambda1", "must be finite and non-negative"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::config("batch_size", "must be even and at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.pseudo_start_epoch > self.epochs {
            return Err(Error::config("pseudo_start_epoch", "must not exceed epochs"));
        }
        if let Some(t) = self.pseudo_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config("pseudo_threshold", "must lie in [0, 1]"));
            }
        }
        self.model
            .validate()
            .map_err(|e| Error::config("model", e.to_string()))
    }

    /// `λ1` actually applied: zero for variants without an adversary.
    pub fn effective_lambda(&self) -> f64 {
        if self.variant.adversarial() {
            self.lambda1
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_adv: f64,
    pub source_acc: f64,
    pub target_acc: f64,
    pub pseudo_active: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub lambda1: f64,
    pub target_acc: f64,
    pub source_acc: f64,
    pub seed: u64,
    pub preset: String,
    pub variant: Variant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub epochs: Vec<EpochRecord>,
    #[serde(rename = "final")]
    pub final_: FinalRecord,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_wiring() {
        assert_eq!(Variant::parse("wo_sub"), Some(Variant::WoSub));
        assert_eq!(Variant::parse("nope"), None);
        assert_eq!(Variant::SourceOnly.static_mode(), StaticMode::None);
        assert!(!Variant::SourceOnly.adversarial() && !Variant::SourceOnly.uses_target());
        assert!(!Variant::WoAdv.adversarial());
        assert_eq!(Variant::FsPooling.static_mode(), StaticMode::PooledTemporal);
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()), Some(v));
        }
    }

    #[test]
    fn config_validation_names_fields() {
        let mut c = TrainConfig::desk(32, 16, 4);
        c.validate().unwrap();
        c.pseudo_start_epoch = 61;
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "pseudo_start_epoch"));
        let mut c = TrainConfig::desk(32, 16, 4);
        c.batch_size = 3;
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "batch_size"));
        assert!(TrainConfig::preset("huge", 32, 16, 4).is_err());
        let p = TrainConfig::paper(16, 4);
        assert_eq!((p.epochs, p.pseudo_start_epoch, p.batch_size), (500, 100, 256));
    }

    #[test]
    fn effective_lambda_follows_variant() {
        let mut c = TrainConfig::desk(32, 16, 4);
        c.lambda1 = 0.3;
        assert_eq!(c.effective_lambda(), 0.3);
        c.variant = Variant::WoAdv;
        assert_eq!(c.effective_lambda(), 0.0);
    }
}
