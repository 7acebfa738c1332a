use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::optim::{AdamParams, LrSchedule};
use crate::error::{Error, Result};

/// Named hyperparameter bundles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// lr 3e-4, constant schedule, no L2, no deep supervision.
    Default,
    /// lr 1e-4, cosine schedule, L2 weight penalty, deep supervision.
    Customized,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Preset::Default),
            "customized" => Ok(Preset::Customized),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected default or customized)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Default => "default",
            Preset::Customized => "customized",
        })
    }
}

/// L2 coefficient the customized preset applies.
pub const CUSTOMIZED_L2: f64 = 1e-5;

/// Mini-batch size: a fixed count, or every training case of the fold at once.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BatchSizeRepr", into = "BatchSizeRepr")]
pub enum BatchSize {
    Fixed(usize),
    FoldSize,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum BatchSizeRepr {
    Count(usize),
    Word(String),
}

impl TryFrom<BatchSizeRepr> for BatchSize {
    type Error = String;

    fn try_from(r: BatchSizeRepr) -> Result<Self, String> {
        match r {
            BatchSizeRepr::Count(0) => Err("batch_size must be >= 1".into()),
            BatchSizeRepr::Count(n) => Ok(BatchSize::Fixed(n)),
            BatchSizeRepr::Word(w) if w == "fold" => Ok(BatchSize::FoldSize),
            BatchSizeRepr::Word(w) => Err(format!("batch_size {w:?}: expected a count or \"fold\"")),
        }
    }
}

impl From<BatchSize> for BatchSizeRepr {
    fn from(b: BatchSize) -> Self {
        match b {
            BatchSize::Fixed(n) => BatchSizeRepr::Count(n),
            BatchSize::FoldSize => BatchSizeRepr::Word("fold".into()),
        }
    }
}

impl BatchSize {
    pub fn resolve(self, train_cases: usize) -> usize {
        match self {
            BatchSize::Fixed(n) => n,
            BatchSize::FoldSize => train_cases.max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub lr_schedule: LrSchedule,
    pub lr_min: f64,
    pub adam: AdamParams,
    pub l2_coeff: f64,
    pub deep_supervision: bool,
    /// Explicit per-output loss weights (main first); geometric when absent.
    pub ds_weights: Option<Vec<f64>>,
    pub batch_size: BatchSize,
    /// Optimizer steps per epoch; one pass over the training cases when absent.
    pub steps_per_epoch: Option<usize>,
    pub foreground_bias: f64,
    pub mixed_precision: bool,
    pub seed: u64,
    pub folds: usize,
    /// Validate every this many epochs (and always after the last); 0 validates only at the end.
    pub val_every: usize,
    pub preset: Option<Preset>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            lr0: 1e-4,
            lr_schedule: LrSchedule::Cosine,
            lr_min: 0.0,
            adam: AdamParams::default(),
            l2_coeff: CUSTOMIZED_L2,
            deep_supervision: true,
            ds_weights: None,
            batch_size: BatchSize::Fixed(2),
            steps_per_epoch: None,
            foreground_bias: 0.5,
            mixed_precision: true,
            seed: 0,
            folds: 5,
            val_every: 1,
            preset: None,
        }
    }
}

impl TrainConfig {
    pub fn from_preset(preset: Preset) -> Self {
        TrainConfig::default().with_preset(preset)
    }

    /// Overwrites the preset-controlled fields.
    pub fn with_preset(mut self, preset: Preset) -> Self {
        match preset {
            Preset::Default => {
                self.lr0 = 3e-4;
                self.lr_schedule = LrSchedule::Constant;
                self.l2_coeff = 0.0;
                self.deep_supervision = false;
            }
            Preset::Customized => {
                self.lr0 = 1e-4;
                self.lr_schedule = LrSchedule::Cosine;
                self.l2_coeff = CUSTOMIZED_L2;
                self.deep_supervision = true;
            }
        }
        self.mixed_precision = true;
        self.preset = Some(preset);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) || !(self.lr_min.is_finite() && self.lr_min >= 0.0) {
            return fail(format!("learning rates must be finite and >= 0 (lr0 {}, lr_min {})", self.lr0, self.lr_min));
        }
        if !(self.l2_coeff.is_finite() && self.l2_coeff >= 0.0) {
            return fail(format!("l2_coeff {} must be >= 0", self.l2_coeff));
        }
        if !(0.0..=1.0).contains(&self.foreground_bias) {
            return fail(format!("foreground_bias {} outside [0, 1]", self.foreground_bias));
        }
        if self.folds < 1 {
            return fail("folds must be >= 1".into());
        }
        if let BatchSize::Fixed(0) = self.batch_size {
            return fail("batch_size must be >= 1".into());
        }
        if self.steps_per_epoch == Some(0) {
            return fail("steps_per_epoch must be >= 1".into());
        }
        match self.preset {
            Some(Preset::Default)
                if self.lr0 != 3e-4
                    || self.lr_schedule != LrSchedule::Constant
                    || self.l2_coeff != 0.0
                    || self.deep_supervision =>
            {
                fail("preset default requires lr0 0.0003, constant schedule, l2_coeff 0, no deep supervision".into())
            }
            Some(Preset::Customized)
                if self.lr0 != 1e-4
                    || self.lr_schedule != LrSchedule::Cosine
                    || self.l2_coeff <= 0.0
                    || !self.deep_supervision =>
            {
                fail("preset customized requires lr0 0.0001, cosine schedule, l2_coeff > 0, deep supervision".into())
            }
            _ => Ok(()),
        }
    }
}
