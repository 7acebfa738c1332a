//! Run configuration, run-directory layout and the end-to-end commands.

mod commands;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{CascadeConfig, Connectivity, SlidingWindowConfig, Stage2Input};
use crate::pocketnet::ArchSpec;
use crate::preprocess::PreprocessConfig;
use crate::training::TrainConfig;

pub use commands::{
    audit_containment, cmd_crossval, cmd_evaluate, cmd_infer, cmd_preprocess, cmd_report, cmd_train, load_cases,
    stage_training_cases, CrossvalOutcome, FoldOutcome, PatchReport, PreprocessOutcome, ReportOutcome,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPaths {
    /// Case manifest (CSV, or TSV by extension).
    pub manifest: PathBuf,
    /// Root of everything a run writes: cache, checkpoints, predictions, tables.
    pub work_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Name written into metric tables.
    #[serde(default = "default_dataset")]
    pub dataset: String,
    pub paths: RunPaths,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    /// Organ network: one input channel, two classes.
    pub stage1: ArchSpec,
    /// Tumor network: three classes; input channels follow `stage2_input`.
    pub stage2: ArchSpec,
    #[serde(default)]
    pub train: TrainConfig,
    /// Training patch and inference window share `window.patch_size`.
    pub window: SlidingWindowConfig,
    #[serde(default = "default_stage2_input")]
    pub stage2_input: Stage2Input,
    #[serde(default = "default_connectivity")]
    pub connectivity: Connectivity,
}

fn default_dataset() -> String {
    "dataset".into()
}

fn default_stage2_input() -> Stage2Input {
    Stage2Input::ImageAndOrgan
}

fn default_connectivity() -> Connectivity {
    Connectivity::TwentySix
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Organ,
    Tumor,
}

impl Stage {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::Organ),
            2 => Ok(Stage::Tumor),
            _ => Err(Error::Config(format!("stage must be 1 or 2, got {n}"))),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Stage::Organ => 1,
            Stage::Tumor => 2,
        }
    }
}

impl RunConfig {
    /// Parses a TOML file; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.manifest, &mut cfg.paths.work_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn arch(&self, stage: Stage) -> &ArchSpec {
        match stage {
            Stage::Organ => &self.stage1,
            Stage::Tumor => &self.stage2,
        }
    }

    pub fn cascade(&self) -> CascadeConfig {
        CascadeConfig {
            window: self.window.clone(),
            stage2_input: self.stage2_input,
            connectivity: self.connectivity,
            keep_probabilities: false,
        }
    }

    /// Checks field ranges and cross-field consistency, without touching the filesystem.
    pub fn validate_values(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.train.validate()?;
        for (stage, spec) in [(1, &self.stage1), (2, &self.stage2)] {
            spec.validate()
                .map_err(|e| Error::Config(format!("stage{stage}: {e}")))?;
            spec.check_input_dims(self.window.patch_size)
                .map_err(|e| Error::Config(format!("stage{stage} vs window.patch_size: {e}")))?;
        }
        if self.stage1.in_channels != 1 || self.stage1.out_classes != 2 {
            return Err(Error::Config(format!(
                "stage1 must map 1 channel to 2 classes, found {} -> {}",
                self.stage1.in_channels, self.stage1.out_classes
            )));
        }
        if self.stage2.out_classes != 3 {
            return Err(Error::Config(format!(
                "stage2 must output 3 classes, found {}",
                self.stage2.out_classes
            )));
        }
        let want = self.stage2_input.channels();
        if self.stage2.in_channels != want {
            return Err(Error::Config(format!(
                "stage2_input {:?} needs stage2.in_channels = {want}, found {}",
                self.stage2_input, self.stage2.in_channels
            )));
        }
        if !(0.0..1.0).contains(&self.window.overlap) {
            return Err(Error::Config(format!("window.overlap {} outside [0, 1)", self.window.overlap)));
        }
        if let Some(preset) = self.train.preset {
            let expect = self.train.clone().with_preset(preset);
            if expect != self.train {
                return Err(Error::Config(format!(
                    "train fields disagree with preset {preset:?}: lr0 {} / {}, schedule {:?} / {:?}, l2 {} / {}, deep supervision {} / {}, mixed precision {} / {} (file / preset)",
                    self.train.lr0,
                    expect.lr0,
                    self.train.lr_schedule,
                    expect.lr_schedule,
                    self.train.l2_coeff,
                    expect.l2_coeff,
                    self.train.deep_supervision,
                    expect.deep_supervision,
                    self.train.mixed_precision,
                    expect.mixed_precision
                )));
            }
        }
        Ok(())
    }

    /// Full validation: values, plus the manifest must exist and the work
    /// directory must exist or be creatable under an existing parent.
    pub fn validate(&self) -> Result<()> {
        self.validate_values()?;
        if !self.paths.manifest.is_file() {
            return Err(Error::Config(format!(
                "manifest {} does not exist",
                self.paths.manifest.display()
            )));
        }
        let wd = &self.paths.work_dir;
        let parent_ok = wd
            .parent()
            .map(|p| p.as_os_str().is_empty() || p.is_dir())
            .unwrap_or(true);
        if !(wd.is_dir() || (!wd.exists() && parent_ok)) {
            return Err(Error::Config(format!(
                "work_dir {} is neither a directory nor creatable",
                wd.display()
            )));
        }
        Ok(())
    }
}

/// Where each artifact of a run lives under `work_dir`.
///
/// ```text
/// cache/<case>.bin              preprocessed cases
/// patch_report.json
/// stage{1,2}[-tag]/config.toml  snapshot of the effective config
///     folds.json
///     fold<k>/history.tsv, best.ckpt, final.ckpt
///     full/...                  model trained on every case
///     heldout/<case>.organ.nii.gz, <case>.raw.nii.gz   (stage 1, preprocessed grid)
///     predictions/<case>.nii.gz (input grid; stage 2 adds <case>.organ.nii.gz)
///     metrics.tsv
/// ```
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
    /// Suffix separating runs of the same stage, e.g. per preset.
    pub tag: Option<String>,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>, tag: Option<String>) -> Self {
        RunLayout { root: root.into(), tag }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.root.join("cache")
    }

    pub fn patch_report(&self) -> PathBuf {
        self.root.join("patch_report.json")
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        let name = match &self.tag {
            Some(t) => format!("stage{}-{t}", stage.number()),
            None => format!("stage{}", stage.number()),
        };
        self.root.join(name)
    }

    pub fn fold_dir(&self, stage: Stage, fold: usize) -> PathBuf {
        self.stage_dir(stage).join(format!("fold{fold}"))
    }

    pub fn full_dir(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join("full")
    }

    pub fn folds_file(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join("folds.json")
    }

    pub fn organ_heldout(&self, case_id: &str) -> PathBuf {
        self.stage_dir(Stage::Organ).join("heldout").join(format!("{case_id}.organ.nii.gz"))
    }

    pub fn raw_organ_heldout(&self, case_id: &str) -> PathBuf {
        self.stage_dir(Stage::Organ).join("heldout").join(format!("{case_id}.raw.nii.gz"))
    }

    pub fn prediction(&self, stage: Stage, case_id: &str) -> PathBuf {
        self.stage_dir(stage).join("predictions").join(format!("{case_id}.nii.gz"))
    }

    pub fn prediction_mask(&self, case_id: &str) -> PathBuf {
        self.stage_dir(Stage::Tumor)
            .join("predictions")
            .join(format!("{case_id}.organ.nii.gz"))
    }

    pub fn metrics(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join("metrics.tsv")
    }
}
