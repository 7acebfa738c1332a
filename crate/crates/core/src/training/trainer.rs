//! Patch-sampled mini-batch training with periodic sliding-window validation.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::loss::{apply_l2, deep_supervision_loss, LabelBatch};
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::inference::{argmax_labels, sliding_window_predict, SlidingWindowConfig};
use crate::metrics::dice;
use crate::pocketnet::{save_checkpoint, ArchSpec, Network, Tensor};
use crate::preprocess::sample_patch;

/// A preprocessed case held in memory: `channels × X × Y × Z` image and labels.
#[derive(Clone, Debug)]
pub struct TrainingCase {
    pub case_id: String,
    pub image: Array4<f32>,
    pub label: Array3<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean training loss (including the L2 term) over the epoch's steps.
    pub loss: f64,
    pub lr: f64,
    /// Validation DSC for each foreground class `c` on label ≥ c, when validated.
    pub val_dice: Option<Vec<f64>>,
}

impl EpochRecord {
    pub fn val_mean(&self) -> Option<f64> {
        self.val_dice
            .as_ref()
            .filter(|d| !d.is_empty())
            .map(|d| d.iter().sum::<f64>() / d.len() as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_checkpoint: Option<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainHistory {
    pub fn best_score(&self) -> Option<f64> {
        let e = self.best_epoch?;
        self.records.iter().find(|r| r.epoch == e)?.val_mean()
    }

    /// One tab-separated row per epoch; `NA` where not validated.
    pub fn to_tsv(&self, classes: usize) -> String {
        let mut s = String::from("epoch\tloss\tlr\tval_mean");
        for c in 1..classes {
            let _ = write!(s, "\tval_dsc_class{c}");
        }
        s.push('\n');
        for r in &self.records {
            let _ = write!(s, "{}\t{}\t{}", r.epoch, r.loss, r.lr);
            match (&r.val_dice, r.val_mean()) {
                (Some(d), Some(m)) => {
                    let _ = write!(s, "\t{m}");
                    for v in d {
                        let _ = write!(s, "\t{v}");
                    }
                }
                _ => {
                    for _ in 0..classes {
                        s.push_str("\tNA");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Everything besides the hyperparameters that a training run needs.
#[derive(Clone, Debug)]
pub struct TrainSetup<'a> {
    pub patch_size: [usize; 3],
    pub validation: &'a [TrainingCase],
    pub window: SlidingWindowConfig,
    /// Checkpoints and `history.tsv` go here when set.
    pub run_dir: Option<&'a Path>,
    /// Merged into every checkpoint's provenance header.
    pub checkpoint_info: serde_json::Value,
}

impl<'a> TrainSetup<'a> {
    pub fn new(patch_size: [usize; 3]) -> Self {
        TrainSetup {
            patch_size,
            validation: &[],
            window: SlidingWindowConfig::new(patch_size),
            run_dir: None,
            checkpoint_info: serde_json::Value::Null,
        }
    }
}

/// `spec` with auxiliary heads matching the deep-supervision setting.
pub fn arch_for_training(spec: &ArchSpec, cfg: &TrainConfig) -> ArchSpec {
    ArchSpec {
        deep_supervision_heads: if cfg.deep_supervision { spec.levels.saturating_sub(1) } else { 0 },
        ..spec.clone()
    }
}

/// A mini-batch and where each sample came from.
pub struct Batch {
    pub input: Tensor<f32>,
    pub target: LabelBatch,
    pub provenance: Vec<String>,
}

pub fn draw_batch<R: Rng>(
    cases: &[TrainingCase],
    picks: &[usize],
    patch: [usize; 3],
    foreground_bias: f64,
    rng: &mut R,
) -> Result<Batch> {
    let channels = cases[picks[0]].image.dim().0;
    let voxels: usize = patch.iter().product();
    let mut input = Vec::with_capacity(picks.len() * channels * voxels);
    let mut labels = Vec::with_capacity(picks.len() * voxels);
    let mut provenance = Vec::with_capacity(picks.len());
    for &i in picks {
        let c = &cases[i];
        if c.image.dim().0 != channels {
            return Err(Error::shape(
                format!("{channels} channels"),
                format!("{} channels in case {}", c.image.dim().0, c.case_id),
            ));
        }
        let p = sample_patch(&c.case_id, &c.image, &c.label, patch, rng, foreground_bias)?;
        input.extend(p.image.iter().copied());
        labels.extend(p.label.iter().copied());
        provenance.push(format!("{}@{:?}", p.case_id, p.corner));
    }
    let n = picks.len();
    Ok(Batch {
        input: Tensor::from_vec([n, channels, patch[0], patch[1], patch[2]], input),
        target: LabelBatch::new([n, patch[0], patch[1], patch[2]], labels)?,
        provenance,
    })
}

fn weights(cfg: &TrainConfig) -> Option<&[f64]> {
    cfg.deep_supervision.then_some(()).and(cfg.ds_weights.as_deref())
}

/// Training-mode loss on a batch without touching gradients or weights.
pub fn batch_loss(net: &mut Network<f32>, batch: &Batch, cfg: &TrainConfig) -> Result<f64> {
    let (out, _) = net.forward_train(&batch.input)?;
    let l = deep_supervision_loss(&out, &batch.target, weights(cfg))?;
    Ok(l.loss + super::loss::l2_penalty(net, cfg.l2_coeff))
}

/// One optimizer step; returns the loss before the update.
pub fn train_step(
    net: &mut Network<f32>,
    adam: &mut Adam,
    batch: &Batch,
    cfg: &TrainConfig,
    lr: f64,
    epoch: usize,
) -> Result<f64> {
    net.zero_grad();
    let (out, tape) = net.forward_train(&batch.input)?;
    let l = deep_supervision_loss(&out, &batch.target, weights(cfg))?;
    if !l.loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            loss: l.loss,
            epoch,
            provenance: batch.provenance.join(", "),
        });
    }
    net.backward(&tape, &l.main, &l.aux);
    let penalty = apply_l2(net, cfg.l2_coeff);
    adam.step(net, lr);
    Ok(l.loss + penalty)
}

/// DSC per foreground class (label ≥ c) for each validation case, averaged over cases.
pub fn validate(net: &Network<f32>, cases: &[TrainingCase], window: &SlidingWindowConfig) -> Result<Vec<f64>> {
    let classes = net.spec().out_classes;
    let mut sums = vec![0.0; classes - 1];
    for case in cases {
        let pred = argmax_labels(&sliding_window_predict(net, &case.image, window)?);
        for (c, sum) in (1..classes).zip(&mut sums) {
            let c = c as u8;
            *sum += dice(&pred.mapv(|l| l >= c), &case.label.mapv(|l| l >= c))?;
        }
    }
    Ok(sums.into_iter().map(|s| s / cases.len() as f64).collect())
}

fn with_info(base: &serde_json::Value, extra: serde_json::Value) -> serde_json::Value {
    let mut out = match base {
        serde_json::Value::Object(m) => m.clone(),
        serde_json::Value::Null => serde_json::Map::new(),
        other => {
            let mut m = serde_json::Map::new();
            m.insert("info".into(), other.clone());
            m
        }
    };
    if let serde_json::Value::Object(e) = extra {
        out.extend(e);
    }
    serde_json::Value::Object(out)
}

/// Runs `cfg.epochs` epochs of Adam on patch batches drawn from `cases`.
///
/// The network must carry one auxiliary head per level below the top when
/// deep supervision is on and none otherwise (see [`arch_for_training`]).
pub fn train<R: Rng>(
    mut net: Network<f32>,
    cases: &[TrainingCase],
    cfg: &TrainConfig,
    setup: &TrainSetup<'_>,
    rng: &mut R,
) -> Result<(Network<f32>, TrainHistory)> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::Empty("no training cases".into()));
    }
    let spec = net.spec().clone();
    let want_heads = arch_for_training(&spec, cfg).deep_supervision_heads;
    if spec.deep_supervision_heads != want_heads {
        return Err(Error::Config(format!(
            "network has {} auxiliary heads; deep_supervision = {} needs {want_heads}",
            spec.deep_supervision_heads, cfg.deep_supervision
        )));
    }
    spec.check_input_dims(setup.patch_size)?;
    if !setup.validation.is_empty() {
        setup.window.validate_for(&net)?;
    }
    net.mixed_precision = cfg.mixed_precision;

    let batch_size = cfg.batch_size.resolve(cases.len());
    let steps = cfg.steps_per_epoch.unwrap_or_else(|| cases.len().div_ceil(batch_size));
    let mut adam = Adam::new(&net, cfg.adam);
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut history = TrainHistory::default();
    let mut best: Option<f64> = None;
    if let Some(dir) = setup.run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_schedule.lr(epoch - 1, cfg.epochs, cfg.lr0, cfg.lr_min)?;
        let mut total = 0.0;
        for _ in 0..steps {
            let mut picks = Vec::with_capacity(batch_size);
            while picks.len() < batch_size {
                if queue.is_empty() {
                    let mut order: Vec<usize> = (0..cases.len()).collect();
                    order.shuffle(rng);
                    queue.extend(order);
                }
                picks.push(queue.pop_front().expect("refilled"));
            }
            let batch = draw_batch(cases, &picks, setup.patch_size, cfg.foreground_bias, rng)?;
            total += train_step(&mut net, &mut adam, &batch, cfg, lr, epoch)?;
        }

        let due = epoch == cfg.epochs || (cfg.val_every > 0 && epoch % cfg.val_every == 0);
        let val_dice = if due && !setup.validation.is_empty() {
            Some(validate(&net, setup.validation, &setup.window)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            loss: total / steps as f64,
            lr,
            val_dice,
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.5}, lr {:.3e}{}",
            cfg.epochs,
            record.loss,
            lr,
            record.val_mean().map(|m| format!(", val DSC {m:.4}")).unwrap_or_default()
        );
        if let Some(score) = record.val_mean() {
            if best.is_none_or(|b| score > b) {
                best = Some(score);
                history.best_epoch = Some(epoch);
                if let Some(dir) = setup.run_dir {
                    let path = dir.join("best.ckpt");
                    let info = serde_json::json!({"epoch": epoch, "val_mean_dsc": score, "kind": "best"});
                    save_checkpoint(&net, with_info(&setup.checkpoint_info, info), &path)?;
                    history.best_checkpoint = Some(path);
                }
            }
        }
        history.records.push(record);
        if let Some(dir) = setup.run_dir {
            let path = dir.join("history.tsv");
            std::fs::write(&path, history.to_tsv(spec.out_classes)).map_err(|e| Error::io(&path, e))?;
        }
    }
    if let Some(dir) = setup.run_dir {
        let path = dir.join("final.ckpt");
        let info = serde_json::json!({"epoch": cfg.epochs, "kind": "final"});
        save_checkpoint(&net, with_info(&setup.checkpoint_info, info), &path)?;
        history.final_checkpoint = Some(path);
        let path = dir.join("history.tsv");
        std::fs::write(&path, history.to_tsv(spec.out_classes)).map_err(|e| Error::io(&path, e))?;
    }
    Ok((net, history))
}
