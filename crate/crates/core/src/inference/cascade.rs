//! Organ-then-tumor cascade with tumor containment in the organ mask.

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::components::{largest_component, Connectivity};
use super::window::{argmax_labels, sliding_window_predict, SlidingWindowConfig};
use crate::error::{Error, Result};
use crate::imaging::{LabelVolume, Volume, BACKGROUND, ORGAN, TUMOR};
use crate::pocketnet::Network;

/// What the tumor network sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Input {
    /// Image only; the organ mask acts solely as a constraint.
    Image,
    /// Image plus the binary organ mask as a second channel.
    ImageAndOrgan,
}

impl Stage2Input {
    pub fn channels(self) -> usize {
        match self {
            Stage2Input::Image => 1,
            Stage2Input::ImageAndOrgan => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub window: SlidingWindowConfig,
    pub stage2_input: Stage2Input,
    pub connectivity: Connectivity,
    /// Keep both stages' probability volumes in the result.
    #[serde(default)]
    pub keep_probabilities: bool,
}

impl CascadeConfig {
    pub fn new(patch_size: [usize; 3]) -> Self {
        CascadeConfig {
            window: SlidingWindowConfig::new(patch_size),
            stage2_input: Stage2Input::ImageAndOrgan,
            connectivity: Connectivity::TwentySix,
            keep_probabilities: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TwoStageResult {
    /// Largest connected stage-1 organ component, labels {0, 1}.
    pub organ_mask: LabelVolume,
    /// Labels {0, 1, 2} with every tumor voxel inside `organ_mask`.
    pub final_labels: LabelVolume,
    pub organ_probabilities: Option<Array4<f32>>,
    pub tumor_probabilities: Option<Array4<f32>>,
}

/// Stacks volumes as channels.
pub fn stack_channels(channels: &[&Array3<f32>]) -> Array4<f32> {
    let views: Vec<_> = channels.iter().map(|c| c.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal channel shapes")
}

pub fn mask_to_channel(mask: &Array3<bool>) -> Array3<f32> {
    mask.mapv(|m| if m { 1.0 } else { 0.0 })
}

/// Stage-1 prediction: argmax organ mask before and after component filtering.
pub fn predict_organ(
    image: &Volume,
    organ_net: &Network<f32>,
    cfg: &CascadeConfig,
) -> Result<(Array3<bool>, Array3<bool>, Array4<f32>)> {
    let probs = sliding_window_predict(organ_net, &stack_channels(&[&image.data]), &cfg.window)?;
    let raw = argmax_labels(&probs).mapv(|l| l == ORGAN);
    let mask = largest_component(&raw, cfg.connectivity);
    Ok((raw, mask, probs))
}

/// Combines stage outputs under the containment rule.
///
/// Tumor = stage-2 tumor ∩ organ mask, then its largest component. Voxels
/// clipped by the intersection become organ if stage 1 called them organ
/// before component filtering, else background. Voxels dropped by the tumor
/// component filter stay organ since they lie inside the mask.
pub fn combine_stages(
    stage1_raw: &Array3<bool>,
    organ_mask: &Array3<bool>,
    stage2: &Array3<u8>,
    conn: Connectivity,
) -> Array3<u8> {
    let contained = ndarray::Zip::from(stage2)
        .and(organ_mask)
        .map_collect(|&s, &m| s == TUMOR && m);
    let tumor = largest_component(&contained, conn);
    ndarray::Zip::from(stage2)
        .and(organ_mask)
        .and(stage1_raw)
        .and(&tumor)
        .map_collect(|&s, &m, &raw, &t| {
            if t {
                TUMOR
            } else if m {
                ORGAN
            } else if s == TUMOR {
                if raw {
                    ORGAN
                } else {
                    BACKGROUND
                }
            } else {
                BACKGROUND
            }
        })
}

pub fn two_stage_segment(
    image: &Volume,
    organ_net: &Network<f32>,
    tumor_net: &Network<f32>,
    cfg: &CascadeConfig,
) -> Result<TwoStageResult> {
    let want = cfg.stage2_input.channels();
    if tumor_net.spec().in_channels != want {
        return Err(Error::Config(format!(
            "stage-2 input mode {:?} needs a tumor network with {want} input channels, found {}",
            cfg.stage2_input,
            tumor_net.spec().in_channels
        )));
    }
    if organ_net.spec().in_channels != 1 || organ_net.spec().out_classes != 2 {
        return Err(Error::Config("organ network must map 1 channel to 2 classes".into()));
    }
    if tumor_net.spec().out_classes != 3 {
        return Err(Error::Config("tumor network must output 3 classes".into()));
    }
    cfg.window.validate_for(organ_net)?;
    cfg.window.validate_for(tumor_net)?;

    let (raw, mask, organ_probs) = predict_organ(image, organ_net, cfg)?;
    let input = match cfg.stage2_input {
        Stage2Input::Image => stack_channels(&[&image.data]),
        Stage2Input::ImageAndOrgan => stack_channels(&[&image.data, &mask_to_channel(&mask)]),
    };
    let tumor_probs = sliding_window_predict(tumor_net, &input, &cfg.window)?;
    let stage2 = argmax_labels(&tumor_probs);
    let labels = combine_stages(&raw, &mask, &stage2, cfg.connectivity);
    Ok(TwoStageResult {
        organ_mask: LabelVolume {
            data: mask.mapv(u8::from),
            geometry: image.geometry,
        },
        final_labels: LabelVolume {
            data: labels,
            geometry: image.geometry,
        },
        organ_probabilities: cfg.keep_probabilities.then_some(organ_probs),
        tumor_probabilities: cfg.keep_probabilities.then_some(tumor_probs),
    })
}

/// Number of tumor voxels outside the organ mask.
pub fn containment_violations(labels: &Array3<u8>, organ_mask: &Array3<u8>) -> usize {
    ndarray::Zip::from(labels)
        .and(organ_mask)
        .fold(0, |n, &l, &m| n + usize::from(l == TUMOR && m == 0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straddling_tumor_is_clipped_to_organ() {
        // 8×8×4: organ occupies x < 4, stage-2 tumor spans x in 2..6.
        let organ = Array3::from_shape_fn((8, 8, 4), |(i, _, _)| i < 4);
        let raw = Array3::from_shape_fn((8, 8, 4), |(i, _, _)| i < 5);
        let stage2 = Array3::from_shape_fn((8, 8, 4), |(i, j, _)| {
            if (2..6).contains(&i) && j < 4 {
                TUMOR
            } else if i < 4 {
                ORGAN
            } else {
                BACKGROUND
            }
        });
        let out = combine_stages(&raw, &organ, &stage2, Connectivity::TwentySix);
        let mask_u8 = organ.mapv(u8::from);
        assert_eq!(containment_violations(&out, &mask_u8), 0);
        for ((i, j, _), &l) in out.indexed_iter() {
            let expect = match (i, j) {
                (2..=3, 0..=3) => TUMOR,
                (0..=3, _) => ORGAN,
                // Clipped tumor: stage 1 called x = 4 organ, x = 5 background.
                (4, 0..=3) => ORGAN,
                _ => BACKGROUND,
            };
            assert_eq!(l, expect, "({i},{j})");
        }
    }

    #[test]
    fn empty_organ_gives_empty_tumor() {
        let organ = Array3::from_elem((4, 4, 4), false);
        let stage2 = Array3::from_elem((4, 4, 4), TUMOR);
        let out = combine_stages(&organ, &organ, &stage2, Connectivity::TwentySix);
        assert!(out.iter().all(|&l| l != TUMOR));
    }

    #[test]
    fn tumor_keeps_largest_component_inside_organ() {
        let organ = Array3::from_elem((6, 1, 1), true);
        let stage2 = Array3::from_shape_vec((6, 1, 1), vec![2, 2, 1, 2, 0, 0]).unwrap();
        let out = combine_stages(&organ, &organ, &stage2, Connectivity::TwentySix);
        assert_eq!(out.iter().copied().collect::<Vec<_>>(), vec![2, 2, 1, 1, 1, 1]);
    }
}
