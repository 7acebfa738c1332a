//! Reorient, resample, window and normalize; patch-size derivation and patch sampling.

pub mod cache;
pub mod manifest;
pub mod patch;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{resample_labels, resample_labels_to, resample_volume, Interpolation, LabelVolume, Orientation, Volume};

pub use cache::{load_cached, preprocess_to_cache, CachedCase, SourceGrid};
pub use manifest::{median_dims, read_manifest, write_manifest, DatasetManifest, ManifestCase};
pub use patch::{sample_patch, Patch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Zscore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_orientation: Orientation,
    pub target_spacing: [f64; 3],
    /// Clipping percentiles `(low, high)` in `[0, 100]`.
    pub window_percentiles: (f64, f64),
    pub normalization: Normalization,
    pub max_patch: [usize; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_orientation: Orientation::RAI,
            target_spacing: [0.469, 0.469, 5.0],
            window_percentiles: (0.5, 99.5),
            normalization: Normalization::Zscore,
            max_patch: [256, 256, 128],
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.window_percentiles;
        if !(0.0 <= lo && lo < hi && hi <= 100.0) {
            return Err(Error::Config(format!(
                "window percentiles ({lo}, {hi}) must satisfy 0 <= low < high <= 100"
            )));
        }
        if self.max_patch.contains(&0) {
            return Err(Error::Config(format!("max_patch {:?} must be >= 1", self.max_patch)));
        }
        if self.target_spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Config(format!(
                "target spacing {:?} must be positive",
                self.target_spacing
            )));
        }
        Ok(())
    }
}

/// Percentile of sorted data with linear interpolation between order statistics.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Clips to the configured percentiles, then z-scores with the clipped
/// volume's mean and population standard deviation.
pub fn window_normalize(vol: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    let (lo_q, hi_q) = cfg.window_percentiles;
    let mut sorted: Vec<f64> = vol.data.iter().map(|&v| f64::from(v)).collect();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(Error::Geometry("volume contains non-finite intensities".into()));
    }
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&sorted, lo_q);
    let hi = percentile_sorted(&sorted, hi_q);
    let clipped: Vec<f64> = vol.data.iter().map(|&v| f64::from(v).clamp(lo, hi)).collect();
    let n = clipped.len() as f64;
    let mean = clipped.iter().sum::<f64>() / n;
    let var = clipped.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let dims = vol.dims();
    let data = if std > 0.0 {
        Array3::from_shape_vec(
            (dims[0], dims[1], dims[2]),
            clipped.iter().map(|v| ((v - mean) / std) as f32).collect(),
        )
        .expect("same element count")
    } else {
        Array3::zeros((dims[0], dims[1], dims[2]))
    };
    Ok(Volume {
        data,
        geometry: vol.geometry,
    })
}

/// Per axis `min(max_patch, 2^⌊log2 median⌋)`.
pub fn derive_patch_size(median_dims: [usize; 3], max_patch: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|k| {
        let m = median_dims[k].max(1);
        let pow = 1usize << (usize::BITS - 1 - m.leading_zeros());
        pow.min(max_patch[k])
    })
}

fn same_grid(a: &Volume, b: &LabelVolume) -> bool {
    a.dims() == b.dims() && a.geometry.approx_eq(&b.geometry)
}

/// Reorient, resample (linear image, nearest labels), window and normalize.
pub fn preprocess_case(
    image: &Volume,
    label: Option<&LabelVolume>,
    cfg: &PreprocessConfig,
) -> Result<(Volume, Option<LabelVolume>)> {
    cfg.validate()?;
    if let Some(l) = label {
        if !same_grid(image, l) {
            return Err(Error::GeometryMismatch {
                image: format!("{:?} {}", image.dims(), image.geometry),
                label: format!("{:?} {}", l.dims(), l.geometry),
            });
        }
    }
    let img = image.reorient(cfg.target_orientation);
    let img = resample_volume(&img, cfg.target_spacing, Interpolation::Linear)?;
    let img = window_normalize(&img, cfg)?;
    let lbl = label
        .map(|l| {
            // Grids agree up to tolerance; adopt the image's exact geometry.
            let l = LabelVolume {
                data: l.data.clone(),
                geometry: image.geometry,
            }
            .reorient(cfg.target_orientation);
            resample_labels(&l, cfg.target_spacing, Interpolation::Nearest)
        })
        .transpose()?;
    Ok((img, lbl))
}

/// Maps a label volume on the preprocessed grid back onto the raw input grid
/// (nearest-neighbour resampling, then the input orientation).
pub fn restore_labels(pred: &LabelVolume, source: &SourceGrid) -> Result<LabelVolume> {
    let grid = LabelVolume::zeros(source.dims, source.geometry).reorient(pred.geometry.orientation);
    let on_grid = resample_labels_to(pred, &grid.geometry, grid.dims(), Interpolation::Nearest)?;
    let mut out = on_grid.reorient(source.geometry.orientation);
    debug_assert_eq!(out.dims(), source.dims);
    out.geometry = source.geometry;
    Ok(out)
}
