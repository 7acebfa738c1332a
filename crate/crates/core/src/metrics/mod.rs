//! Overlap and boundary-distance metrics per case, and cohort summaries.

pub mod distance;
pub mod summary;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{LabelVolume, ORGAN, TUMOR};
use crate::preprocess::percentile_sorted;
pub use distance::{boundary, squared_distance_transform};
pub use summary::{summarize, SummaryStats};

fn check_dims(a: &Array3<bool>, b: &Array3<bool>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?}", b.dim()), format!("{:?}", a.dim())));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)`; 1 when both are empty.
pub fn dice(pred: &Array3<bool>, gt: &Array3<bool>) -> Result<f64> {
    check_dims(pred, gt)?;
    let (mut inter, mut sum) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += usize::from(p && g);
        sum += usize::from(p) + usize::from(g);
    }
    Ok(if sum == 0 { 1.0 } else { 2.0 * inter as f64 / sum as f64 })
}

/// 95th percentile of distances from each `from` boundary voxel to the nearest
/// `to` boundary voxel.
fn directed_p95(from: &Array3<bool>, to_sq_dist: &Array3<f64>) -> f64 {
    let mut d: Vec<f64> = from
        .iter()
        .zip(to_sq_dist.iter())
        .filter(|(&b, _)| b)
        .map(|(_, &sq)| sq.sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    percentile_sorted(&d, 95.0)
}

/// Symmetric 95th-percentile Hausdorff distance in mm between boundary voxel
/// centres; `None` when either mask is empty.
pub fn haus95(pred: &Array3<bool>, gt: &Array3<bool>, spacing: [f64; 3]) -> Result<Option<f64>> {
    check_dims(pred, gt)?;
    if !pred.iter().any(|&v| v) || !gt.iter().any(|&v| v) {
        return Ok(None);
    }
    let (bp, bg) = (boundary(pred), boundary(gt));
    let to_p = squared_distance_transform(&bp, spacing);
    let to_g = squared_distance_transform(&bg, spacing);
    Ok(Some(directed_p95(&bp, &to_g).max(directed_p95(&bg, &to_p))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dsc_organ: f64,
    pub dsc_tumor: f64,
    pub haus95_organ: Option<f64>,
    pub haus95_tumor: Option<f64>,
}

/// Organ metrics on label ≥ 1 (tumor included), tumor metrics on label = 2.
pub fn evaluate_case(case_id: &str, pred: &LabelVolume, gt: &LabelVolume) -> Result<CaseMetrics> {
    if pred.dims() != gt.dims() || !pred.geometry.approx_eq(&gt.geometry) {
        return Err(Error::GeometryMismatch {
            image: format!("{:?} {}", gt.dims(), gt.geometry),
            label: format!("{:?} {}", pred.dims(), pred.geometry),
        });
    }
    let spacing = gt.geometry.spacing;
    let (po, go) = (pred.mask_at_least(ORGAN), gt.mask_at_least(ORGAN));
    let (pt, gt_t) = (pred.mask_equal(TUMOR), gt.mask_equal(TUMOR));
    Ok(CaseMetrics {
        case_id: case_id.into(),
        dsc_organ: dice(&po, &go)?,
        dsc_tumor: dice(&pt, &gt_t)?,
        haus95_organ: haus95(&po, &go, spacing)?,
        haus95_tumor: haus95(&pt, &gt_t, spacing)?,
    })
}
