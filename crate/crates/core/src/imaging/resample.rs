//! Axis-aligned resampling between grids that share an orientation.
//!
//! Output voxel 0 keeps the input origin; output voxel `j` samples the input
//! at continuous index `j * out_spacing / in_spacing`, clamped to the grid.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::geometry::Geometry;
use super::volume::{dims_of, LabelVolume, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Linear,
    Nearest,
}

/// Output dims: round-half-away-from-zero of `dims * spacing / target`, at least 1.
pub fn resampled_dims(dims: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    [0, 1, 2].map(|k| ((dims[k] as f64 * spacing[k] / target[k]).round() as usize).max(1))
}

fn check_spacing(target: [f64; 3]) -> Result<()> {
    if target.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Geometry(format!(
            "target spacing {target:?} must be positive"
        )));
    }
    Ok(())
}

/// Per-axis continuous source index for every output index along that axis.
fn axis_positions(src: &Geometry, dst: &Geometry, dst_dims: [usize; 3]) -> Result<[Vec<f64>; 3]> {
    if src.orientation != dst.orientation {
        return Err(Error::Geometry(format!(
            "resampling requires matching orientation ({} vs {})",
            src.orientation, dst.orientation
        )));
    }
    let base = src.index(dst.world([0.0; 3]));
    Ok([0, 1, 2].map(|k| {
        (0..dst_dims[k])
            .map(|j| base[k] + j as f64 * dst.spacing[k] / src.spacing[k])
            .collect()
    }))
}

struct LinearTap {
    lo: usize,
    hi: usize,
    w: f64,
}

fn linear_taps(pos: &[f64], n: usize) -> Vec<LinearTap> {
    let max = (n - 1) as f64;
    pos.iter()
        .map(|&p| {
            let p = p.clamp(0.0, max);
            let lo = p.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            LinearTap {
                lo,
                hi,
                w: p - lo as f64,
            }
        })
        .collect()
}

fn nearest_taps(pos: &[f64], n: usize) -> Vec<usize> {
    let max = (n - 1) as f64;
    // f64::round rounds half away from zero.
    pos.iter().map(|&p| p.round().clamp(0.0, max) as usize).collect()
}

fn sample_linear(data: &Array3<f32>, pos: &[Vec<f64>; 3]) -> Array3<f32> {
    let d = dims_of(data);
    let tx = linear_taps(&pos[0], d[0]);
    let ty = linear_taps(&pos[1], d[1]);
    let tz = linear_taps(&pos[2], d[2]);
    Array3::from_shape_fn((tx.len(), ty.len(), tz.len()), |(i, j, k)| {
        let (a, b, c) = (&tx[i], &ty[j], &tz[k]);
        let at = |x: usize, y: usize, z: usize| f64::from(data[[x, y, z]]);
        let c00 = at(a.lo, b.lo, c.lo) * (1.0 - a.w) + at(a.hi, b.lo, c.lo) * a.w;
        let c10 = at(a.lo, b.hi, c.lo) * (1.0 - a.w) + at(a.hi, b.hi, c.lo) * a.w;
        let c01 = at(a.lo, b.lo, c.hi) * (1.0 - a.w) + at(a.hi, b.lo, c.hi) * a.w;
        let c11 = at(a.lo, b.hi, c.hi) * (1.0 - a.w) + at(a.hi, b.hi, c.hi) * a.w;
        let c0 = c00 * (1.0 - b.w) + c10 * b.w;
        let c1 = c01 * (1.0 - b.w) + c11 * b.w;
        (c0 * (1.0 - c.w) + c1 * c.w) as f32
    })
}

fn sample_nearest<T: Copy>(data: &Array3<T>, pos: &[Vec<f64>; 3]) -> Array3<T> {
    let d = dims_of(data);
    let tx = nearest_taps(&pos[0], d[0]);
    let ty = nearest_taps(&pos[1], d[1]);
    let tz = nearest_taps(&pos[2], d[2]);
    Array3::from_shape_fn((tx.len(), ty.len(), tz.len()), |(i, j, k)| {
        data[[tx[i], ty[j], tz[k]]]
    })
}

fn target_geometry(g: &Geometry, target: [f64; 3]) -> Geometry {
    Geometry {
        spacing: target,
        ..*g
    }
}

pub fn resample_volume(vol: &Volume, target: [f64; 3], mode: Interpolation) -> Result<Volume> {
    check_spacing(target)?;
    let dims = resampled_dims(vol.dims(), vol.geometry.spacing, target);
    resample_volume_to(vol, &target_geometry(&vol.geometry, target), dims, mode)
}

pub fn resample_labels(lbl: &LabelVolume, target: [f64; 3], mode: Interpolation) -> Result<LabelVolume> {
    check_spacing(target)?;
    let dims = resampled_dims(lbl.dims(), lbl.geometry.spacing, target);
    resample_labels_to(lbl, &target_geometry(&lbl.geometry, target), dims, mode)
}

/// Resamples onto an explicit reference grid with the same orientation.
pub fn resample_volume_to(
    vol: &Volume,
    geometry: &Geometry,
    dims: [usize; 3],
    mode: Interpolation,
) -> Result<Volume> {
    geometry.validate()?;
    let pos = axis_positions(&vol.geometry, geometry, dims)?;
    let data = match mode {
        Interpolation::Linear => sample_linear(&vol.data, &pos),
        Interpolation::Nearest => sample_nearest(&vol.data, &pos),
    };
    Ok(Volume {
        data,
        geometry: *geometry,
    })
}

/// Label variant of [`resample_volume_to`]; only nearest-neighbour is allowed.
pub fn resample_labels_to(
    lbl: &LabelVolume,
    geometry: &Geometry,
    dims: [usize; 3],
    mode: Interpolation,
) -> Result<LabelVolume> {
    if mode != Interpolation::Nearest {
        return Err(Error::LabelInterpolation);
    }
    geometry.validate()?;
    let pos = axis_positions(&lbl.geometry, geometry, dims)?;
    Ok(LabelVolume {
        data: sample_nearest(&lbl.data, &pos),
        geometry: *geometry,
    })
}
