//! Whole-volume prediction by overlapping patch windows.

use ndarray::{s, Array3, Array4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pocketnet::{Network, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blend {
    Uniform,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlidingWindowConfig {
    pub patch_size: [usize; 3],
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    #[serde(default = "default_blend")]
    pub blend: Blend,
    /// Evaluate windows one at a time on the calling thread.
    #[serde(default)]
    pub deterministic: bool,
}

fn default_overlap() -> f64 {
    0.5
}

fn default_blend() -> Blend {
    Blend::Gaussian
}

impl SlidingWindowConfig {
    pub fn new(patch_size: [usize; 3]) -> Self {
        SlidingWindowConfig {
            patch_size,
            overlap: 0.5,
            blend: Blend::Gaussian,
            deterministic: false,
        }
    }

    pub fn validate_for(&self, net: &Network<f32>) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap {} outside [0, 1)", self.overlap)));
        }
        net.spec().check_input_dims(self.patch_size)
    }
}

/// Evenly spaced window starts covering `dim` (which must be ≥ `patch`).
pub fn window_starts(dim: usize, patch: usize, overlap: f64) -> Vec<usize> {
    if dim <= patch {
        return vec![0];
    }
    let step = ((patch as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let n = (dim - patch).div_ceil(step) + 1;
    (0..n)
        .map(|i| ((i * (dim - patch)) as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

/// Separable Gaussian (σ = patch/8, peak 1) or uniform blend weights.
pub fn blend_weights(patch: [usize; 3], blend: Blend) -> Array3<f32> {
    match blend {
        Blend::Uniform => Array3::ones((patch[0], patch[1], patch[2])),
        Blend::Gaussian => {
            let axis = |n: usize| -> Vec<f64> {
                let c = (n as f64 - 1.0) / 2.0;
                let sigma = n as f64 / 8.0;
                (0..n)
                    .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
                    .collect()
            };
            let (wx, wy, wz) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
            Array3::from_shape_fn((patch[0], patch[1], patch[2]), |(i, j, k)| {
                // Floor keeps border voxels from getting vanishing weight.
                (wx[i] * wy[j] * wz[k]).max(1e-3) as f32
            })
        }
    }
}

/// Per-voxel softmax of one sample's logits (`classes × voxels`).
pub fn softmax_channels(logits: &[f32], classes: usize) -> Vec<f32> {
    let v = logits.len() / classes;
    let mut out = vec![0f32; logits.len()];
    for i in 0..v {
        let mx = (0..classes).map(|c| logits[c * v + i]).fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0f64;
        for c in 0..classes {
            let e = f64::from(logits[c * v + i] - mx).exp();
            out[c * v + i] = e as f32;
            sum += e;
        }
        for c in 0..classes {
            out[c * v + i] = (f64::from(out[c * v + i]) / sum) as f32;
        }
    }
    out
}

/// Class probabilities (`classes × X × Y × Z`) for a `channels × X × Y × Z` input.
pub fn sliding_window_predict(
    net: &Network<f32>,
    input: &Array4<f32>,
    cfg: &SlidingWindowConfig,
) -> Result<Array4<f32>> {
    cfg.validate_for(net)?;
    let (c, x, y, z) = input.dim();
    if c != net.spec().in_channels {
        return Err(Error::shape(
            format!("{} input channels", net.spec().in_channels),
            format!("{c} channels"),
        ));
    }
    let p = cfg.patch_size;
    let dims = [x, y, z];
    // Symmetric zero padding up to the patch size.
    let padded_dims = [0, 1, 2].map(|k| dims[k].max(p[k]));
    let pad_lo = [0, 1, 2].map(|k| (padded_dims[k] - dims[k]) / 2);
    let padded = if padded_dims == dims {
        input.clone()
    } else {
        let mut a = Array4::zeros((c, padded_dims[0], padded_dims[1], padded_dims[2]));
        a.slice_mut(s![
            ..,
            pad_lo[0]..pad_lo[0] + x,
            pad_lo[1]..pad_lo[1] + y,
            pad_lo[2]..pad_lo[2] + z
        ])
        .assign(input);
        a
    };
    let starts = [0, 1, 2].map(|k| window_starts(padded_dims[k], p[k], cfg.overlap));
    let mut windows = Vec::new();
    for &a in &starts[0] {
        for &b in &starts[1] {
            for &cc in &starts[2] {
                windows.push([a, b, cc]);
            }
        }
    }
    let classes = net.spec().out_classes;
    let run = |w: &[usize; 3]| -> Result<Vec<f32>> {
        let view = padded.slice(s![.., w[0]..w[0] + p[0], w[1]..w[1] + p[1], w[2]..w[2] + p[2]]);
        let t = Tensor::from_vec([1, c, p[0], p[1], p[2]], view.iter().copied().collect());
        let out = net.forward(&t)?;
        Ok(softmax_channels(out.main.data(), classes))
    };

    let probs = if windows.len() == 1 {
        let v = run(&windows[0])?;
        Array4::from_shape_vec((classes, p[0], p[1], p[2]), v).expect("window shape")
    } else {
        let weights = blend_weights(p, cfg.blend);
        let mut acc = Array4::<f32>::zeros((classes, padded_dims[0], padded_dims[1], padded_dims[2]));
        let mut wsum = Array3::<f32>::zeros((padded_dims[0], padded_dims[1], padded_dims[2]));
        let chunk = if cfg.deterministic { 1 } else { rayon::current_num_threads().max(1) };
        for group in windows.chunks(chunk) {
            let outs: Vec<Result<Vec<f32>>> = if chunk == 1 {
                group.iter().map(run).collect()
            } else {
                group.par_iter().map(run).collect()
            };
            // Accumulate in window order for a fixed reduction sequence.
            for (w, out) in group.iter().zip(outs) {
                let out = Array4::from_shape_vec((classes, p[0], p[1], p[2]), out?).expect("window shape");
                let region = s![w[0]..w[0] + p[0], w[1]..w[1] + p[1], w[2]..w[2] + p[2]];
                wsum.slice_mut(region).zip_mut_with(&weights, |a, &b| *a += b);
                for (cls, o) in out.axis_iter(Axis(0)).enumerate() {
                    let mut dst = acc.index_axis_mut(Axis(0), cls);
                    let mut dst = dst.slice_mut(region);
                    ndarray::Zip::from(&mut dst).and(&o).and(&weights).for_each(|a, &v, &wt| *a += v * wt);
                }
            }
        }
        for mut ch in acc.axis_iter_mut(Axis(0)) {
            ch.zip_mut_with(&wsum, |a, &w| *a /= w);
        }
        acc
    };
    Ok(probs
        .slice(s![
            ..,
            pad_lo[0]..pad_lo[0] + x,
            pad_lo[1]..pad_lo[1] + y,
            pad_lo[2]..pad_lo[2] + z
        ])
        .to_owned())
}

/// Per-voxel argmax; ties go to the lower class index.
pub fn argmax_labels(probs: &Array4<f32>) -> Array3<u8> {
    let (c, x, y, z) = probs.dim();
    Array3::from_shape_fn((x, y, z), |(i, j, k)| {
        let mut best = 0;
        for cls in 1..c {
            if probs[[cls, i, j, k]] > probs[[best, i, j, k]] {
                best = cls;
            }
        }
        best as u8
    })
}
