//! Random training patches with optional foreground-centred sampling.

use ndarray::{Array3, Array4};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// Channels × px × py × pz.
    pub image: Array4<f32>,
    pub label: Array3<u8>,
    pub case_id: String,
    /// Input index of the patch's first voxel; negative when padded.
    pub corner: [isize; 3],
    /// A foreground-centred draw found no foreground and fell back to a uniform centre.
    pub fallback: bool,
}

/// Patch corner along one axis for a requested centre.
pub fn patch_corner(dim: usize, patch: usize, center: usize) -> isize {
    if dim <= patch {
        -(((patch - dim) / 2) as isize)
    } else {
        (center as isize - (patch / 2) as isize).clamp(0, (dim - patch) as isize)
    }
}

/// Draws one patch. With probability `foreground_bias` the centre is a uniform
/// foreground (label > 0) voxel, otherwise a uniform voxel. Regions outside the
/// volume are zero (image) and background (label).
pub fn sample_patch<R: Rng>(
    case_id: &str,
    image: &Array4<f32>,
    label: &Array3<u8>,
    patch: [usize; 3],
    rng: &mut R,
    foreground_bias: f64,
) -> Result<Patch> {
    if !(0.0..=1.0).contains(&foreground_bias) {
        return Err(Error::Config(format!(
            "foreground_bias {foreground_bias} outside [0, 1]"
        )));
    }
    let (c, x, y, z) = image.dim();
    let dims = [x, y, z];
    if label.dim() != (x, y, z) {
        return Err(Error::shape(format!("label {dims:?}"), format!("{:?}", label.dim())));
    }
    let want_fg = rng.gen_bool(foreground_bias);
    let mut fallback = false;
    let center_flat = if want_fg {
        let fg: Vec<usize> = label
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0)
            .map(|(i, _)| i)
            .collect();
        if fg.is_empty() {
            fallback = true;
            rng.gen_range(0..x * y * z)
        } else {
            fg[rng.gen_range(0..fg.len())]
        }
    } else {
        rng.gen_range(0..x * y * z)
    };
    let center = [center_flat / (y * z), (center_flat / z) % y, center_flat % z];
    let corner = [0, 1, 2].map(|k| patch_corner(dims[k], patch[k], center[k]));

    let mut img = Array4::zeros((c, patch[0], patch[1], patch[2]));
    let mut lbl = Array3::zeros((patch[0], patch[1], patch[2]));
    let range = |k: usize| {
        let lo = (-corner[k]).max(0) as usize;
        let hi = (dims[k] as isize - corner[k]).min(patch[k] as isize).max(0) as usize;
        lo..hi.max(lo)
    };
    for i in range(0) {
        let si = (corner[0] + i as isize) as usize;
        for j in range(1) {
            let sj = (corner[1] + j as isize) as usize;
            for k in range(2) {
                let sk = (corner[2] + k as isize) as usize;
                lbl[[i, j, k]] = label[[si, sj, sk]];
                for ch in 0..c {
                    img[[ch, i, j, k]] = image[[ch, si, sj, sk]];
                }
            }
        }
    }
    Ok(Patch {
        image: img,
        label: lbl,
        case_id: case_id.to_string(),
        corner,
        fallback,
    })
}
