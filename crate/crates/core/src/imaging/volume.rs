use std::collections::BTreeSet;

use ndarray::{Array3, Axis};

use super::geometry::{Geometry, Orientation};
use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const ORGAN: u8 = 1;
pub const TUMOR: u8 = 2;
pub const LABEL_SET: [u8; 3] = [BACKGROUND, ORGAN, TUMOR];

/// Scalar intensity grid with physical geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    pub geometry: Geometry,
}

/// Integer label grid; every voxel is background, organ or tumor.
///
/// Labels are organ-inclusive: a tumor voxel is also part of the organ.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub data: Array3<u8>,
    pub geometry: Geometry,
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Geometry(format!("dims {dims:?} must be >= 1")));
    }
    Ok(())
}

impl Volume {
    pub fn new(data: Array3<f32>, geometry: Geometry) -> Result<Self> {
        check_dims(data.shape())?;
        geometry.validate()?;
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Geometry(format!("non-finite intensity {v}")));
        }
        Ok(Volume { data, geometry })
    }

    pub fn dims(&self) -> [usize; 3] {
        dims_of(&self.data)
    }

    pub fn physical_extent(&self) -> [f64; 3] {
        physical_extent(self.dims(), &self.geometry)
    }

    pub fn reorient(&self, target: Orientation) -> Volume {
        let (data, geometry) = reorient_array(&self.data, &self.geometry, target);
        Volume { data, geometry }
    }
}

impl LabelVolume {
    pub fn new(data: Array3<u8>, geometry: Geometry) -> Result<Self> {
        check_dims(data.shape())?;
        geometry.validate()?;
        if let Some(&v) = data.iter().find(|v| !LABEL_SET.contains(v)) {
            return Err(Error::Label {
                value: i64::from(v),
                allowed: "{0, 1, 2}".into(),
            });
        }
        Ok(LabelVolume { data, geometry })
    }

    pub fn zeros(dims: [usize; 3], geometry: Geometry) -> Self {
        LabelVolume {
            data: Array3::zeros(dims),
            geometry,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        dims_of(&self.data)
    }

    pub fn physical_extent(&self) -> [f64; 3] {
        physical_extent(self.dims(), &self.geometry)
    }

    pub fn reorient(&self, target: Orientation) -> LabelVolume {
        let (data, geometry) = reorient_array(&self.data, &self.geometry, target);
        LabelVolume { data, geometry }
    }

    pub fn labels_present(&self) -> BTreeSet<u8> {
        let mut present = BTreeSet::new();
        for &v in &self.data {
            present.insert(v);
            if present.len() == LABEL_SET.len() {
                break;
            }
        }
        present
    }

    /// Binary mask of voxels whose label is at least `min_label`.
    pub fn mask_at_least(&self, min_label: u8) -> Array3<bool> {
        self.data.mapv(|v| v >= min_label)
    }

    pub fn mask_equal(&self, label: u8) -> Array3<bool> {
        self.data.mapv(|v| v == label)
    }
}

pub fn dims_of<T>(a: &Array3<T>) -> [usize; 3] {
    let s = a.shape();
    [s[0], s[1], s[2]]
}

/// Physical size of the grid in mm: dims × spacing per axis.
pub fn physical_extent(dims: [usize; 3], geometry: &Geometry) -> [f64; 3] {
    [0, 1, 2].map(|k| dims[k] as f64 * geometry.spacing[k])
}

/// Permutes and flips voxel data so the grid reads in `target` orientation
/// while every voxel keeps its world position.
pub fn reorient_array<T: Clone>(
    data: &Array3<T>,
    geometry: &Geometry,
    target: Orientation,
) -> (Array3<T>, Geometry) {
    let src = geometry.orientation.axes();
    let tgt = target.axes();
    if src == tgt {
        return (data.clone(), *geometry);
    }
    let dims = dims_of(data);
    let mut perm = [0usize; 3];
    let mut flip = [false; 3];
    for j in 0..3 {
        let k = (0..3).find(|&k| src[k].0 == tgt[j].0).expect("signed permutation");
        perm[j] = k;
        flip[j] = src[k].1 != tgt[j].1;
    }
    let mut view = data.view().permuted_axes(perm);
    for (j, &f) in flip.iter().enumerate() {
        if f {
            view.invert_axis(Axis(j));
        }
    }
    let out = view.as_standard_layout().into_owned();

    let mut corner = [0.0f64; 3];
    for j in 0..3 {
        if flip[j] {
            corner[perm[j]] = (dims[perm[j]] - 1) as f64;
        }
    }
    let origin = geometry.world(corner);
    let spacing = [0, 1, 2].map(|j| geometry.spacing[perm[j]]);
    (
        out,
        Geometry {
            spacing,
            origin,
            orientation: target,
        },
    )
}
