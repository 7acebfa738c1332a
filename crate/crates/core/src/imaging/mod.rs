//! Volumes, label maps and their physical geometry.

pub mod geometry;
pub mod nifti;
pub mod resample;
pub mod volume;

pub use geometry::{Geometry, Orientation};
pub use resample::{
    resample_labels, resample_labels_to, resample_volume, resample_volume_to, resampled_dims,
    Interpolation,
};
pub use volume::{
    dims_of, physical_extent, reorient_array, LabelVolume, Volume, BACKGROUND, LABEL_SET, ORGAN,
    TUMOR,
};
