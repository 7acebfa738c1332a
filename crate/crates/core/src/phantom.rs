//! Synthetic pelvic phantoms: an ellipsoidal organ holding an ellipsoidal tumor.
//!
//! Shapes live in grid-physical coordinates (voxel index × spacing, mm) and are
//! axis-aligned.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{nifti, Geometry, LabelVolume, Orientation, Volume, BACKGROUND, ORGAN, TUMOR};
use crate::preprocess::{write_manifest, DatasetManifest, ManifestCase};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    /// Any zero semi-axis makes the ellipsoid empty.
    pub fn is_empty(&self) -> bool {
        self.semi_axes.iter().any(|&a| a <= 0.0)
    }

    pub fn contains_point(&self, p: [f64; 3]) -> bool {
        !self.is_empty()
            && (0..3)
                .map(|k| ((p[k] - self.center[k]) / self.semi_axes[k]).powi(2))
                .sum::<f64>()
                <= 1.0
    }

    pub fn volume(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            4.0 / 3.0 * std::f64::consts::PI * self.semi_axes.iter().product::<f64>()
        }
    }

    /// Largest value of `self`'s quadratic form over the surface of `inner`;
    /// `inner ⊆ self` exactly when this is ≤ 1.
    ///
    /// Maximizes `uᵀDu + 2gᵀu + k` over the unit sphere by solving the secular
    /// equation `Σ gᵢ² / (λ − dᵢ)² = 1` for `λ ≥ max dᵢ`.
    pub fn max_form_over(&self, inner: &Ellipsoid) -> f64 {
        let mut d = [0.0; 3];
        let mut g = [0.0; 3];
        let mut k = 0.0;
        for i in 0..3 {
            let a = self.semi_axes[i];
            let c = inner.center[i] - self.center[i];
            let b = inner.semi_axes[i];
            d[i] = (b / a).powi(2);
            g[i] = c * b / (a * a);
            k += (c / a).powi(2);
        }
        let d_max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tie = |i: usize| d_max - d[i] <= 1e-15 * d_max.max(1.0);
        let value = |u: [f64; 3]| (0..3).map(|i| d[i] * u[i] * u[i] + 2.0 * g[i] * u[i]).sum::<f64>() + k;

        // Hard case: no pull along the top eigen-directions and the rest fits inside the sphere.
        let hard = (0..3).all(|i| !tie(i) || g[i] == 0.0);
        if hard {
            let mut u = [0.0; 3];
            let mut norm = 0.0;
            for i in (0..3).filter(|&i| !tie(i)) {
                u[i] = g[i] / (d_max - d[i]);
                norm += u[i] * u[i];
            }
            if norm <= 1.0 {
                let top = (0..3).find(|&i| tie(i)).expect("some axis attains the max");
                u[top] = (1.0 - norm).sqrt();
                return value(u);
            }
        }
        let phi = |lambda: f64| (0..3).map(|i| (g[i] / (lambda - d[i])).powi(2)).sum::<f64>();
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut lo = d_max;
        let mut hi = d_max + gnorm + 1.0;
        while phi(hi) > 1.0 {
            hi = d_max + 2.0 * (hi - d_max);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if phi(mid) > 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let lambda = hi;
        let mut u = [0.0; 3];
        for i in 0..3 {
            u[i] = g[i] / (lambda - d[i]);
        }
        let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        value(u.map(|v| v / n))
    }

    pub fn contains(&self, inner: &Ellipsoid) -> bool {
        if inner.is_empty() {
            return true;
        }
        !self.is_empty() && self.max_form_over(inner) <= 1.0 + 1e-12
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub organ: Ellipsoid,
    pub tumor: Ellipsoid,
    /// Mean intensity of background, organ and tumor.
    pub intensity: [f64; 3],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [64, 64, 32],
            spacing: [1.875, 1.875, 5.0],
            organ: Ellipsoid {
                center: [60.0, 60.0, 80.0],
                semi_axes: [32.0, 26.0, 45.0],
            },
            tumor: Ellipsoid {
                center: [66.0, 56.0, 85.0],
                semi_axes: [12.0, 10.0, 18.0],
            },
            intensity: [100.0, 300.0, 450.0],
            noise_sigma: 40.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Config(format!("phantom dims {:?} must be positive", self.dims)));
        }
        Geometry::with_spacing(self.spacing)?;
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        if self.intensity.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("phantom intensities must be finite".into()));
        }
        if !self.organ.contains(&self.tumor) {
            return Err(Error::Config(format!(
                "tumor {:?} is not contained in organ {:?}",
                self.tumor, self.organ
            )));
        }
        Ok(())
    }
}

pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(Volume, LabelVolume)> {
    cfg.validate()?;
    let [x, y, z] = cfg.dims;
    let s = cfg.spacing;
    let labels = Array3::from_shape_fn((x, y, z), |(i, j, k)| {
        let p = [i as f64 * s[0], j as f64 * s[1], k as f64 * s[2]];
        if cfg.tumor.contains_point(p) {
            TUMOR
        } else if cfg.organ.contains_point(p) {
            ORGAN
        } else {
            BACKGROUND
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let image = labels.mapv(|l| {
        let mean = cfg.intensity[usize::from(l)];
        let n: f64 = StandardNormal.sample(&mut rng);
        (mean + cfg.noise_sigma * n) as f32
    });
    let geometry = Geometry::new(cfg.spacing, [0.0; 3], Orientation::RAI)?;
    Ok((Volume::new(image, geometry)?, LabelVolume::new(labels, geometry)?))
}

/// Bounds for randomized phantoms. Tumor axes and centre offset are drawn
/// relative to the organ so that containment holds whenever
/// `tumor_scale.1 + tumor_offset_max ≤ 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSampler {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Per-axis (min, max) organ semi-axes in mm.
    pub organ_semi_axes: [(f64, f64); 3],
    /// Maximum organ centre displacement from the grid centre, mm per axis.
    pub organ_jitter: [f64; 3],
    /// Tumor semi-axes as a fraction of the organ's, per axis.
    pub tumor_scale: (f64, f64),
    /// Tumor centre offset radius in organ-normalized units.
    pub tumor_offset_max: f64,
    pub intensity: [f64; 3],
    pub noise_sigma: f64,
}

impl Default for PhantomSampler {
    fn default() -> Self {
        PhantomSampler {
            dims: [64, 64, 32],
            spacing: [1.875, 1.875, 5.0],
            organ_semi_axes: [(24.0, 36.0), (20.0, 30.0), (35.0, 55.0)],
            organ_jitter: [10.0, 10.0, 10.0],
            tumor_scale: (0.3, 0.5),
            tumor_offset_max: 0.4,
            intensity: [100.0, 300.0, 450.0],
            noise_sigma: 40.0,
        }
    }
}

impl PhantomSampler {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.tumor_scale;
        if !(0.0 <= lo && lo <= hi) {
            return Err(Error::Config(format!("tumor_scale ({lo}, {hi}) must satisfy 0 <= min <= max")));
        }
        if !(self.tumor_offset_max >= 0.0) {
            return Err(Error::Config("tumor_offset_max must be >= 0".into()));
        }
        if hi + self.tumor_offset_max > 1.0 {
            return Err(Error::Config(format!(
                "tumor_scale max {hi} + tumor_offset_max {} exceeds 1: tumor may leave the organ",
                self.tumor_offset_max
            )));
        }
        for (k, &(a, b)) in self.organ_semi_axes.iter().enumerate() {
            if !(0.0 < a && a <= b) {
                return Err(Error::Config(format!("organ_semi_axes[{k}] = ({a}, {b}) must satisfy 0 < min <= max")));
            }
        }
        if self.organ_jitter.iter().any(|&j| !(j >= 0.0)) {
            return Err(Error::Config("organ_jitter must be >= 0".into()));
        }
        Ok(())
    }

    /// One configuration; the phantom's noise seed is drawn from `rng` as well.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<PhantomConfig> {
        self.validate()?;
        let uniform = |rng: &mut R, (lo, hi): (f64, f64)| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let mid = [0, 1, 2].map(|k| (self.dims[k] as f64 - 1.0) * self.spacing[k] / 2.0);
        let mut organ_axes = [0.0; 3];
        let mut center = [0.0; 3];
        for k in 0..3 {
            organ_axes[k] = uniform(rng, self.organ_semi_axes[k]);
            let j = self.organ_jitter[k];
            center[k] = mid[k] + uniform(rng, (-j, j));
        }
        // Offset direction uniform on the sphere, radius uniform in [0, max].
        let dir: [f64; 3] = [0, 1, 2].map(|_| StandardNormal.sample(rng));
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let radius = uniform(rng, (0.0, self.tumor_offset_max));
        let mut tumor_axes = [0.0; 3];
        let mut tumor_center = [0.0; 3];
        for k in 0..3 {
            tumor_axes[k] = organ_axes[k] * uniform(rng, self.tumor_scale);
            tumor_center[k] = center[k] + organ_axes[k] * radius * dir[k] / norm;
        }
        Ok(PhantomConfig {
            dims: self.dims,
            spacing: self.spacing,
            organ: Ellipsoid {
                center,
                semi_axes: organ_axes,
            },
            tumor: Ellipsoid {
                center: tumor_center,
                semi_axes: tumor_axes,
            },
            intensity: self.intensity,
            noise_sigma: self.noise_sigma,
            seed: rng.gen(),
        })
    }
}

/// Case id of the `i`-th generated phantom.
pub fn phantom_id(i: usize) -> String {
    format!("phantom_{i:03}")
}

/// Writes `n` phantoms as gzipped NIfTI pairs under `out_dir/{images,labels}`
/// plus `out_dir/manifest.csv` with paths relative to it.
pub fn generate_dataset(n: usize, sampler: &PhantomSampler, seed: u64, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Config("phantom count must be >= 1".into()));
    }
    sampler.validate()?;
    let out = out_dir.as_ref();
    for sub in ["images", "labels"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(n);
    for i in 0..n {
        let cfg = sampler.sample(&mut rng)?;
        let (image, label) = generate_phantom(&cfg)?;
        let id = phantom_id(i);
        let image_rel = PathBuf::from("images").join(format!("{id}.nii.gz"));
        let label_rel = PathBuf::from("labels").join(format!("{id}.nii.gz"));
        nifti::write_volume(out.join(&image_rel), &image)?;
        nifti::write_labels(out.join(&label_rel), &label)?;
        cases.push(ManifestCase {
            case_id: id,
            image_path: image_rel,
            label_path: Some(label_rel),
            split_tag: "phantom".into(),
        });
    }
    let manifest = DatasetManifest { cases };
    write_manifest(out.join("manifest.csv"), &manifest)?;
    Ok(manifest)
}
