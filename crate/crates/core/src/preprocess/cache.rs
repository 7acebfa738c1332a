//! On-disk cache of preprocessed cases, keyed by a content fingerprint.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{preprocess_case, PreprocessConfig};
use crate::container::{Container, TensorData};
use crate::error::{Error, Result};
use crate::imaging::{nifti, Geometry, LabelVolume, Volume};
use crate::preprocess::manifest::ManifestCase;

const CACHE_FORMAT: &str = "pocketseg-preprocessed-v1";

/// Grid of the raw input, needed to map predictions back.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceGrid {
    pub dims: [usize; 3],
    pub geometry: Geometry,
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    format: String,
    case_id: String,
    fingerprint: String,
    geometry: Geometry,
    source: SourceGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CachedCase {
    pub case_id: String,
    pub image: Volume,
    pub label: Option<LabelVolume>,
    pub source: SourceGrid,
}

pub fn cache_path(cache_dir: &Path, case_id: &str) -> PathBuf {
    cache_dir.join(format!("{case_id}.bin"))
}

fn fingerprint(case: &ManifestCase, cfg: &PreprocessConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(CACHE_FORMAT.as_bytes());
    h.update(serde_json::to_vec(cfg)?);
    for p in std::iter::once(&case.image_path).chain(case.label_path.as_ref()) {
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn to_container(c: &CachedCase, fp: &str) -> Result<Container> {
    let meta = CacheMeta {
        format: CACHE_FORMAT.into(),
        case_id: c.case_id.clone(),
        fingerprint: fp.into(),
        geometry: c.image.geometry,
        source: c.source,
    };
    let mut out = Container::new(serde_json::to_value(meta)?);
    let dims = c.image.dims().to_vec();
    out.push("image", dims.clone(), TensorData::F32(c.image.data.iter().copied().collect()))?;
    if let Some(l) = &c.label {
        out.push("label", dims, TensorData::U8(l.data.iter().copied().collect()))?;
    }
    Ok(out)
}

pub fn load_cached(path: impl AsRef<Path>) -> Result<CachedCase> {
    let c = Container::read(path)?;
    let meta: CacheMeta = serde_json::from_value(c.meta.clone())?;
    if meta.format != CACHE_FORMAT {
        return Err(Error::Container(format!("unsupported cache format {:?}", meta.format)));
    }
    let image = c
        .get("image")
        .ok_or_else(|| Error::Container("cache without image".into()))?;
    let shape = |s: &[usize]| -> Result<(usize, usize, usize)> {
        match s {
            [a, b, c] => Ok((*a, *b, *c)),
            _ => Err(Error::Container(format!("expected 3D tensor, got {s:?}"))),
        }
    };
    let image = match &image.data {
        TensorData::F32(v) => Volume::new(
            Array3::from_shape_vec(shape(&image.shape)?, v.clone()).expect("checked shape"),
            meta.geometry,
        )?,
        _ => return Err(Error::Container("image must be f32".into())),
    };
    let label = match c.get("label") {
        Some(t) => match &t.data {
            TensorData::U8(v) => Some(LabelVolume::new(
                Array3::from_shape_vec(shape(&t.shape)?, v.clone()).expect("checked shape"),
                meta.geometry,
            )?),
            _ => return Err(Error::Container("label must be u8".into())),
        },
        None => None,
    };
    Ok(CachedCase {
        case_id: meta.case_id,
        image,
        label,
        source: meta.source,
    })
}

/// Preprocesses one case into `cache_dir`, reusing an existing entry whose
/// fingerprint matches. Returns the case and whether it was a cache hit.
pub fn preprocess_to_cache(
    case: &ManifestCase,
    cfg: &PreprocessConfig,
    cache_dir: &Path,
) -> Result<(CachedCase, bool)> {
    let fp = fingerprint(case, cfg)?;
    let path = cache_path(cache_dir, &case.case_id);
    if path.exists() {
        if let Ok(meta) = Container::read_meta(&path) {
            if meta.get("fingerprint").and_then(|v| v.as_str()) == Some(fp.as_str()) {
                return Ok((load_cached(&path)?, true));
            }
        }
    }
    let image = nifti::read_volume(&case.image_path)?;
    let label = case.label_path.as_ref().map(nifti::read_labels).transpose()?;
    let (img, lbl) = preprocess_case(&image, label.as_ref(), cfg)?;
    let cached = CachedCase {
        case_id: case.case_id.clone(),
        image: img,
        label: lbl,
        source: SourceGrid {
            dims: image.dims(),
            geometry: image.geometry,
        },
    };
    to_container(&cached, &fp)?.write(&path)?;
    Ok((cached, false))
}
