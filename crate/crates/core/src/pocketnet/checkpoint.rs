//! Network weights in the binary container, with the architecture in the header.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{ArchSpec, Network};
use crate::container::{Container, TensorData};
use crate::error::{Error, Result};

const CHECKPOINT_FORMAT: &str = "pocketseg-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    arch: ArchSpec,
    /// Free-form provenance (epoch, fold, ...).
    #[serde(default)]
    info: serde_json::Value,
}

pub fn save_checkpoint(net: &Network<f32>, info: serde_json::Value, path: impl AsRef<Path>) -> Result<()> {
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        arch: net.spec().clone(),
        info,
    };
    let mut c = Container::new(serde_json::to_value(meta)?);
    for p in net.params() {
        c.push(&p.name, p.shape.clone(), TensorData::F32(p.value.clone()))?;
    }
    for b in net.buffers() {
        c.push(&b.name, vec![b.value.len()], TensorData::F32(b.value.clone()))?;
    }
    c.write(path)
}

/// Architecture and provenance stored in a checkpoint.
pub fn read_checkpoint_header(path: impl AsRef<Path>) -> Result<(ArchSpec, serde_json::Value)> {
    let meta: CheckpointMeta = serde_json::from_value(Container::read_meta(path)?)?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Container(format!("unsupported checkpoint format {:?}", meta.format)));
    }
    Ok((meta.arch, meta.info))
}

/// Loads a checkpoint using its own stored architecture.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network<f32>> {
    let c = Container::read(path)?;
    let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
    fill(&meta.arch, &c)
}

/// Loads weights into a network built from `spec`; any tensor whose name or
/// shape disagrees is reported by name.
pub fn load_checkpoint_as(spec: &ArchSpec, path: impl AsRef<Path>) -> Result<Network<f32>> {
    fill(spec, &Container::read(path)?)
}

fn fill(spec: &ArchSpec, c: &Container) -> Result<Network<f32>> {
    let mut net = Network::<f32>::build(spec)?;
    let mut used = 0;
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let t = c.get(name).ok_or_else(|| Error::Checkpoint {
            name: name.into(),
            reason: "missing from checkpoint".into(),
        })?;
        if t.shape != shape {
            return Err(Error::Checkpoint {
                name: name.into(),
                reason: format!("stored shape {:?}, network expects {shape:?}", t.shape),
            });
        }
        used += 1;
        match &t.data {
            TensorData::F32(v) => Ok(v.clone()),
            TensorData::U8(_) => Err(Error::Checkpoint {
                name: name.into(),
                reason: "stored as u8".into(),
            }),
        }
    };
    for p in net.params_mut() {
        p.value = take(&p.name, &p.shape)?;
    }
    for b in net.buffers_mut() {
        let n = b.value.len();
        b.value = take(&b.name, &[n])?;
    }
    if used != c.tensors.len() {
        let known: Vec<String> = net
            .params()
            .iter()
            .map(|p| p.name.clone())
            .chain(net.buffers().iter().map(|b| b.name.clone()))
            .collect();
        let extra = c
            .tensors
            .iter()
            .find(|t| !known.contains(&t.name))
            .map(|t| t.name.clone())
            .unwrap_or_default();
        return Err(Error::Checkpoint {
            name: extra,
            reason: "not part of the network".into(),
        });
    }
    Ok(net)
}
