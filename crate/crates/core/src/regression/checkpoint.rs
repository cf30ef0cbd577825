//! Checkpoints: one flat little-endian `f32` blob plus a JSON manifest.
//!
//! The manifest lists every tensor as `{name, shape, offset}`, with
//! `offset` counted in floats from the start of the blob. Weights are
//! `[outputs, inputs]` row-major, biases `[outputs]`. Tensor names are
//! `<net>.<point|head>.<layer>.<weight|bias>`, e.g. `rotation.head.1.bias`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MlpSpec, RegressionModel};
use crate::error::{Error, Result};
use crate::fsutil::{write_atomic, write_atomic_str};

pub const FORMAT: &str = "f32-le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub spec: MlpSpec,
    pub tensors: Vec<TensorEntry>,
}

fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{stem}.bin")),
        dir.join(format!("{stem}.json")),
    )
}

/// Writes `<stem>.bin` and `<stem>.json` into `dir`.
pub fn save_checkpoint(model: &RegressionModel, dir: &Path, stem: &str) -> Result<()> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (net_name, net) in model.nets() {
        for (layer_name, d) in net.layers() {
            for (suffix, data, shape) in [
                ("weight", &d.weight, vec![d.outputs, d.inputs]),
                ("bias", &d.bias, vec![d.outputs]),
            ] {
                tensors.push(TensorEntry {
                    name: format!("{net_name}.{layer_name}.{suffix}"),
                    shape,
                    offset,
                });
                offset += data.len();
                for v in data {
                    blob.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        spec: model.spec.clone(),
        tensors,
    };
    let (bin, json) = paths(dir, stem);
    write_atomic(&bin, &blob)?;
    write_atomic_str(
        &json,
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
}

pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<RegressionModel> {
    let (bin, json) = paths(dir, stem);
    let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", json.display())))?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!(
            "unsupported checkpoint format {:?}",
            manifest.format
        )));
    }
    manifest.spec.validate()?;
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "{}: length {} is not a multiple of 4",
            bin.display(),
            bytes.len()
        )));
    }
    let floats: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();

    let mut model = RegressionModel::zeros(&manifest.spec);
    let mut expected = Vec::new();
    for (net_name, net) in model.nets() {
        for (layer_name, d) in net.layers() {
            expected.push((
                format!("{net_name}.{layer_name}.weight"),
                vec![d.outputs, d.inputs],
            ));
            expected.push((format!("{net_name}.{layer_name}.bias"), vec![d.outputs]));
        }
    }
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Format(format!(
            "manifest lists {} tensors, spec implies {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut slices = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Format(format!(
                "tensor {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let len: usize = shape.iter().product();
        let data = floats
            .get(entry.offset..entry.offset + len)
            .ok_or_else(|| {
                Error::Format(format!(
                    "tensor {name} runs past the end of {}",
                    bin.display()
                ))
            })?;
        slices.push(data.to_vec());
    }
    let mut it = slices.into_iter();
    for net in [
        &mut model.selection,
        &mut model.rotation,
        &mut model.translation,
    ] {
        for d in net.layers_mut() {
            d.weight = it.next().expect("counted");
            d.bias = it.next().expect("counted");
        }
    }
    Ok(model)
}
