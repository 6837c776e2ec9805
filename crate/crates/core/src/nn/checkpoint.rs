//! Checkpoint persistence: `checkpoint.json` plus `tensors.bin`.
//!
//! The blob holds every parameter tensor followed by the Adam first and
//! second moments (`adam.m.<name>`, `adam.v.<name>`), each as row-major
//! 32-bit little-endian floats at the offset given in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::model::{Architecture, ModelParameters, TENSOR_NAMES};
use super::tensor::Tensor;
use crate::dataset::checksum;
use crate::error::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TENSOR_FILE: &str = "tensors.bin";
const FORMAT: &str = "risgat-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub architecture: Architecture,
    pub seed: u64,
    pub step: u64,
    pub hyperparameters: BTreeMap<String, f64>,
    pub tensors: Vec<TensorEntry>,
    pub checksum: String,
}

fn named_tensors(model: &ModelParameters) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = TENSOR_NAMES
        .iter()
        .map(|n| n.to_string())
        .zip(model.tensors())
        .collect();
    for (prefix, moments) in [("adam.m.", &model.adam.m), ("adam.v.", &model.adam.v)] {
        out.extend(
            TENSOR_NAMES
                .iter()
                .map(|n| format!("{prefix}{n}"))
                .zip(moments.iter()),
        );
    }
    out
}

pub fn save_checkpoint(
    model: &ModelParameters,
    seed: u64,
    hyperparameters: BTreeMap<String, f64>,
    dir: &Path,
) -> Result<CheckpointManifest> {
    model.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in named_tensors(model) {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        architecture: model.arch,
        seed,
        step: model.adam.step,
        hyperparameters,
        tensors,
        checksum: checksum(&blob),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    let blob_path = dir.join(TENSOR_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let path = dir.join(CHECKPOINT_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelParameters, CheckpointManifest)> {
    let path = dir.join(CHECKPOINT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT {
        return Err(Error::Parse(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    let blob_path = dir.join(TENSOR_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let actual = checksum(&blob);
    if actual != manifest.checksum {
        return Err(Error::ChecksumMismatch {
            expected: manifest.checksum.clone(),
            actual,
        });
    }

    let mut model = ModelParameters::zeros(manifest.architecture)?;
    model.adam = AdamState::for_model(&model);
    model.adam.step = manifest.step;
    let expected: Vec<(String, Vec<usize>)> = named_tensors(&model)
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if manifest.tensors.len() != expected.len() {
        return Err(Error::Inconsistent(format!(
            "checkpoint lists {} tensors, the architecture has {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }

    let mut loaded = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Inconsistent(format!(
                "checkpoint entry {} {:?} where {name} {shape:?} was expected",
                entry.name, entry.shape
            )));
        }
        let len: usize = shape.iter().product();
        let bytes = blob.get(entry.offset..entry.offset + 4 * len).ok_or_else(|| Error::Truncated {
            path: blob_path.clone(),
            actual: blob.len() as u64,
            record: 4,
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        loaded.push(Tensor::new(shape.clone(), data)?);
    }

    let mut it = loaded.into_iter();
    for t in model.tensors_mut() {
        *t = it.next().expect("counted");
    }
    model.adam.m = it.by_ref().take(TENSOR_NAMES.len()).collect();
    model.adam.v = it.collect();
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::init_parameters;
    use crate::seeding::stream;

    #[test]
    fn round_trip_at_storage_precision() {
        let arch = Architecture {
            gat_dims: [5, 3],
            pool_dim: 4,
            ..Architecture::reference(4, 2)
        };
        let mut model = init_parameters(arch, &mut stream(3)).unwrap();
        model.adam.step = 7;
        model.adam.m[2].data_mut()[0] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let hp = BTreeMap::from([("lr".to_string(), 1e-3)]);
        save_checkpoint(&model, 11, hp.clone(), dir.path()).unwrap();
        let (back, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(manifest.seed, 11);
        assert_eq!(manifest.hyperparameters, hp);
        assert_eq!(back.adam.step, 7);
        for (a, b) in back.tensors().iter().zip(model.tensors()) {
            assert_eq!(*a, &b.to_f32_precision());
        }
        assert_eq!(back.adam.m[2].data()[0], 0.25);

        let blob = dir.path().join(TENSOR_FILE);
        let mut bytes = fs::read(&blob).unwrap();
        bytes[5] ^= 0x40;
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::ChecksumMismatch { .. })));
    }
}
