//! Parameters as a flat little-endian f64 blob plus a JSON manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::state::ParamStore;
use super::{Tensor4, TensorError};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const BLOB_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: [usize; 4],
    /// Offset in f64 elements from the start of the blob.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub dtype: String,
    pub entries: Vec<CheckpointEntry>,
}

fn err(e: impl std::fmt::Display) -> TensorError {
    TensorError::Checkpoint(e.to_string())
}

/// Writes `params.bin` and `manifest.json` into `dir`, creating it if needed.
pub fn save_checkpoint(params: &ParamStore, dir: &Path) -> Result<CheckpointManifest, TensorError> {
    fs::create_dir_all(dir).map_err(err)?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(params.len());
    for (_, p) in params.iter() {
        entries.push(CheckpointEntry {
            name: p.name.clone(),
            shape: p.value.shape(),
            offset: blob.len() / 8,
            trainable: p.trainable,
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest { version: CHECKPOINT_VERSION, dtype: "f64-le".into(), entries };
    fs::write(dir.join(BLOB_FILE), blob).map_err(err)?;
    let text = serde_json::to_string_pretty(&manifest).map_err(err)?;
    fs::write(dir.join(MANIFEST_FILE), text).map_err(err)?;
    Ok(manifest)
}

/// Reads a checkpoint into a fresh store, in manifest order.
pub fn load_checkpoint(dir: &Path) -> Result<ParamStore, TensorError> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(err)?).map_err(err)?;
    if manifest.version != CHECKPOINT_VERSION || manifest.dtype != "f64-le" {
        return Err(err(format!("unsupported checkpoint version {} / {}", manifest.version, manifest.dtype)));
    }
    let blob = fs::read(dir.join(BLOB_FILE)).map_err(err)?;
    if blob.len() % 8 != 0 {
        return Err(err("blob length is not a multiple of 8"));
    }
    let values: Vec<f64> = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut store = ParamStore::new();
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| err(format!("{} runs past the end of the blob", e.name)))?;
        store.add(e.name.clone(), Tensor4::from_vec(e.shape, data.to_vec())?, e.trainable);
    }
    Ok(store)
}

/// Copies values from a checkpoint into an existing store, matching by name.
/// Every parameter of `params` must be present with the same shape.
pub fn restore_checkpoint(params: &mut ParamStore, dir: &Path) -> Result<(), TensorError> {
    let loaded = load_checkpoint(dir)?;
    let ids: Vec<_> = params.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let src = loaded.id(&name).ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
        let value = loaded.get(src).value.clone();
        let dst = params.get_mut(id);
        if dst.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch(format!("{name}: {:?} vs {:?}", dst.value.shape(), value.shape())));
        }
        dst.value = value;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn round_trip() {
        let mut p = ParamStore::new();
        p.conv_layer("c", 3, 4, 3, 1, 1, true, &mut rng_from(2));
        p.bn_layer("bn", 4);
        let dir = std::env::temp_dir().join(format!("fpnas-ckpt-{}", std::process::id()));
        let manifest = save_checkpoint(&p, &dir).unwrap();
        assert_eq!(manifest.entries[1].offset, 4 * 3 * 9);
        let q = load_checkpoint(&dir).unwrap();
        for ((_, a), (_, b)) in p.iter().zip(q.iter()) {
            assert_eq!((&a.name, &a.value, a.trainable), (&b.name, &b.value, b.trainable));
        }
        let mut r = ParamStore::new();
        r.conv_layer("c", 3, 4, 3, 1, 1, true, &mut rng_from(99));
        restore_checkpoint(&mut r, &dir).unwrap();
        assert_eq!(r.get(r.id("c.weight").unwrap()).value, p.get(p.id("c.weight").unwrap()).value);
        let mut bad = ParamStore::new();
        bad.add("missing", Tensor4::zeros([1, 1, 1, 1]), true);
        assert!(matches!(restore_checkpoint(&mut bad, &dir), Err(TensorError::UnknownParam(_))));
        fs::remove_dir_all(&dir).unwrap();
    }
}
