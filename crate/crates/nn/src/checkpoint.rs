//! Single-file checkpoint: an 8-byte magic, a little-endian `u64` manifest
//! length, the JSON manifest, then every parameter as little-endian `f32`
//! in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{NnError, ParamStore, Result};

const MAGIC: &[u8; 8] = b"AGCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// Caller-defined metadata (model config, seeds, provenance).
    pub metadata: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

pub fn write_checkpoint(path: &Path, store: &ParamStore<f32>, metadata: serde_json::Value) -> Result<()> {
    let manifest = CheckpointManifest {
        metadata,
        params: store
            .ids()
            .map(|id| {
                let (rows, cols) = store.get(id).dim();
                ParamEntry {
                    name: store.name(id).to_string(),
                    rows,
                    cols,
                }
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for id in store.ids() {
        for x in store.get(id).iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointManifest, ParamStore<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Format(format!("{}: bad magic", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&json)?;
    let mut store = ParamStore::new();
    let mut buf = [0u8; 4];
    for entry in &manifest.params {
        let mut data = Vec::with_capacity(entry.rows * entry.cols);
        for _ in 0..entry.rows * entry.cols {
            r.read_exact(&mut buf)
                .map_err(|e| NnError::Format(format!("truncated blob for `{}`: {e}", entry.name)))?;
            data.push(f32::from_le_bytes(buf));
        }
        let value = Array2::from_shape_vec((entry.rows, entry.cols), data).map_err(|e| NnError::Format(e.to_string()))?;
        store.add(entry.name.clone(), value)?;
    }
    if r.read(&mut buf)? != 0 {
        return Err(NnError::Format("trailing bytes after parameter blobs".into()));
    }
    Ok((manifest, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trip_preserves_values_and_metadata() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        store.normal("a.weight", 3, 4, 1.0, &mut rng).unwrap();
        store.zeros("a.bias", 1, 4).unwrap();
        let dir = std::env::temp_dir().join(format!("agck-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        write_checkpoint(&path, &store, serde_json::json!({"seed": 3})).unwrap();
        let (manifest, loaded) = read_checkpoint(&path).unwrap();
        assert_eq!(manifest.metadata["seed"], 3);
        assert_eq!(store.checksum(""), loaded.checksum(""));
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn copy_from_rejects_shape_changes() {
        let mut a = ParamStore::<f32>::new();
        a.zeros("w", 2, 2).unwrap();
        let mut b = ParamStore::<f32>::new();
        b.zeros("w", 2, 3).unwrap();
        assert!(matches!(a.copy_from(&b), Err(NnError::ShapeMismatch { .. })));
    }
}
