//! Checkpoint file format.
//!
//! Layout: magic `SFCKPT1`, a u64 little-endian manifest length, the manifest
//! as UTF-8 JSON (a `meta` object plus a `tensors` list of name/shape/offset
//! entries), then raw little-endian f32 blobs. Offsets are relative to the
//! start of the blob section. Round-trips are bit-exact.

use super::params::ParamStore;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 7] = b"SFCKPT1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Write every parameter of `store` plus arbitrary JSON metadata.
pub fn save(path: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (name, tensor) in store.entries() {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset,
        });
        offset += (tensor.len() * 4) as u64;
    }
    let manifest = Manifest { meta, tensors: entries };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for (_, tensor) in store.entries() {
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Raw load: named tensors in file order plus the metadata object.
pub fn load(path: &Path) -> Result<(Vec<(String, Vec<usize>, Vec<f32>)>, serde_json::Value)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::data(format!(
            "not a checkpoint file: bad magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;

    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;

    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let count: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + count * 4;
        if end > blob.len() {
            return Err(Error::data(format!(
                "checkpoint tensor '{}' overruns blob section ({} > {})",
                e.name,
                end,
                blob.len()
            )));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in blob[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        out.push((e.name, e.shape, data));
    }
    Ok((out, manifest.meta))
}

/// Load a checkpoint into an existing store with matching names and shapes.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<serde_json::Value> {
    let (tensors, meta) = load(path)?;
    store.load_named(&tensors)?;
    Ok(meta)
}

/// Metadata object of a checkpoint without reading the blobs.
pub fn read_meta(path: &Path) -> Result<serde_json::Value> {
    let (_, meta) = load(path)?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("sf_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.ckpt");

        let mut store = ParamStore::new();
        // Include values that stress exactness: denormals, negative zero, odd fractions.
        let vals = vec![1.0f32, -0.0, 1e-41, 0.1, f32::MIN_POSITIVE, 3.141_592_7];
        store.add("a.w", Tensor::new(vec![2, 3], vals.clone()).unwrap(), true);
        store.add("b.slope", Tensor::new(vec![1], vec![0.25]).unwrap(), false);

        save(&path, &store, serde_json::json!({"kind": "test", "dim": 6})).unwrap();

        let (tensors, meta) = load(&path).unwrap();
        assert_eq!(meta["kind"], "test");
        assert_eq!(tensors.len(), 2);
        assert_eq!(tensors[0].0, "a.w");
        assert_eq!(tensors[0].1, vec![2, 3]);
        for (a, b) in tensors[0].2.iter().zip(&vals) {
            assert_eq!(a.to_bits(), b.to_bits(), "bit-exact round trip");
        }

        let mut store2 = ParamStore::new();
        store2.add("a.w", Tensor::zeros(vec![2, 3]), true);
        store2.add("b.slope", Tensor::zeros(vec![1]), false);
        load_into(&path, &mut store2).unwrap();
        assert_eq!(store2.get(store2.find("a.w").unwrap()).data(), &vals[..]);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join("sf_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected_on_load_into() {
        let dir = std::env::temp_dir().join("sf_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("shape.ckpt");
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(vec![2, 2]), true);
        save(&path, &store, serde_json::Value::Null).unwrap();

        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(vec![3]), true);
        assert!(load_into(&path, &mut other).is_err());
    }
}
