//! Named-tensor container files.
//!
//! Layout (little-endian, compatible with the de-facto `safetensors`
//! format): an 8-byte header length `n`, then `n` bytes of JSON mapping
//! tensor names to `{"dtype": "F32", "shape": [...], "data_offsets": [a, b]}`
//! plus an optional `"__metadata__"` string map, then the raw tensor bytes.
//! Tensors are laid out in sorted-name order so files are byte-reproducible.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Element;
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Write a name→tensor table (F32) with optional string metadata.
pub fn write_tensors(
    path: &Path,
    tensors: &IndexMap<String, ArrayD<f32>>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let mut names: Vec<&String> = tensors.keys().collect();
    names.sort();

    let mut headers: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    if !metadata.is_empty() {
        headers.insert(
            "__metadata__".to_string(),
            serde_json::to_value(metadata).unwrap(),
        );
    }
    let mut offset = 0usize;
    for name in &names {
        let t = &tensors[name.as_str()];
        let nbytes = t.len() * 4;
        headers.insert(
            (*name).clone(),
            serde_json::to_value(TensorHeader {
                dtype: "F32".to_string(),
                shape: t.shape().to_vec(),
                data_offsets: [offset, offset + nbytes],
            })
            .unwrap(),
        );
        offset += nbytes;
    }
    let header_json = serde_json::to_string(&headers)
        .map_err(|e| Error::Serialize(format!("header encode: {e}")))?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(header_json.as_bytes())?;
    for name in &names {
        let t = &tensors[name.as_str()];
        let slice = t.as_slice().expect("standard layout");
        let mut bytes = Vec::with_capacity(slice.len() * 4);
        for v in slice {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&bytes)?;
    }
    file.flush()?;
    Ok(())
}

/// Read a container written by [`write_tensors`] (or any F32 file in the
/// same layout).
pub fn read_tensors(
    path: &Path,
) -> Result<(IndexMap<String, ArrayD<f32>>, BTreeMap<String, String>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|e| Error::Serialize(format!("container too short: {e}")))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|e| Error::Serialize(format!("truncated header: {e}")))?;
    let headers: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Serialize(format!("header decode: {e}")))?;

    let mut body = Vec::new();
    file.read_to_end(&mut body)?;

    let mut metadata = BTreeMap::new();
    let mut tensors = IndexMap::new();
    for (name, value) in headers {
        if name == "__metadata__" {
            metadata = serde_json::from_value(value)
                .map_err(|e| Error::Serialize(format!("metadata decode: {e}")))?;
            continue;
        }
        let th: TensorHeader = serde_json::from_value(value)
            .map_err(|e| Error::Serialize(format!("tensor header {name}: {e}")))?;
        if th.dtype != "F32" {
            return Err(Error::Serialize(format!(
                "tensor {name}: unsupported dtype {} (only F32)",
                th.dtype
            )));
        }
        let [a, b] = th.data_offsets;
        if b > body.len() || a > b {
            return Err(Error::Serialize(format!("tensor {name}: bad offsets")));
        }
        let count = (b - a) / 4;
        if count != th.shape.iter().product::<usize>() {
            return Err(Error::Serialize(format!(
                "tensor {name}: byte span does not match shape"
            )));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in body[a..b].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        tensors.insert(
            name,
            ArrayD::from_shape_vec(IxDyn(&th.shape), data).expect("shape/count checked"),
        );
    }
    Ok((tensors, metadata))
}

/// Snapshot every named tensor of a store as F32.
pub fn store_to_tensor_map<T: Element>(store: &ParamStore<T>) -> IndexMap<String, ArrayD<f32>> {
    let mut map = IndexMap::new();
    for (name, id) in store.iter_names() {
        map.insert(name.to_string(), store.value(id).mapv(|v| v.as_f64() as f32));
    }
    map
}

/// Copy tensors into an existing store by exact name match. Every store
/// entry must be present; shapes must agree. Returns the copied count.
pub fn load_store_from_map<T: Element>(
    store: &mut ParamStore<T>,
    map: &IndexMap<String, ArrayD<f32>>,
) -> Result<usize> {
    let names: Vec<String> = store.iter_names().map(|(n, _)| n.to_string()).collect();
    let mut copied = 0;
    for name in names {
        let src = map
            .get(&name)
            .ok_or_else(|| Error::Load(format!("container is missing tensor `{name}`")))?;
        let id = store.lookup(&name).unwrap();
        crate::nn::load_tensor_checked(store, id, &name, src.mapv(|v| T::cast(v as f64)))?;
        copied += 1;
    }
    Ok(copied)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_with_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.safetensors");
        let mut tensors = IndexMap::new();
        tensors.insert(
            "b.weight".to_string(),
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -2.0, 3.5, 0.0, 7.25, -0.125])
                .unwrap(),
        );
        tensors.insert(
            "a.bias".to_string(),
            ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5, -0.5]).unwrap(),
        );
        let mut meta = BTreeMap::new();
        meta.insert("epoch".to_string(), "3".to_string());
        write_tensors(&path, &tensors, &meta).unwrap();
        let (back, meta_back) = read_tensors(&path).unwrap();
        assert_eq!(back["b.weight"], tensors["b.weight"]);
        assert_eq!(back["a.bias"], tensors["a.bias"]);
        assert_eq!(meta_back["epoch"], "3");
    }

    #[test]
    fn writes_are_byte_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let mut tensors = IndexMap::new();
        // insertion order differs from sorted order on purpose
        tensors.insert(
            "z".to_string(),
            ArrayD::from_elem(IxDyn(&[3]), 1.25f32),
        );
        tensors.insert(
            "a".to_string(),
            ArrayD::from_elem(IxDyn(&[2]), -0.5f32),
        );
        let p1 = dir.path().join("one.st");
        let p2 = dir.path().join("two.st");
        write_tensors(&p1, &tensors, &BTreeMap::new()).unwrap();
        write_tensors(&p2, &tensors, &BTreeMap::new()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
