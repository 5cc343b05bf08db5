//! Self-describing weight archive.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, JSON header,
//! then the raw little-endian tensor data at the offsets listed in the header.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use grapedet_tensor::{Element, ParamKind, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::yolo::Detector;

pub const MAGIC: &[u8; 8] = b"GRPDCKPT";
pub const FORMAT_VERSION: &str = "grapedet-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: String,
    pub dtype: String,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes<F: Element>(det: &Detector<F>, meta: &BTreeMap<String, serde_json::Value>) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    let mut tensors = Vec::new();
    for (_, p) in det.params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            kind: p.kind.as_str().to_string(),
            shape: p.value.shape().to_vec(),
            offset: data.len(),
        });
        for &v in p.value.data() {
            v.write_le(&mut data);
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION.to_string(),
        dtype: F::DTYPE.to_string(),
        config: det.config().clone(),
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn save<F: Element>(det: &Detector<F>, meta: &BTreeMap<String, serde_json::Value>, path: &Path) -> Result<()> {
    let bytes = to_bytes(det, meta)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    // write-then-rename keeps a previous checkpoint intact on failure
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a grapedet checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {:?}", header.format_version)));
    }
    Ok((header, &bytes[16 + len..]))
}

fn read_tensor<F: Element, S: Element>(data: &[u8], e: &TensorEntry) -> Result<Tensor<F>> {
    let n: usize = e.shape.iter().product();
    let bytes = data
        .get(e.offset..e.offset + n * S::BYTES)
        .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the end of the file", e.name)))?;
    let vals = bytes.chunks_exact(S::BYTES).map(|c| F::lit(S::read_le(c).to_f64().unwrap_or(f64::NAN))).collect();
    Ok(Tensor::new(&e.shape, vals)?)
}

/// Rebuild a detector from archive bytes, converting precision if needed.
pub fn from_bytes<F: Element>(bytes: &[u8]) -> Result<(Detector<F>, Header)> {
    let (header, data) = read_header(bytes)?;
    let mut det = Detector::<F>::build(&header.config, 0)?;
    if header.tensors.len() != det.params.len() {
        return Err(Error::Checkpoint(format!(
            "archive holds {} tensors, the configured graph has {}",
            header.tensors.len(),
            det.params.len()
        )));
    }
    for e in &header.tensors {
        let id = det
            .params
            .find(&e.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", e.name)))?;
        let p = det.params.get_mut(id);
        if p.value.shape() != e.shape.as_slice() || ParamKind::parse(&e.kind) != Some(p.kind) {
            return Err(Error::Checkpoint(format!("tensor {} does not match the graph", e.name)));
        }
        p.value = match header.dtype.as_str() {
            "f32" => read_tensor::<F, f32>(data, e)?,
            "f64" => read_tensor::<F, f64>(data, e)?,
            other => return Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
        };
    }
    Ok((det, header))
}

pub fn load<F: Element>(path: &Path) -> Result<(Detector<F>, Header)> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::gradcheck();
        let det = Detector::<f32>::build(&cfg, 7).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("epoch".to_string(), serde_json::json!(3));
        let bytes = to_bytes(&det, &meta).unwrap();
        let (back, header) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(header.meta, meta);
        assert_eq!(header.config, cfg);
        for ((_, a), (_, b)) in det.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let det = Detector::<f32>::build(&ModelConfig::gradcheck(), 7).unwrap();
        let bytes = to_bytes(&det, &BTreeMap::new()).unwrap();
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 4]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes::<f32>(&bad).is_err());
    }
}
