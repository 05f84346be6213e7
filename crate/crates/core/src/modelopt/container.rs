//! Binary model container.
//!
//! Layout: magic "RFPM", u32 version (little-endian), u64 header length,
//! JSON header {config, tensor index}, concatenated little-endian payloads,
//! trailing CRC32 of the payload region. Tensor payload encodings: "f32"
//! (dense), "sparse" (u32 flat index + f32 value per nonzero), "q8" (int8
//! with a per-tensor scale in the header).

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelopt::QuantTensor;
use crate::segnet::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 4] = b"RFPM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    F32,
    Sparse,
    Q8,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    encoding: Encoding,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<f32>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Parameters as stored on disk.
#[derive(Debug, Clone)]
pub enum StoredParams {
    Dense(ModelParams<f32>),
    Quantized(Vec<QuantTensor>),
}

/// A loaded model container.
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub config: ModelConfig,
    pub params: StoredParams,
}

impl ModelFile {
    /// Float32 parameters for inference, dequantizing if needed.
    pub fn dense_params(&self) -> Result<ModelParams<f32>> {
        match &self.params {
            StoredParams::Dense(p) => Ok(p.clone()),
            StoredParams::Quantized(q) => crate::modelopt::dequantize_model(q),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self.params, StoredParams::Quantized(_))
    }
}

fn encode_dense(t: &ArrayD<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * 4);
    for v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn encode_sparse(t: &ArrayD<f32>) -> Result<Vec<u8>> {
    if t.len() > u32::MAX as usize {
        return Err(Error::InvalidConfig("tensor too large for sparse index".into()));
    }
    let mut out = Vec::new();
    for (i, v) in t.iter().enumerate() {
        if *v != 0.0 {
            out.extend_from_slice(&(i as u32).to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn write_container(cfg: &ModelConfig, entries: Vec<TensorEntry>, payload: Vec<u8>, path: &Path) -> Result<()> {
    let header = Header {
        config: cfg.clone(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    let mut bytes = Vec::with_capacity(16 + header_json.len() + payload.len() + 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    bytes.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Save float32 parameters under one encoding for all tensors.
pub fn save_model(
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
    path: &Path,
    encoding: Encoding,
) -> Result<()> {
    if encoding == Encoding::Q8 {
        let q = crate::modelopt::quantize_params(params)?;
        return save_quantized(cfg, &q, path);
    }
    params.check_finite()?;
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in params.iter() {
        let bytes = match encoding {
            Encoding::F32 => encode_dense(t),
            Encoding::Sparse => encode_sparse(t)?,
            Encoding::Q8 => unreachable!(),
        };
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            encoding,
            scale: None,
            offset: payload.len() as u64,
            length: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
    }
    write_container(cfg, entries, payload, path)
}

/// Save an already-quantized model.
pub fn save_quantized(cfg: &ModelConfig, tensors: &[QuantTensor], path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for qt in tensors {
        let bytes: Vec<u8> = qt.values.iter().map(|v| *v as u8).collect();
        entries.push(TensorEntry {
            name: qt.name.clone(),
            shape: qt.shape.clone(),
            encoding: Encoding::Q8,
            scale: Some(qt.scale),
            offset: payload.len() as u64,
            length: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
    }
    write_container(cfg, entries, payload, path)
}

fn decode_dense(entry: &TensorEntry, bytes: &[u8], path: &Path) -> Result<ArrayD<f32>> {
    let n: usize = entry.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::model_file(
            path,
            format!("tensor {} payload is {} bytes, expected {}", entry.name, bytes.len(), n * 4),
        ));
    }
    let vals: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&entry.shape), vals)
        .map_err(|e| Error::model_file(path, format!("tensor {}: {e}", entry.name)))
}

fn decode_sparse(entry: &TensorEntry, bytes: &[u8], path: &Path) -> Result<ArrayD<f32>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::model_file(
            path,
            format!("tensor {} sparse payload not a multiple of 8", entry.name),
        ));
    }
    let n: usize = entry.shape.iter().product();
    let mut vals = vec![0f32; n];
    for pair in bytes.chunks_exact(8) {
        let idx = u32::from_le_bytes([pair[0], pair[1], pair[2], pair[3]]) as usize;
        let v = f32::from_le_bytes([pair[4], pair[5], pair[6], pair[7]]);
        if idx >= n {
            return Err(Error::model_file(
                path,
                format!("tensor {} sparse index {idx} out of range {n}", entry.name),
            ));
        }
        vals[idx] = v;
    }
    ArrayD::from_shape_vec(IxDyn(&entry.shape), vals)
        .map_err(|e| Error::model_file(path, format!("tensor {}: {e}", entry.name)))
}

/// Load a model container, verifying magic, version, and payload checksum.
pub fn load_model(path: &Path) -> Result<ModelFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::model_file(path, "truncated before header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::model_file(path, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::model_file(
            path,
            format!("version {version} unsupported (expected {VERSION})"),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16 + header_len;
    if bytes.len() < payload_start + 4 {
        return Err(Error::model_file(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::model_file(path, format!("header parse: {e}")))?;
    let payload = &bytes[payload_start..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let crc = crc32fast::hash(payload);
    if crc != stored_crc {
        return Err(Error::model_file(
            path,
            format!("checksum mismatch: computed {crc:08x}, stored {stored_crc:08x}"),
        ));
    }

    let slice_of = |entry: &TensorEntry| -> Result<&[u8]> {
        let start = entry.offset as usize;
        let end = start + entry.length as usize;
        if end > payload.len() {
            return Err(Error::model_file(
                path,
                format!("tensor {} extends past payload", entry.name),
            ));
        }
        Ok(&payload[start..end])
    };

    let quantized = header.tensors.iter().any(|t| t.encoding == Encoding::Q8);
    if quantized {
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            if entry.encoding != Encoding::Q8 {
                return Err(Error::model_file(
                    path,
                    "mixed quantized and float encodings are not supported",
                ));
            }
            let bytes = slice_of(entry)?;
            let n: usize = entry.shape.iter().product();
            if bytes.len() != n {
                return Err(Error::model_file(
                    path,
                    format!("tensor {} payload is {} bytes, expected {n}", entry.name, bytes.len()),
                ));
            }
            let scale = entry.scale.ok_or_else(|| {
                Error::model_file(path, format!("tensor {} missing scale", entry.name))
            })?;
            if !(scale > 0.0) {
                return Err(Error::model_file(
                    path,
                    format!("tensor {} has non-positive scale {scale}", entry.name),
                ));
            }
            tensors.push(QuantTensor {
                name: entry.name.clone(),
                shape: entry.shape.clone(),
                scale,
                values: bytes.iter().map(|b| *b as i8).collect(),
            });
        }
        return Ok(ModelFile {
            config: header.config,
            params: StoredParams::Quantized(tensors),
        });
    }

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let bytes = slice_of(entry)?;
        let t = match entry.encoding {
            Encoding::F32 => decode_dense(entry, bytes, path)?,
            Encoding::Sparse => decode_sparse(entry, bytes, path)?,
            Encoding::Q8 => unreachable!(),
        };
        tensors.push((entry.name.clone(), t));
    }
    Ok(ModelFile {
        config: header.config,
        params: StoredParams::Dense(ModelParams::from_tensors(tensors)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelopt::{prune_to_sparsity, quantize_params};
    use crate::segnet::forward;
    use ndarray::Array4;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            levels: 1,
            base_filters: 2,
            in_channels: 4,
        }
    }

    fn params() -> ModelParams<f32> {
        ModelParams::<f32>::init(&cfg(), 9).unwrap()
    }

    #[test]
    fn dense_round_trip_preserves_forward_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rfpm");
        let p = params();
        save_model(&cfg(), &p, &path, Encoding::F32).unwrap();
        let loaded = load_model(&path).unwrap();
        let q = loaded.dense_params().unwrap();
        assert_eq!(q, p);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array4::from_shape_fn((1, 8, 8, 4), |_| rng.random::<f64>() as f32);
        let a = forward(&p, &cfg(), &x).unwrap();
        let b = forward(&q, &loaded.config, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sparse_round_trip_is_bit_exact_and_smaller() {
        let dir = tempfile::tempdir().unwrap();
        let dense_path = dir.path().join("dense.rfpm");
        let sparse_path = dir.path().join("sparse.rfpm");
        let mut p = params();
        prune_to_sparsity(&mut p, 0.8).unwrap();
        save_model(&cfg(), &p, &dense_path, Encoding::F32).unwrap();
        save_model(&cfg(), &p, &sparse_path, Encoding::Sparse).unwrap();
        let back = load_model(&sparse_path).unwrap().dense_params().unwrap();
        assert_eq!(back, p);
        let dense_len = fs::metadata(&dense_path).unwrap().len();
        let sparse_len = fs::metadata(&sparse_path).unwrap().len();
        assert!(sparse_len < dense_len, "{sparse_len} vs {dense_len}");
    }

    #[test]
    fn quantized_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q8.rfpm");
        let p = params();
        let q = quantize_params(&p).unwrap();
        save_quantized(&cfg(), &q, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert!(loaded.is_quantized());
        match &loaded.params {
            StoredParams::Quantized(tensors) => assert_eq!(tensors, &q),
            _ => panic!("expected quantized"),
        }
    }

    #[test]
    fn corrupted_checksum_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rfpm");
        save_model(&cfg(), &params(), &path, Encoding::F32).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(Error::BadModelFile { .. })
        ));
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rfpm");
        save_model(&cfg(), &params(), &path, Encoding::F32).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        assert!(load_model(&path).is_err());

        let mut bad_version = good.clone();
        bad_version[4] = 99;
        fs::write(&path, &bad_version).unwrap();
        assert!(load_model(&path).is_err());

        fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(load_model(&path).is_err());
    }

    #[test]
    fn sparse_payload_ratio_matches_sparsity() {
        // an 80%-sparse tensor in sparse encoding costs ~ 8 bytes per
        // surviving weight = 2 * 0.2 of the dense payload
        let mut p = ModelParams::from_tensors(vec![(
            "w".to_string(),
            ArrayD::from_shape_vec(
                IxDyn(&[10, 10]),
                (0..100).map(|i| (i + 1) as f32).collect(),
            )
            .unwrap(),
        )])
        .unwrap();
        prune_to_sparsity(&mut p, 0.8).unwrap();
        let sparse = encode_sparse(p.get("w").unwrap()).unwrap();
        let dense = encode_dense(p.get("w").unwrap());
        let ratio = sparse.len() as f64 / dense.len() as f64;
        assert!((ratio - 0.4).abs() < 1e-9, "ratio {ratio}");
    }
}
