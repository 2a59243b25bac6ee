//! Self-describing binary tensor container.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` header length, a JSON
//! header (model config, free-form metadata, tensor table), then every
//! tensor's values as little-endian IEEE floats in table order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CLMTENS\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Contents of a tensor file: config, metadata and named tensors in file order.
#[derive(Debug, Clone)]
pub struct TensorFile<F> {
    pub config: ModelConfig,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<F>)>,
}

impl<F: Scalar> TensorFile<F> {
    pub fn take(&mut self, name: &str) -> Result<Tensor<F>> {
        let idx = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        Ok(self.tensors.remove(idx).1)
    }
}

/// Writes to a sibling temp file and renames, so readers never see a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_tensors<F: Scalar>(
    config: &ModelConfig,
    meta: &serde_json::Value,
    tensors: &[(String, &Tensor<F>)],
) -> Result<Vec<u8>> {
    let header = Header {
        config: *config,
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: F::DTYPE,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = tensors
        .iter()
        .map(|(_, t)| t.len() * F::DTYPE.size_bytes())
        .sum();
    let mut out = Vec::with_capacity(16 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

/// Decodes a tensor file, converting stored values to `F` if the stored dtype differs.
pub fn decode_tensors<F: Scalar>(bytes: &[u8]) -> Result<TensorFile<F>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a tensor file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut cursor = 16 + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let width = entry.dtype.size_bytes();
        let raw = bytes
            .get(cursor..cursor + n * width)
            .ok_or_else(|| Error::Checkpoint(format!("truncated data for {}", entry.name)))?;
        cursor += n * width;
        let data: Vec<F> = raw
            .chunks_exact(width)
            .map(|c| match entry.dtype {
                DType::F32 if F::DTYPE == DType::F32 => F::read_le(c),
                DType::F64 if F::DTYPE == DType::F64 => F::read_le(c),
                DType::F32 => F::lit(f32::read_le(c) as f64),
                DType::F64 => F::lit(f64::read_le(c)),
            })
            .collect();
        tensors.push((entry.name, Tensor::from_vec(&entry.shape, data)));
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(TensorFile {
        config: header.config,
        meta: header.meta,
        tensors,
    })
}

pub fn read_tensor_file<F: Scalar>(path: &Path) -> Result<TensorFile<F>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    decode_tensors(&fs::read(path)?)
}

/// Moves the named model tensors out of `file` into a parameter set.
pub fn params_from_file<F: Scalar>(
    file: &mut TensorFile<F>,
    prefix: &str,
) -> Result<ModelParams<F>> {
    let mut config = file.config;
    config.dtype = F::DTYPE;
    let mut params = ModelParams::<F>::zeros(config);
    for (name, slot) in params.tensors_mut() {
        let t = file.take(&format!("{prefix}{name}"))?;
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {:?}, config implies {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(params)
}

pub fn save_params<F: Scalar>(
    path: &Path,
    params: &ModelParams<F>,
    meta: &serde_json::Value,
) -> Result<()> {
    let bytes = encode_tensors(&params.config, meta, &params.tensors())?;
    write_atomic(path, &bytes)
}

pub fn load_params<F: Scalar>(path: &Path) -> Result<ModelParams<F>> {
    let mut file = read_tensor_file::<F>(path)?;
    let params = params_from_file(&mut file, "")?;
    if !params.is_finite() {
        return Err(Error::Checkpoint(format!(
            "{}: non-finite parameters",
            path.display()
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let p = init_params::<f64>(ModelConfig::tiny(11), 5).unwrap();
        save_params(&path, &p, &serde_json::json!({"epoch": 2})).unwrap();
        let q = load_params::<f64>(&path).unwrap();
        assert_eq!(p, q);
        let file = read_tensor_file::<f64>(&path).unwrap();
        assert_eq!(file.meta["epoch"], 2);
    }

    #[test]
    fn f32_file_loads_as_f64() {
        let p = init_params::<f32>(ModelConfig::desk(20), 1).unwrap();
        let bytes = encode_tensors(&p.config, &serde_json::Value::Null, &p.tensors()).unwrap();
        let mut file = decode_tensors::<f64>(&bytes).unwrap();
        let q = params_from_file(&mut file, "").unwrap();
        assert_eq!(q.cast::<f32>(), p);
    }

    #[test]
    fn corrupt_input_rejected() {
        let p = init_params::<f64>(ModelConfig::tiny(7), 0).unwrap();
        let bytes = encode_tensors(&p.config, &serde_json::Value::Null, &p.tensors()).unwrap();
        assert!(decode_tensors::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode_tensors::<f64>(&wrong).is_err());
        let mut v2 = bytes;
        v2[8] = 9;
        assert!(matches!(
            decode_tensors::<f64>(&v2),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn missing_file() {
        let r = load_params::<f64>(Path::new("/nonexistent/ckpt.bin"));
        assert!(matches!(r, Err(Error::MissingArtifact(_))));
    }
}
