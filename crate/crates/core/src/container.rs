//! Versioned binary tensor container: JSON manifest (name -> shape, dtype,
//! byte offset), raw little-endian f64 data, and a trailing SHA-256 over
//! everything before it. Used for both checkpoints and weight archives.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TPSRTEN1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorRecord>,
}

/// In-memory view of a container file.
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }
}

pub fn write_container(path: &Path, container: &Container) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };

    let mut records = Vec::with_capacity(container.tensors.len());
    let mut offset = 0u64;
    for (name, a) in &container.tensors {
        let len = a.len() as u64 * 8;
        records.push(TensorRecord {
            name: name.clone(),
            shape: a.shape().to_vec(),
            dtype: "f64".into(),
            offset,
            len,
        });
        offset += len;
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        meta: container.meta.clone(),
        tensors: records,
    };
    let manifest_bytes = serde_json::to_vec(&manifest).expect("serializable manifest");

    let mut buf = Vec::with_capacity(8 + 8 + manifest_bytes.len() + offset as usize + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest_bytes);
    for (_, a) in &container.tensors {
        let contiguous = a.as_standard_layout();
        for v in contiguous.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(&buf).map_err(io_err)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    let fail = |reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    if bytes.len() < 8 + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(fail("not a tensor container (bad magic or truncated)"));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != checksum {
        return Err(fail("checksum mismatch (file corrupt)"));
    }

    let manifest_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    if body.len() < 16 + manifest_len {
        return Err(fail("truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&body[16..16 + manifest_len])
        .map_err(|e| fail(&format!("bad manifest json: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(fail(&format!(
            "format version mismatch: file {} vs supported {FORMAT_VERSION}",
            manifest.version
        )));
    }
    let data = &body[16 + manifest_len..];

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for rec in &manifest.tensors {
        if rec.dtype != "f64" {
            return Err(fail(&format!("tensor {}: unsupported dtype {}", rec.name, rec.dtype)));
        }
        let start = rec.offset as usize;
        let end = start + rec.len as usize;
        if end > data.len() {
            return Err(fail(&format!("tensor {} extends past end of data", rec.name)));
        }
        let values: Vec<f64> = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let expected: usize = rec.shape.iter().product();
        if values.len() != expected {
            return Err(fail(&format!(
                "tensor {}: shape {:?} needs {expected} values, file has {}",
                rec.name,
                rec.shape,
                values.len()
            )));
        }
        let arr = ArrayD::from_shape_vec(rec.shape.clone(), values)
            .map_err(|e| fail(&format!("tensor {}: {e}", rec.name)))?;
        tensors.push((rec.name.clone(), arr));
    }
    Ok(Container {
        meta: manifest.meta,
        tensors,
    })
}
