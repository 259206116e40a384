//! Checkpoint container: a JSON manifest (names, shapes, dtype, format
//! version) followed by raw little-endian scalar blobs. Round-trips are
//! bit-exact.

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"LOCUSCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: Dtype,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob section.
    offset: u64,
    /// Element count.
    len: usize,
}

/// In-memory checkpoint: named tensors plus free-form metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub tensors: Vec<(String, Vec<usize>, Vec<T>)>,
    pub meta: serde_json::Value,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Option<(&[usize], &[T])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        let elem = T::DTYPE.size_bytes() as u64;
        for (name, shape, data) in &self.tensors {
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::format(format!(
                    "tensor {name}: shape does not match data length"
                )));
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
                len: data.len(),
            });
            offset += data.len() as u64 * elem;
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dtype: T::DTYPE,
            tensors: entries,
            meta: self.meta.clone(),
        };
        let manifest_bytes = serde_json::to_vec(&manifest)?;

        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            f.write_all(MAGIC)?;
            f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
            f.write_all(&manifest_bytes)?;
            let mut blob = Vec::with_capacity(offset as usize);
            for (_, _, data) in &self.tensors {
                for &v in data {
                    v.write_le(&mut blob);
                }
            }
            f.write_all(&blob)?;
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|_| Error::format("checkpoint too short for header"))?;
        if &magic != MAGIC {
            return Err(Error::format("bad checkpoint magic"));
        }
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes)?;
        let mlen = u64::from_le_bytes(len_bytes) as usize;
        let mut manifest_bytes = vec![0u8; mlen];
        f.read_exact(&mut manifest_bytes)
            .map_err(|_| Error::format("truncated checkpoint manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| Error::format(format!("corrupt checkpoint manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint format version {}",
                manifest.format_version
            )));
        }
        if manifest.dtype != T::DTYPE {
            return Err(Error::format(format!(
                "checkpoint dtype {:?} does not match requested {:?}",
                manifest.dtype,
                T::DTYPE
            )));
        }
        let mut blob = Vec::new();
        f.read_to_end(&mut blob)?;

        let elem = T::DTYPE.size_bytes();
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let start = e.offset as usize;
            let end = start + e.len * elem;
            if end > blob.len() {
                return Err(Error::format(format!("tensor {} extends past blob end", e.name)));
            }
            let data: Vec<T> = blob[start..end]
                .chunks_exact(elem)
                .map(|c| T::read_le(c))
                .collect();
            tensors.push((e.name.clone(), e.shape.clone(), data));
        }
        Ok(Checkpoint {
            tensors,
            meta: manifest.meta,
        })
    }

    /// Loads only the manifest metadata.
    pub fn load_meta(path: &Path) -> Result<serde_json::Value> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|_| Error::format("checkpoint too short for header"))?;
        if &magic != MAGIC {
            return Err(Error::format("bad checkpoint magic"));
        }
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes)?;
        let mlen = u64::from_le_bytes(len_bytes) as usize;
        let mut manifest_bytes = vec![0u8; mlen];
        f.read_exact(&mut manifest_bytes)
            .map_err(|_| Error::format("truncated checkpoint manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| Error::format(format!("corrupt checkpoint manifest: {e}")))?;
        Ok(manifest.meta)
    }
}
