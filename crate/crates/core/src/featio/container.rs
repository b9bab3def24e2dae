//! Tensor container: 4-byte magic, little-endian `u64` manifest length, JSON
//! manifest, then raw little-endian tensor payloads at declared offsets.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::FeatError;

pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
    pub metadata: Value,
}

impl Manifest {
    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Tensor to be written; `bytes` are already little-endian.
pub struct TensorData {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl TensorData {
    pub fn f32(name: &str, shape: Vec<usize>, values: &[f32]) -> Self {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            name: name.to_owned(),
            dtype: DType::F32,
            shape,
            bytes,
        }
    }

    pub fn f64(name: &str, shape: Vec<usize>, values: &[f64]) -> Self {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            name: name.to_owned(),
            dtype: DType::F64,
            shape,
            bytes,
        }
    }

    pub fn u8(name: &str, shape: Vec<usize>, values: &[u8]) -> Self {
        Self {
            name: name.to_owned(),
            dtype: DType::U8,
            shape,
            bytes: values.to_vec(),
        }
    }
}

pub fn encode(magic: &[u8; 4], tensors: &[TensorData], metadata: Value) -> Result<Vec<u8>, FeatError> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for t in tensors {
        let expected = t.shape.iter().product::<usize>() * t.dtype.size();
        if expected != t.bytes.len() {
            return Err(FeatError::ShapeMismatch(format!(
                "tensor {} declares {:?} but carries {} bytes",
                t.name,
                t.shape,
                t.bytes.len()
            )));
        }
        entries.push(TensorEntry {
            name: t.name.clone(),
            dtype: t.dtype,
            shape: t.shape.clone(),
            offset,
            length: t.bytes.len() as u64,
        });
        offset += t.bytes.len() as u64;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        tensors: entries,
        metadata,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| FeatError::CorruptManifest(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset as usize);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        out.extend_from_slice(&t.bytes);
    }
    Ok(out)
}

/// Writes a fresh file; refuses to overwrite-by-append semantics by always
/// truncating.
pub fn write(path: &Path, magic: &[u8; 4], tensors: &[TensorData], metadata: Value) -> Result<(), FeatError> {
    let bytes = encode(magic, tensors, metadata)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

/// A decoded container: the manifest and the payload section.
pub struct Container {
    pub manifest: Manifest,
    pub payload: Vec<u8>,
}

impl Container {
    fn slice(&self, name: &str, dtype: DType) -> Result<(&TensorEntry, &[u8]), FeatError> {
        let entry = self
            .manifest
            .entry(name)
            .ok_or_else(|| FeatError::ShapeMismatch(format!("missing tensor {name}")))?;
        if entry.dtype != dtype {
            return Err(FeatError::ShapeMismatch(format!(
                "tensor {name} has dtype {:?}, expected {:?}",
                entry.dtype, dtype
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.length as usize;
        Ok((entry, &self.payload[start..end]))
    }

    pub fn has(&self, name: &str) -> bool {
        self.manifest.entry(name).is_some()
    }

    pub fn f32(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>), FeatError> {
        let (entry, bytes) = self.slice(name, DType::F32)?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((entry.shape.clone(), values))
    }

    pub fn f64(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>), FeatError> {
        let (entry, bytes) = self.slice(name, DType::F64)?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok((entry.shape.clone(), values))
    }

    pub fn u8(&self, name: &str) -> Result<(Vec<usize>, Vec<u8>), FeatError> {
        let (entry, bytes) = self.slice(name, DType::U8)?;
        Ok((entry.shape.clone(), bytes.to_vec()))
    }
}

pub fn decode(magic: &[u8; 4], bytes: &[u8]) -> Result<Container, FeatError> {
    if bytes.len() < HEADER_LEN {
        return Err(FeatError::CorruptManifest("file shorter than header".into()));
    }
    if &bytes[..4] != magic {
        return Err(FeatError::CorruptManifest("bad magic bytes".into()));
    }
    let manifest_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let manifest_end = HEADER_LEN
        .checked_add(manifest_len)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| FeatError::CorruptManifest("manifest length exceeds file".into()))?;
    let raw: Value = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
        .map_err(|e| FeatError::CorruptManifest(e.to_string()))?;
    let version = raw.get("format_version").and_then(Value::as_u64);
    match version {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => return Err(FeatError::UnsupportedVersion(v)),
        None => return Err(FeatError::CorruptManifest("missing format_version".into())),
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| FeatError::CorruptManifest(e.to_string()))?;

    let payload = &bytes[manifest_end..];
    let mut cursor = 0u64;
    let mut sorted: Vec<&TensorEntry> = manifest.tensors.iter().collect();
    sorted.sort_by_key(|t| t.offset);
    for t in sorted {
        if t.offset < cursor {
            return Err(FeatError::CorruptManifest(format!("tensor {} overlaps its predecessor", t.name)));
        }
        let expected = t.shape.iter().product::<usize>() as u64 * t.dtype.size() as u64;
        if expected != t.length {
            return Err(FeatError::ShapeMismatch(format!(
                "tensor {} shape {:?} does not match byte length {}",
                t.name, t.shape, t.length
            )));
        }
        cursor = t.offset + t.length;
    }
    if cursor != payload.len() as u64 {
        return Err(FeatError::CorruptManifest(format!(
            "payload is {} bytes, manifest declares {}",
            payload.len(),
            cursor
        )));
    }
    Ok(Container {
        manifest,
        payload: payload.to_vec(),
    })
}

pub fn read(path: &Path, magic: &[u8; 4]) -> Result<Container, FeatError> {
    let bytes = fs::read(path)?;
    decode(magic, &bytes)
}
