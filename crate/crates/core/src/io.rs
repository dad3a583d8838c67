//! On-disk artifacts: raw tensor files, checkpoint archives, dataset
//! manifests, plus a process-global read audit used by the sweep harness
//! to prove that model selection never touched target data.
//!
//! Tensor file layout (little-endian throughout):
//!   magic "SADT" | version u8 (0x01) | dtype u8 (0x00 f32, 0x01 u8)
//!   | ndim u8 | ndim x extent u32 | payload
//!
//! Archive layout:
//!   magic "SACK" | version u8 (0x01) | count u32
//!   | count x (name_len u16, name utf-8, tensor blob) | crc32 u32
//! where the trailing checksum covers every preceding byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, U8Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"SADT";
pub const ARCHIVE_MAGIC: &[u8; 4] = b"SACK";
pub const FORMAT_VERSION: u8 = 0x01;

const DTYPE_F32: u8 = 0x00;
const DTYPE_U8: u8 = 0x01;
const MAX_NDIM: usize = 8;
const MAX_ELEMS: u64 = 1 << 31;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor),
    U8(U8Tensor),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::U8(t) => t.shape(),
        }
    }

    pub fn as_f32(&self) -> Result<&Tensor> {
        match self {
            TensorData::F32(t) => Ok(t),
            TensorData::U8(_) => Err(Error::format("expected f32 tensor, found u8")),
        }
    }

    pub fn as_u8(&self) -> Result<&U8Tensor> {
        match self {
            TensorData::U8(t) => Ok(t),
            TensorData::F32(_) => Err(Error::format("expected u8 tensor, found f32")),
        }
    }
}

pub fn encode_tensor(t: &TensorData) -> Vec<u8> {
    let (dtype, shape, payload_len) = match t {
        TensorData::F32(t) => (DTYPE_F32, t.shape(), t.len() * 4),
        TensorData::U8(t) => (DTYPE_U8, t.shape(), t.len()),
    };
    let mut out = Vec::with_capacity(7 + shape.len() * 4 + payload_len);
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(FORMAT_VERSION);
    out.push(dtype);
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    match t {
        TensorData::F32(t) => {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        TensorData::U8(t) => out.extend_from_slice(t.data()),
    }
    out
}

/// Decode one tensor from the front of `bytes`; returns it plus the number
/// of bytes consumed, so blobs can be embedded back to back.
pub fn decode_tensor(bytes: &[u8]) -> Result<(TensorData, usize)> {
    let need = |n: usize, what: &str| -> Result<()> {
        if bytes.len() < n {
            Err(Error::format(format!("truncated tensor: missing {what}")))
        } else {
            Ok(())
        }
    };
    need(7, "header")?;
    if &bytes[0..4] != TENSOR_MAGIC {
        return Err(Error::format("bad tensor magic"));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported tensor version {:#04x}", bytes[4])));
    }
    let dtype = bytes[5];
    let ndim = bytes[6] as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(Error::format(format!("unsupported rank {ndim}")));
    }
    need(7 + ndim * 4, "extents")?;
    let mut shape = Vec::with_capacity(ndim);
    let mut elems: u64 = 1;
    for i in 0..ndim {
        let off = 7 + i * 4;
        let e = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as u64;
        elems = elems.saturating_mul(e);
        shape.push(e as usize);
    }
    if elems > MAX_ELEMS {
        return Err(Error::format(format!("tensor too large: {elems} elements")));
    }
    let n = elems as usize;
    let body = 7 + ndim * 4;
    let (data, consumed) = match dtype {
        DTYPE_F32 => {
            need(body + n * 4, "payload")?;
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                let off = body + i * 4;
                data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
            }
            (TensorData::F32(Tensor::new(shape, data)?), body + n * 4)
        }
        DTYPE_U8 => {
            need(body + n, "payload")?;
            (
                TensorData::U8(U8Tensor::new(shape, bytes[body..body + n].to_vec())?),
                body + n,
            )
        }
        other => return Err(Error::format(format!("unknown dtype byte {other:#04x}"))),
    };
    Ok((data, consumed))
}

pub fn write_tensor(path: &Path, t: &TensorData) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<TensorData> {
    audit_record(path);
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, consumed) = decode_tensor(&bytes)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    if consumed != bytes.len() {
        return Err(Error::format(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - consumed
        )));
    }
    Ok(t)
}

pub fn encode_archive(entries: &[(String, TensorData)]) -> Vec<u8> {
    let mut sorted: Vec<&(String, TensorData)> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = Vec::new();
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(sorted.len() as u32).to_le_bytes());
    for (name, t) in sorted {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&encode_tensor(t));
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_archive(bytes: &[u8]) -> Result<Vec<(String, TensorData)>> {
    if bytes.len() < 13 {
        return Err(Error::format("truncated archive"));
    }
    if &bytes[0..4] != ARCHIVE_MAGIC {
        return Err(Error::format("bad archive magic"));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported archive version {:#04x}", bytes[4])));
    }
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual_crc = crc32fast::hash(&bytes[..bytes.len() - 4]);
    if stored_crc != actual_crc {
        return Err(Error::format(format!(
            "archive checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )));
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let mut pos = 9;
    let end = bytes.len() - 4;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        if pos + 2 > end {
            return Err(Error::format("truncated archive entry header"));
        }
        let name_len = u16::from_le_bytes(bytes[pos..pos + 2].try_into().unwrap()) as usize;
        pos += 2;
        if pos + name_len > end {
            return Err(Error::format("truncated archive entry name"));
        }
        let name = std::str::from_utf8(&bytes[pos..pos + name_len])
            .map_err(|_| Error::format("archive entry name is not utf-8"))?
            .to_string();
        pos += name_len;
        let (t, consumed) = decode_tensor(&bytes[pos..end])?;
        pos += consumed;
        entries.push((name, t));
    }
    if pos != end {
        return Err(Error::format(format!("{} trailing bytes in archive", end - pos)));
    }
    Ok(entries)
}

pub fn write_archive(path: &Path, entries: &[(String, TensorData)]) -> Result<()> {
    fs::write(path, encode_archive(entries)).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<Vec<(String, TensorData)>> {
    audit_record(path);
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_archive(&bytes).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// One dataset record. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub domain: String,
    pub seed: u64,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    audit_record(path);
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(line).map_err(|err| {
            Error::format(format!("{}:{}: {err}", path.display(), i + 1))
        })?;
        entries.push(e);
    }
    Ok(entries)
}

/// A loaded image/mask pair; `id` is the image file stem.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: U8Tensor,
}

pub fn load_sample(manifest_dir: &Path, entry: &ManifestEntry) -> Result<Sample> {
    let image_path = manifest_dir.join(&entry.image);
    let image = read_tensor(&image_path)?.as_f32()?.clone();
    let mask = read_tensor(&manifest_dir.join(&entry.mask))?.as_u8()?.clone();
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| entry.image.clone());
    Ok(Sample { id, image, mask })
}

static AUDIT: Mutex<Option<Vec<PathBuf>>> = Mutex::new(None);

/// Start recording every file this module reads. Process-global; meant for
/// single-run harnesses, not concurrent sessions.
pub fn audit_begin() {
    *AUDIT.lock().unwrap() = Some(Vec::new());
}

/// Stop recording and return the paths read since `audit_begin`.
pub fn audit_end() -> Vec<PathBuf> {
    AUDIT.lock().unwrap().take().unwrap_or_default()
}

fn audit_record(path: &Path) {
    if let Some(log) = AUDIT.lock().unwrap().as_mut() {
        log.push(path.to_path_buf());
    }
}
