//! Model checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SYNC" | version u32 | header_len u32 | header JSON (header_len bytes)
//! n_tensors u32
//! per tensor: name_len u32 | name | rows u32 | cols u32 | dtype u8 (1 = f64) | rows*cols f64
//! ```
//!
//! Tensors appear in [`DecoderModel::tensors`] order and are checked against
//! the shape recorded in the header when read back.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, DecoderModel, ModelShape};
use crate::embedding::{write_embeddings, EmbeddingMatrix};
use crate::encoder::ObjectEncoderConfig;
use crate::error::{Error, Result};
use crate::hash::fnv1a64;
use crate::pipeline::Toggles;
use crate::projection::ProjectionConfig;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SYNC";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Identifies the support set a checkpoint was trained against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportRef {
    pub path: PathBuf,
    pub rows: usize,
    pub dim: usize,
    /// FNV-1a-64 of the support set's SYNE encoding, as 16 hex digits.
    pub digest: String,
}

impl SupportRef {
    pub fn describe(path: impl Into<PathBuf>, support: &EmbeddingMatrix) -> Self {
        Self {
            path: path.into(),
            rows: support.rows(),
            dim: support.dim(),
            digest: embedding_digest(support),
        }
    }

    pub fn matches(&self, support: &EmbeddingMatrix) -> bool {
        self.rows == support.rows()
            && self.dim == support.dim()
            && self.digest == embedding_digest(support)
    }
}

pub fn embedding_digest(m: &EmbeddingMatrix) -> String {
    let mut bytes = Vec::with_capacity(17 + 4 * m.as_slice().len());
    write_embeddings(m, &mut bytes).expect("writing to a Vec cannot fail");
    format!("{:016x}", fnv1a64(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub decoder: DecoderConfig,
    pub shape: ModelShape,
    pub vocab: Vec<String>,
    pub toggles: Toggles,
    pub projection: ProjectionConfig,
    pub support: Option<SupportRef>,
    pub object_encoder: ObjectEncoderConfig,
    /// Echo of the full configuration that produced the checkpoint.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: DecoderModel,
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} {n} does not fit in u32")))
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut sink: W) -> Result<()> {
    if ckpt.header.shape != ckpt.model.shape {
        return Err(Error::Checkpoint(
            "header shape differs from the model".into(),
        ));
    }
    let header = serde_json::to_vec(&ckpt.header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    sink.write_all(&CHECKPOINT_MAGIC)?;
    sink.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    sink.write_all(&u32_of(header.len(), "header length")?.to_le_bytes())?;
    sink.write_all(&header)?;
    let tensors = ckpt.model.tensors();
    sink.write_all(&u32_of(tensors.len(), "tensor count")?.to_le_bytes())?;
    for t in tensors {
        sink.write_all(&u32_of(t.name.len(), "name length")?.to_le_bytes())?;
        sink.write_all(t.name.as_bytes())?;
        sink.write_all(&u32_of(t.rows, "rows")?.to_le_bytes())?;
        sink.write_all(&u32_of(t.cols, "cols")?.to_le_bytes())?;
        sink.write_all(&[DTYPE_F64])?;
        for v in t.data {
            sink.write_all(&v.to_le_bytes())?;
        }
    }
    sink.flush()?;
    Ok(())
}

fn read_exact_or<R: Read>(source: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint(format!("file ends inside {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(source: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(source, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut source: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut source, &mut magic, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut source, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = read_u32(&mut source, "header length")? as usize;
    let mut header = vec![0u8; header_len];
    read_exact_or(&mut source, &mut header, "header")?;
    let header: CheckpointHeader = serde_json::from_slice(&header)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

    let mut model = DecoderModel::zeros(header.shape)?;
    let expected: Vec<(String, usize, usize)> = model
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.rows, t.cols))
        .collect();
    let n = read_u32(&mut source, "tensor count")? as usize;
    if n != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{n} tensors stored, shape implies {}",
            expected.len()
        )));
    }
    for ((name, rows, cols), dst) in expected.into_iter().zip(model.tensors_mut()) {
        let name_len = read_u32(&mut source, "tensor name length")? as usize;
        let mut raw = vec![0u8; name_len];
        read_exact_or(&mut source, &mut raw, "tensor name")?;
        if raw != name.as_bytes() {
            return Err(Error::Checkpoint(format!(
                "expected tensor {name}, found {}",
                String::from_utf8_lossy(&raw)
            )));
        }
        let r = read_u32(&mut source, "tensor rows")? as usize;
        let c = read_u32(&mut source, "tensor cols")? as usize;
        if (r, c) != (rows, cols) {
            return Err(Error::Checkpoint(format!(
                "{name} is {r}x{c}, expected {rows}x{cols}"
            )));
        }
        let mut dtype = [0u8; 1];
        read_exact_or(&mut source, &mut dtype, "tensor dtype")?;
        if dtype[0] != DTYPE_F64 {
            return Err(Error::UnsupportedDtype(dtype[0]));
        }
        let mut payload = vec![0u8; rows * cols * 8];
        read_exact_or(&mut source, &mut payload, &name)?;
        for (v, chunk) in dst.iter_mut().zip(payload.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            if !v.is_finite() {
                return Err(Error::Checkpoint(format!(
                    "{name} holds a non-finite value"
                )));
            }
        }
    }
    let mut rest = [0u8; 1];
    if source.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint(
            "trailing bytes after the last tensor".into(),
        ));
    }
    Ok(Checkpoint { header, model })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(ckpt, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
