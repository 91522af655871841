//! Checkpoint archives: a UTF-8 manifest naming every tensor (dtype, shape,
//! byte offset) followed by the concatenated little-endian payload. The
//! format exists so trained models and generated tensors survive a round
//! trip bit-exactly, which PGM quantization cannot promise.
//!
//! Layout:
//! ```text
//! osn-archive 1
//! tensors <N>
//! <name> <dtype> <rank> <dim…> <offset>     (N lines)
//! payload <total-bytes>
//! <raw little-endian element bytes>
//! ```
//! Names are single whitespace-free words, unique within one archive.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

const VERSION_LINE: &str = "osn-archive 1";

/// One tensor with its dtype made explicit so mixed-precision archives
/// (f64 metadata next to f32 weights) stay honest.
#[derive(Clone, Debug)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    pub fn numel(&self) -> usize {
        match self {
            TensorData::F32(t) => t.numel(),
            TensorData::F64(t) => t.numel(),
        }
    }

    fn byte_len(&self) -> usize {
        self.numel() * self.dtype().byte_width()
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(t) => {
                for &v in t.data() {
                    v.write_le_bytes(out);
                }
            }
            TensorData::F64(t) => {
                for &v in t.data() {
                    v.write_le_bytes(out);
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct NamedTensor {
    pub name: String,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn f32(name: &str, t: Tensor<f32>) -> Self {
        NamedTensor { name: name.to_string(), data: TensorData::F32(t) }
    }

    pub fn f64(name: &str, t: Tensor<f64>) -> Self {
        NamedTensor { name: name.to_string(), data: TensorData::F64(t) }
    }
}

/// Generic bridge so save/load helpers can speak either precision.
pub trait ArchiveElement: Scalar {
    fn wrap(t: Tensor<Self>) -> TensorData;
    fn unwrap(data: &TensorData) -> Option<&Tensor<Self>>;
}

impl ArchiveElement for f32 {
    fn wrap(t: Tensor<f32>) -> TensorData {
        TensorData::F32(t)
    }
    fn unwrap(data: &TensorData) -> Option<&Tensor<f32>> {
        match data {
            TensorData::F32(t) => Some(t),
            TensorData::F64(_) => None,
        }
    }
}

impl ArchiveElement for f64 {
    fn wrap(t: Tensor<f64>) -> TensorData {
        TensorData::F64(t)
    }
    fn unwrap(data: &TensorData) -> Option<&Tensor<f64>> {
        match data {
            TensorData::F64(t) => Some(t),
            TensorData::F32(_) => None,
        }
    }
}

pub fn archive_bytes(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    for t in tensors {
        if t.name.is_empty() || t.name.chars().any(|c| c.is_whitespace()) {
            return Err(Error::contract(format!(
                "archive tensor name {:?} must be one whitespace-free word",
                t.name
            )));
        }
        if !seen.insert(t.name.as_str()) {
            return Err(Error::contract(format!("duplicate archive tensor name {:?}", t.name)));
        }
    }
    let mut manifest = String::new();
    manifest.push_str(VERSION_LINE);
    manifest.push('\n');
    manifest.push_str(&format!("tensors {}\n", tensors.len()));
    let mut offset = 0usize;
    for t in tensors {
        manifest.push_str(&format!("{} {} {}", t.name, t.data.dtype().name(), t.data.shape().len()));
        for d in t.data.shape() {
            manifest.push_str(&format!(" {d}"));
        }
        manifest.push_str(&format!(" {offset}\n"));
        offset += t.data.byte_len();
    }
    manifest.push_str(&format!("payload {offset}\n"));

    let mut out = manifest.into_bytes();
    out.reserve(offset);
    for t in tensors {
        t.data.write_payload(&mut out);
    }
    Ok(out)
}

pub fn save_archive(tensors: &[NamedTensor], path: &Path) -> Result<()> {
    let bytes = archive_bytes(tensors)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

fn manifest_err(line_no: usize, msg: impl Into<String>) -> Error {
    Error::ArchiveManifest(format!("line {line_no}: {}", msg.into()))
}

pub fn parse_archive(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    // the manifest is everything up to the payload line's newline
    let mut pos = 0usize;
    let mut line_no = 0usize;
    let next_line = |pos: &mut usize, line_no: &mut usize| -> Result<String> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return Err(Error::ArchiveManifest(format!(
                "manifest ended early at line {}",
                *line_no + 1
            )));
        }
        let line = std::str::from_utf8(&bytes[start..*pos])
            .map_err(|_| Error::ArchiveManifest(format!("line {} is not UTF-8", *line_no + 1)))?
            .to_string();
        *pos += 1;
        *line_no += 1;
        Ok(line)
    };

    let version = next_line(&mut pos, &mut line_no)?;
    if version != VERSION_LINE {
        return Err(Error::ArchiveVersion(format!(
            "expected {VERSION_LINE:?}, found {version:?}"
        )));
    }
    let count_line = next_line(&mut pos, &mut line_no)?;
    let n: usize = count_line
        .strip_prefix("tensors ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| manifest_err(line_no, format!("bad tensor count line {count_line:?}")))?;

    struct Entry {
        name: String,
        dtype: Dtype,
        shape: Vec<usize>,
        offset: usize,
    }
    let mut entries = Vec::with_capacity(n);
    let mut seen = HashSet::new();
    for _ in 0..n {
        let line = next_line(&mut pos, &mut line_no)?;
        let mut toks = line.split_ascii_whitespace();
        let name = toks
            .next()
            .ok_or_else(|| manifest_err(line_no, "empty tensor line"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(manifest_err(line_no, format!("duplicate tensor name {name:?}")));
        }
        let dtype = toks
            .next()
            .and_then(Dtype::parse)
            .ok_or_else(|| manifest_err(line_no, "missing or unknown dtype"))?;
        let rank: usize = toks
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| manifest_err(line_no, "bad rank"))?;
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            shape.push(
                toks.next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| manifest_err(line_no, format!("missing dimension {i}")))?,
            );
        }
        let offset: usize = toks
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| manifest_err(line_no, "missing offset"))?;
        if toks.next().is_some() {
            return Err(manifest_err(line_no, "trailing tokens"));
        }
        entries.push(Entry { name, dtype, shape, offset });
    }
    let payload_line = next_line(&mut pos, &mut line_no)?;
    let total: usize = payload_line
        .strip_prefix("payload ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| manifest_err(line_no, format!("bad payload line {payload_line:?}")))?;

    let payload = &bytes[pos..];
    if payload.len() != total {
        return Err(Error::ArchiveOffsets(format!(
            "payload holds {} bytes, manifest says {total}",
            payload.len()
        )));
    }
    // offsets must tile the payload exactly, in order
    let mut expect = 0usize;
    for e in &entries {
        if e.offset != expect {
            return Err(Error::ArchiveOffsets(format!(
                "tensor {:?} at offset {}, expected {expect}",
                e.name, e.offset
            )));
        }
        expect += e.shape.iter().product::<usize>() * e.dtype.byte_width();
    }
    if expect != total {
        return Err(Error::ArchiveOffsets(format!(
            "tensors cover {expect} bytes, payload has {total}"
        )));
    }

    let mut out = Vec::with_capacity(n);
    for e in entries {
        let numel: usize = e.shape.iter().product();
        let width = e.dtype.byte_width();
        let raw = &payload[e.offset..e.offset + numel * width];
        let data = match e.dtype {
            Dtype::F32 => {
                let vals: Vec<f32> =
                    raw.chunks_exact(width).map(f32::read_le_bytes).collect();
                TensorData::F32(Tensor::from_vec(e.shape, vals)?)
            }
            Dtype::F64 => {
                let vals: Vec<f64> =
                    raw.chunks_exact(width).map(f64::read_le_bytes).collect();
                TensorData::F64(Tensor::from_vec(e.shape, vals)?)
            }
        };
        out.push(NamedTensor { name: e.name, data });
    }
    Ok(out)
}

pub fn load_archive(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = std::fs::read(path)?;
    parse_archive(&bytes)
}

/// Pull one tensor out of a loaded archive in the precision the caller
/// compiled for; a stored dtype that disagrees is an error, not a cast.
pub fn take_tensor<E: ArchiveElement>(tensors: &[NamedTensor], name: &str) -> Result<Tensor<E>> {
    let t = tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::ArchiveManifest(format!("archive has no tensor {name:?}")))?;
    E::unwrap(&t.data).cloned().ok_or_else(|| {
        Error::contract(format!(
            "tensor {name:?} is stored as {}, requested {}",
            t.data.dtype().name(),
            E::DTYPE.name()
        ))
    })
}

pub fn take_f64_scalar(tensors: &[NamedTensor], name: &str) -> Result<f64> {
    let t: Tensor<f64> = take_tensor(tensors, name)?;
    t.scalar_value()
}
