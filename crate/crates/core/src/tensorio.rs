//! Binary tensor container and the checkpoint archive built on top of it.
//!
//! Container layout: 8-byte magic `SFTENS01`, one UTF-8 JSON header line
//! (terminated by `\n`) of the form
//! `{"shape":[...],"dtype":"u8|f32|f64","order":"THWC"}`, then the row-major
//! payload, little-endian. Clip files use `u8` or `f32`; checkpoints store
//! parameters as `f64` so a save/load round trip is bit-exact.
//!
//! The header may carry extra metadata keys after the three required ones
//! (clips store an optional `"boundary":[start,end]`).
//!
//! Checkpoint layout: 8-byte magic `SFCKPT01`, one JSON line with the config
//! echo and the entry table, then each entry as a complete tensor container
//! blob in table order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"SFTENS01";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SFCKPT01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "u8")]
    U8,
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// JSON header line of a tensor container. Field order is the serialized key
/// order, which keeps regeneration byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorHeader {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub order: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub boundary: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub enum TensorData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::U8(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::U8(_) => Dtype::U8,
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }
}

/// Serializes one tensor into a byte buffer (magic + header line + payload).
pub fn tensor_to_bytes(header: &TensorHeader, data: &TensorData) -> Result<Vec<u8>> {
    let count: usize = header.shape.iter().product();
    if count != data.len() {
        return Err(Error::Shape(format!(
            "tensor payload has {} elements, shape {:?} wants {}",
            data.len(),
            header.shape,
            count
        )));
    }
    if header.dtype != data.dtype() {
        return Err(Error::Shape("header dtype does not match payload".into()));
    }
    let header_json = serde_json::to_string(header)
        .map_err(|e| Error::InvalidArgument(format!("header serialization: {e}")))?;
    let mut out = Vec::with_capacity(16 + header_json.len() + count * header.dtype.byte_width());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(header_json.as_bytes());
    out.push(b'\n');
    match data {
        TensorData::U8(v) => out.extend_from_slice(v),
        TensorData::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::F64(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn read_exact_or(reader: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    reader
        .read_exact(buf)
        .map_err(|e| Error::format(what, format!("truncated while reading {what}: {e}")))
}

/// Parses one tensor container from a reader positioned at its magic.
pub fn read_tensor_from(reader: &mut impl Read) -> Result<(TensorHeader, TensorData)> {
    let mut magic = [0u8; 8];
    read_exact_or(reader, &mut magic, "tensor magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::format("<stream>", "bad magic, not a tensor container"));
    }
    let mut header_bytes = Vec::with_capacity(128);
    loop {
        let mut b = [0u8; 1];
        read_exact_or(reader, &mut b, "tensor header")?;
        if b[0] == b'\n' {
            break;
        }
        header_bytes.push(b[0]);
        if header_bytes.len() > 1 << 20 {
            return Err(Error::format("<stream>", "unterminated header line"));
        }
    }
    let header: TensorHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::format("<stream>", format!("bad header json: {e}")))?;
    let count: usize = header.shape.iter().product();
    let mut payload = vec![0u8; count * header.dtype.byte_width()];
    read_exact_or(reader, &mut payload, "tensor payload")?;
    let data = match header.dtype {
        Dtype::U8 => TensorData::U8(payload),
        Dtype::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        Dtype::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok((header, data))
}

pub fn read_tensor_file(path: &Path) -> Result<(TensorHeader, TensorData)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    read_tensor_from(&mut reader).map_err(|e| match e {
        Error::Format { reason, .. } => Error::format(path, reason),
        other => other,
    })
}

pub fn write_tensor_file(path: &Path, header: &TensorHeader, data: &TensorData) -> Result<()> {
    let bytes = tensor_to_bytes(header, data)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Checkpoint archive
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Echo of the model configuration the parameters belong to.
    pub config: serde_json::Value,
    pub phase: u32,
    pub epoch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArchiveHeader {
    meta: CheckpointMeta,
    entries: Vec<ArchiveEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArchiveEntry {
    name: String,
    len: u64,
}

pub fn write_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    tensors: &[(String, ArrayViewD<'_, f64>)],
) -> Result<()> {
    let mut blobs = Vec::with_capacity(tensors.len());
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, view) in tensors {
        let header = TensorHeader {
            shape: view.shape().to_vec(),
            dtype: Dtype::F64,
            order: "ROWMAJOR".to_string(),
            boundary: None,
        };
        let data = TensorData::F64(view.iter().copied().collect());
        let blob = tensor_to_bytes(&header, &data)?;
        entries.push(ArchiveEntry {
            name: name.clone(),
            len: blob.len() as u64,
        });
        blobs.push(blob);
    }
    let header = ArchiveHeader {
        meta: meta.clone(),
        entries,
    };
    let header_json = serde_json::to_string(&header)
        .map_err(|e| Error::InvalidArgument(format!("checkpoint header: {e}")))?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let emit = |w: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
        w.write_all(bytes).map_err(|e| Error::io(path, e))
    };
    emit(&mut w, CHECKPOINT_MAGIC)?;
    emit(&mut w, header_json.as_bytes())?;
    emit(&mut w, b"\n")?;
    for blob in &blobs {
        emit(&mut w, blob)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, Vec<(String, ArrayD<f64>)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut magic = [0u8; 8];
    reader
        .read_exact(&mut magic)
        .map_err(|e| Error::io(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic, not a checkpoint"));
    }
    let mut header_bytes = Vec::new();
    loop {
        let mut b = [0u8; 1];
        reader.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
        if b[0] == b'\n' {
            break;
        }
        header_bytes.push(b[0]);
    }
    let header: ArchiveHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::format(path, format!("bad checkpoint header: {e}")))?;
    let mut tensors = Vec::with_capacity(header.entries.len());
    for entry in &header.entries {
        let (theader, tdata) = read_tensor_from(&mut reader)
            .map_err(|e| Error::format(path, format!("entry {}: {e}", entry.name)))?;
        let values = match tdata {
            TensorData::F64(v) => v,
            other => {
                return Err(Error::format(
                    path,
                    format!("entry {} has dtype {:?}, want f64", entry.name, other.dtype()),
                ))
            }
        };
        let arr = ArrayD::from_shape_vec(theader.shape.clone(), values)
            .map_err(|e| Error::format(path, format!("entry {}: {e}", entry.name)))?;
        tensors.push((entry.name.clone(), arr));
    }
    Ok((header.meta, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn roundtrip_u8() {
        let header = TensorHeader {
            shape: vec![2, 3],
            dtype: Dtype::U8,
            order: "THWC".into(),
            boundary: Some((1, 2)),
        };
        let data = TensorData::U8(vec![0, 1, 2, 3, 4, 255]);
        let bytes = tensor_to_bytes(&header, &data).unwrap();
        let (h2, d2) = read_tensor_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(h2.shape, vec![2, 3]);
        assert_eq!(h2.boundary, Some((1, 2)));
        match d2 {
            TensorData::U8(v) => assert_eq!(v, vec![0, 1, 2, 3, 4, 255]),
            _ => panic!("dtype"),
        }
    }

    #[test]
    fn roundtrip_f32_is_bit_exact() {
        let header = TensorHeader {
            shape: vec![4],
            dtype: Dtype::F32,
            order: "THWC".into(),
            boundary: None,
        };
        let vals = vec![0.0f32, -1.5, f32::MIN_POSITIVE, 3.0e7];
        let bytes = tensor_to_bytes(&header, &TensorData::F32(vals.clone())).unwrap();
        let (_, d2) = read_tensor_from(&mut bytes.as_slice()).unwrap();
        match d2 {
            TensorData::F32(v) => assert_eq!(
                v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                vals.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            ),
            _ => panic!("dtype"),
        }
    }

    #[test]
    fn serialization_is_deterministic() {
        let header = TensorHeader {
            shape: vec![3],
            dtype: Dtype::U8,
            order: "THWC".into(),
            boundary: None,
        };
        let a = tensor_to_bytes(&header, &TensorData::U8(vec![7, 8, 9])).unwrap();
        let b = tensor_to_bytes(&header, &TensorData::U8(vec![7, 8, 9])).unwrap();
        assert_eq!(a, b);
        // required keys come first, in the documented order
        let text = String::from_utf8_lossy(&a);
        assert!(text.contains(r#"{"shape":[3],"dtype":"u8","order":"THWC"}"#));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let bytes = b"NOTMAGIC{\"shape\":[0]}\n".to_vec();
        let err = read_tensor_from(&mut bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let header = TensorHeader {
            shape: vec![4],
            dtype: Dtype::U8,
            order: "THWC".into(),
            boundary: None,
        };
        let mut bytes = tensor_to_bytes(&header, &TensorData::U8(vec![1, 2, 3, 4])).unwrap();
        bytes.truncate(bytes.len() - 2);
        assert!(read_tensor_from(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sfckpt");
        let a = ArrayD::from_shape_vec(vec![2, 2], vec![1.0, -2.25, 1e-300, 0.1]).unwrap();
        let b = ArrayD::from_shape_vec(vec![3], vec![5.0, 6.0, 7.0]).unwrap();
        let meta = CheckpointMeta {
            config: serde_json::json!({"preset": "desk"}),
            phase: 1,
            epoch: 3,
        };
        write_checkpoint(
            &path,
            &meta,
            &[("w.a".to_string(), a.view()), ("w.b".to_string(), b.view())],
        )
        .unwrap();
        let (meta2, tensors) = read_checkpoint(&path).unwrap();
        assert_eq!(meta2.phase, 1);
        assert_eq!(meta2.epoch, 3);
        assert_eq!(tensors.len(), 2);
        assert_eq!(tensors[0].0, "w.a");
        assert_eq!(
            tensors[0].1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(tensors[1].1, b);
    }
}
