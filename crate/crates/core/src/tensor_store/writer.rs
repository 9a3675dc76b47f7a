use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use half::{bf16, f16};
use indexmap::IndexMap;
use serde_json::{json, Map, Value};

use super::archive::METADATA_KEY;
use super::{DType, StoreError, Tensor};

/// Name, dtype and shape of a tensor about to be written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorLayout {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl TensorLayout {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    fn byte_len(&self) -> u64 {
        (self.element_count() * self.dtype.byte_width()) as u64
    }
}

impl From<&Tensor> for TensorLayout {
    fn from(t: &Tensor) -> Self {
        Self {
            name: t.name.clone(),
            dtype: t.dtype,
            shape: t.shape.clone(),
        }
    }
}

/// Widens little-endian stored bytes to `f32`.
pub fn decode_values(dtype: DType, bytes: &[u8]) -> Vec<f32> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        DType::F16 => bytes
            .chunks_exact(2)
            .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32())
            .collect(),
        DType::BF16 => bytes
            .chunks_exact(2)
            .map(|c| bf16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32())
            .collect(),
    }
}

/// Quantizes `f32` values to `dtype` (round to nearest, ties to even) and
/// serializes them little-endian.
pub fn encode_values(dtype: DType, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * dtype.byte_width());
    match dtype {
        DType::F32 => values
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F16 => values
            .iter()
            .for_each(|v| out.extend_from_slice(&f16::from_f32(*v).to_bits().to_le_bytes())),
        DType::BF16 => values
            .iter()
            .for_each(|v| out.extend_from_slice(&bf16::from_f32(*v).to_bits().to_le_bytes())),
    }
    out
}

/// Length prefix plus JSON header for `layout`, with contiguous data offsets
/// in layout order. The JSON is padded with spaces to a multiple of 8 bytes.
pub fn header_bytes(
    layout: &[TensorLayout],
    metadata: Option<&IndexMap<String, String>>,
) -> Result<Vec<u8>, StoreError> {
    let mut header = Map::new();
    if let Some(meta) = metadata {
        let meta: Map<String, Value> = meta
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        header.insert(METADATA_KEY.to_string(), Value::Object(meta));
    }
    let mut offset = 0u64;
    for t in layout {
        if t.name == METADATA_KEY || header.contains_key(&t.name) {
            return Err(StoreError::DuplicateTensor(t.name.clone()));
        }
        let end = offset + t.byte_len();
        header.insert(
            t.name.clone(),
            json!({
                "dtype": t.dtype.as_str(),
                "shape": t.shape,
                "data_offsets": [offset, end],
            }),
        );
        offset = end;
    }
    let mut text = serde_json::to_vec(&Value::Object(header))
        .map_err(|e| StoreError::HeaderJson(e.to_string()))?;
    while text.len() % 8 != 0 {
        text.push(b' ');
    }
    let mut bytes = (text.len() as u64).to_le_bytes().to_vec();
    bytes.extend_from_slice(&text);
    Ok(bytes)
}

fn check_lengths(tensors: &[Tensor]) -> Result<(), StoreError> {
    for t in tensors {
        if t.values.len() != t.element_count() {
            return Err(StoreError::ShapeMismatch {
                tensor: t.name.clone(),
                shape: t.shape.clone(),
                values: t.values.len(),
            });
        }
    }
    Ok(())
}

/// Serializes a whole archive in memory.
pub fn encode_archive(
    tensors: &[Tensor],
    metadata: Option<&IndexMap<String, String>>,
) -> Result<Vec<u8>, StoreError> {
    check_lengths(tensors)?;
    let layout: Vec<TensorLayout> = tensors.iter().map(TensorLayout::from).collect();
    let mut bytes = header_bytes(&layout, metadata)?;
    for t in tensors {
        bytes.extend_from_slice(&encode_values(t.dtype, &t.values));
    }
    Ok(bytes)
}

/// Writes `tensors` to `path` in the given order.
pub fn write_archive(
    path: impl AsRef<Path>,
    tensors: &[Tensor],
    metadata: Option<&IndexMap<String, String>>,
) -> Result<(), StoreError> {
    check_lengths(tensors)?;
    let layout = tensors.iter().map(TensorLayout::from).collect();
    let mut writer = ArchiveWriter::create(path, layout, metadata)?;
    for t in tensors {
        writer.write_values(&t.name, &t.values)?;
    }
    writer.finish()
}

/// Streams tensors into an archive file one at a time.
///
/// The header is written up front from the declared layout, so tensors must
/// arrive in layout order. Output goes to a sibling `.partial` file that is
/// renamed into place by [`ArchiveWriter::finish`]; a dropped writer leaves no
/// file behind.
pub struct ArchiveWriter {
    out: Option<BufWriter<File>>,
    pending: VecDeque<TensorLayout>,
    tmp_path: PathBuf,
    final_path: PathBuf,
}

impl ArchiveWriter {
    pub fn create(
        path: impl AsRef<Path>,
        layout: Vec<TensorLayout>,
        metadata: Option<&IndexMap<String, String>>,
    ) -> Result<Self, StoreError> {
        let final_path = path.as_ref().to_path_buf();
        let mut tmp_name = final_path
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_default();
        tmp_name.push(".partial");
        let tmp_path = final_path.with_file_name(tmp_name);
        let header = header_bytes(&layout, metadata)?;
        let file = File::create(&tmp_path).map_err(|e| StoreError::io(&tmp_path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(&header)
            .map_err(|e| StoreError::io(&tmp_path, e))?;
        Ok(Self {
            out: Some(out),
            pending: layout.into(),
            tmp_path,
            final_path,
        })
    }

    fn next_layout(&mut self, name: &str) -> Result<TensorLayout, StoreError> {
        match self.pending.front() {
            Some(next) if next.name == name => Ok(self.pending.pop_front().expect("front exists")),
            Some(next) => Err(StoreError::WriteOrder {
                expected: next.name.clone(),
                got: name.to_string(),
            }),
            None => Err(StoreError::WriteOrder {
                expected: "<end>".to_string(),
                got: name.to_string(),
            }),
        }
    }

    /// Quantizes `values` to the declared dtype and appends them.
    pub fn write_values(&mut self, name: &str, values: &[f32]) -> Result<(), StoreError> {
        let layout = self.next_layout(name)?;
        if values.len() != layout.element_count() {
            return Err(StoreError::ShapeMismatch {
                tensor: layout.name,
                shape: layout.shape,
                values: values.len(),
            });
        }
        let bytes = encode_values(layout.dtype, values);
        self.append(&bytes)
    }

    /// Appends already-encoded bytes for the next tensor.
    pub fn write_raw(&mut self, name: &str, bytes: &[u8]) -> Result<(), StoreError> {
        let layout = self.next_layout(name)?;
        if bytes.len() as u64 != layout.byte_len() {
            return Err(StoreError::ByteCountMismatch {
                expected: layout.byte_len(),
                tensor: layout.name,
                actual: bytes.len() as u64,
            });
        }
        self.append(bytes)
    }

    fn append(&mut self, bytes: &[u8]) -> Result<(), StoreError> {
        let out = self.out.as_mut().expect("writer used after finish");
        out.write_all(bytes)
            .map_err(|e| StoreError::io(&self.tmp_path, e))
    }

    pub fn finish(mut self) -> Result<(), StoreError> {
        if !self.pending.is_empty() {
            return Err(StoreError::Incomplete(self.pending.len()));
        }
        let out = self.out.take().expect("writer used after finish");
        let file = out
            .into_inner()
            .map_err(|e| StoreError::io(&self.tmp_path, e.into_error()))?;
        file.sync_all()
            .map_err(|e| StoreError::io(&self.tmp_path, e))?;
        drop(file);
        fs::rename(&self.tmp_path, &self.final_path)
            .map_err(|e| StoreError::io(&self.final_path, e))
    }
}

impl Drop for ArchiveWriter {
    fn drop(&mut self) {
        if self.out.take().is_some() {
            let _ = fs::remove_file(&self.tmp_path);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::{open_archive, TensorSource};

    #[test]
    fn round_trips_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        write_archive(&path, &[Tensor::vector("w", vec![3.0, 4.0])], None).unwrap();
        let archive = open_archive(&path).unwrap();
        assert_eq!(archive.read_tensor("w").unwrap().values, vec![3.0, 4.0]);
        assert!(!dir.path().join("w.safetensors.partial").exists());
    }

    #[test]
    fn header_is_padded_to_eight_bytes() {
        let bytes = encode_archive(&[Tensor::vector("w", vec![1.0])], None).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        assert_eq!(n % 8, 0);
        assert_eq!(bytes.len() as u64, 8 + n + 4);
    }

    #[test]
    fn rejects_length_mismatch() {
        let t = Tensor::new("w", DType::F32, vec![3], vec![1.0]);
        assert!(matches!(
            encode_archive(&[t], None),
            Err(StoreError::ShapeMismatch { values: 1, .. })
        ));
    }

    #[test]
    fn f16_quantization_rounds_to_nearest() {
        // 1.0004 sits between 1.0 and 1.0 + 2^-10 = 1.0009765625; nearer to 1.0.
        let bytes = encode_values(DType::F16, &[1.0004, 1.0006]);
        let back = decode_values(DType::F16, &bytes);
        assert_eq!(back, vec![1.0, 1.0 + 1.0 / 1024.0]);
    }

    #[test]
    fn writer_enforces_declared_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.safetensors");
        let layout = vec![
            TensorLayout {
                name: "a".into(),
                dtype: DType::F32,
                shape: vec![1],
            },
            TensorLayout {
                name: "b".into(),
                dtype: DType::F32,
                shape: vec![1],
            },
        ];
        let mut w = ArchiveWriter::create(&path, layout, None).unwrap();
        assert!(matches!(
            w.write_values("b", &[1.0]),
            Err(StoreError::WriteOrder { .. })
        ));
        w.write_values("a", &[1.0]).unwrap();
        drop(w);
        assert!(!path.exists());
        assert!(!dir.path().join("o.safetensors.partial").exists());
    }
}
