use std::fmt;
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::Value;

use super::source::{ByteSource, FileSource};
use super::writer::decode_values;
use super::{DType, StoreError, Tensor, TensorMeta, TensorSource};

pub(crate) const METADATA_KEY: &str = "__metadata__";

/// An opened archive. Only the header is parsed on open; tensor bytes are read
/// lazily through the shared byte source.
#[derive(Clone)]
pub struct TensorArchive {
    source: Arc<dyn ByteSource>,
    data_start: u64,
    metas: IndexMap<String, TensorMeta>,
    metadata: Option<IndexMap<String, String>>,
}

impl fmt::Debug for TensorArchive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TensorArchive")
            .field("path", &self.path())
            .field("data_start", &self.data_start)
            .field("tensors", &self.metas.len())
            .finish()
    }
}

/// Opens an archive file, reading only its header.
pub fn open_archive(path: impl AsRef<Path>) -> Result<TensorArchive, StoreError> {
    TensorArchive::open(path)
}

impl TensorArchive {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let source = FileSource::open(path).map_err(|e| StoreError::io(path, e))?;
        Self::from_source(Arc::new(source))
    }

    pub fn from_source(source: Arc<dyn ByteSource>) -> Result<Self, StoreError> {
        let total = source.len();
        if total < 8 {
            return Err(StoreError::HeaderLength(format!(
                "file is {total} bytes, shorter than the 8-byte length prefix"
            )));
        }
        let mut prefix = [0u8; 8];
        source
            .read_exact_at(0, &mut prefix)
            .map_err(|e| io_err(&*source, e))?;
        let header_len = u64::from_le_bytes(prefix);
        if header_len > total - 8 {
            return Err(StoreError::HeaderLength(format!(
                "header declares {header_len} bytes but only {} follow the prefix",
                total - 8
            )));
        }
        let mut header = vec![0u8; header_len as usize];
        source
            .read_exact_at(8, &mut header)
            .map_err(|e| io_err(&*source, e))?;
        let data_start = 8 + header_len;
        let data_len = total - data_start;
        let (metas, metadata) = parse_header(&header, data_len)?;
        Ok(Self {
            source,
            data_start,
            metas,
            metadata,
        })
    }

    /// Byte offset of the data section from the start of the file.
    pub fn data_start(&self) -> u64 {
        self.data_start
    }

    pub fn metadata(&self) -> Option<&IndexMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.metas.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }

    pub fn path(&self) -> Option<&Path> {
        self.source.path()
    }

    fn meta_or_err(&self, name: &str) -> Result<&TensorMeta, StoreError> {
        self.metas
            .get(name)
            .ok_or_else(|| StoreError::UnknownTensor(name.to_string()))
    }
}

impl TensorSource for TensorArchive {
    fn metas(&self) -> Vec<&TensorMeta> {
        self.metas.values().collect()
    }

    fn meta(&self, name: &str) -> Option<&TensorMeta> {
        self.metas.get(name)
    }

    fn read_raw(&self, name: &str) -> Result<Vec<u8>, StoreError> {
        let meta = self.meta_or_err(name)?;
        let mut buf = vec![0u8; meta.byte_len() as usize];
        self.source
            .read_exact_at(self.data_start + meta.data_offsets.0, &mut buf)
            .map_err(|e| io_err(&*self.source, e))?;
        Ok(buf)
    }

    fn read_tensor(&self, name: &str) -> Result<Tensor, StoreError> {
        let meta = self.meta_or_err(name)?;
        let raw = self.read_raw(name)?;
        Ok(Tensor {
            name: meta.name.clone(),
            dtype: meta.dtype,
            shape: meta.shape.clone(),
            values: decode_values(meta.dtype, &raw),
        })
    }
}

fn io_err(source: &dyn ByteSource, e: std::io::Error) -> StoreError {
    StoreError::io(
        source
            .path()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| "<memory>".into()),
        e,
    )
}

/// Header object with entries in file order; duplicate keys are kept so they
/// can be reported instead of silently collapsed.
struct RawHeader(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct HeaderVisitor;

        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object mapping tensor names to entries")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<RawHeader, A::Error> {
                let mut entries = Vec::new();
                while let Some((key, value)) = map.next_entry::<String, Value>()? {
                    entries.push((key, value));
                }
                Ok(RawHeader(entries))
            }
        }

        deserializer.deserialize_map(HeaderVisitor)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: [u64; 2],
}

type ParsedHeader = (
    IndexMap<String, TensorMeta>,
    Option<IndexMap<String, String>>,
);

pub(crate) fn parse_header(bytes: &[u8], data_len: u64) -> Result<ParsedHeader, StoreError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| StoreError::HeaderJson(format!("header is not UTF-8: {e}")))?;
    let RawHeader(entries) =
        serde_json::from_str(text).map_err(|e| StoreError::HeaderJson(e.to_string()))?;

    let mut metas: IndexMap<String, TensorMeta> = IndexMap::with_capacity(entries.len());
    let mut metadata = None;
    for (name, value) in entries {
        if name == METADATA_KEY {
            if metadata.is_some() {
                return Err(StoreError::DuplicateTensor(name));
            }
            let map: IndexMap<String, String> = serde_json::from_value(value).map_err(|e| {
                StoreError::HeaderJson(format!("{METADATA_KEY} must map strings to strings: {e}"))
            })?;
            metadata = Some(map);
            continue;
        }
        if metas.contains_key(&name) {
            return Err(StoreError::DuplicateTensor(name));
        }
        let meta = parse_entry(&name, value, data_len)?;
        metas.insert(name, meta);
    }
    check_overlaps(&metas)?;
    Ok((metas, metadata))
}

fn parse_entry(name: &str, value: Value, data_len: u64) -> Result<TensorMeta, StoreError> {
    let raw: RawEntry = serde_json::from_value(value).map_err(|e| StoreError::InvalidEntry {
        tensor: name.to_string(),
        reason: e.to_string(),
    })?;
    let dtype = DType::parse(&raw.dtype).ok_or_else(|| StoreError::UnknownDType {
        tensor: name.to_string(),
        dtype: raw.dtype.clone(),
    })?;
    let [begin, end] = raw.data_offsets;
    if begin > end {
        return Err(StoreError::InvalidEntry {
            tensor: name.to_string(),
            reason: format!("data_offsets begin {begin} exceeds end {end}"),
        });
    }
    let overflow = || StoreError::InvalidEntry {
        tensor: name.to_string(),
        reason: "shape element count overflows".to_string(),
    };
    let mut shape = Vec::with_capacity(raw.shape.len());
    let mut count: u64 = 1;
    for &dim in &raw.shape {
        count = count.checked_mul(dim).ok_or_else(overflow)?;
        shape.push(usize::try_from(dim).map_err(|_| overflow())?);
    }
    let expected = count
        .checked_mul(dtype.byte_width() as u64)
        .ok_or_else(overflow)?;
    if end - begin != expected {
        return Err(StoreError::ByteCountMismatch {
            tensor: name.to_string(),
            expected,
            actual: end - begin,
        });
    }
    if end > data_len {
        return Err(StoreError::OutOfBounds {
            tensor: name.to_string(),
            begin,
            end,
            data_len,
        });
    }
    Ok(TensorMeta {
        name: name.to_string(),
        dtype,
        shape,
        data_offsets: (begin, end),
    })
}

fn check_overlaps(metas: &IndexMap<String, TensorMeta>) -> Result<(), StoreError> {
    let mut ranges: Vec<&TensorMeta> = metas.values().filter(|m| m.byte_len() > 0).collect();
    ranges.sort_by_key(|m| m.data_offsets);
    for pair in ranges.windows(2) {
        if pair[1].data_offsets.0 < pair[0].data_offsets.1 {
            return Err(StoreError::Overlap {
                first: pair[0].name.clone(),
                second: pair[1].name.clone(),
            });
        }
    }
    Ok(())
}
