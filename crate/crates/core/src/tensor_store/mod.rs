//! Single-file tensor archives.
//!
//! The container is the common `safetensors` layout: an 8-byte little-endian
//! header length `N`, `N` bytes of UTF-8 JSON describing every tensor, then the
//! raw little-endian, row-major data section. Opening an archive parses only the
//! header; tensor bytes are fetched on demand through a [`ByteSource`], which
//! lets the arithmetic layer stream one tensor at a time.
//!
//! All consumers see values widened to `f32`. The stored [`DType`] is kept as
//! metadata so outputs can be written back in the input precision.

mod archive;
mod compat;
mod shard;
mod source;
mod writer;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use archive::{open_archive, TensorArchive};
pub use compat::{
    scan_non_finite, validate_compatibility, CompatibilityReport, DTypeMismatch, NonFiniteFlag,
    ShapeMismatch, Side,
};
pub use shard::{Checkpoint, ShardIndex, ShardedArchive};
pub use source::{ByteSource, CountingSource, FileSource, MemorySource, ReadEvent};
pub use writer::{
    decode_values, encode_archive, encode_values, header_bytes, write_archive, ArchiveWriter,
    TensorLayout,
};

/// Stored element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub const fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    /// Parses the header spelling of a dtype (`"F32"`, `"F16"`, `"BF16"`).
    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            "BF16" => Some(DType::BF16),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Header entry for one tensor. Offsets are relative to the start of the data
/// section.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data_offsets: (u64, u64),
}

impl TensorMeta {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.data_offsets.1 - self.data_offsets.0
    }
}

/// A dense tensor with values widened to `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dtype: DType, shape: Vec<usize>, values: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dtype,
            shape,
            values,
        }
    }

    /// A rank-1 `F32` tensor.
    pub fn vector(name: impl Into<String>, values: Vec<f32>) -> Self {
        let n = values.len();
        Self::new(name, DType::F32, vec![n], values)
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Anything that exposes named tensors: a single archive or a sharded checkpoint.
pub trait TensorSource: Send + Sync {
    /// Tensor metadata in header order.
    fn metas(&self) -> Vec<&TensorMeta>;

    fn meta(&self, name: &str) -> Option<&TensorMeta>;

    /// Reads and widens one tensor.
    fn read_tensor(&self, name: &str) -> Result<Tensor, StoreError>;

    /// Reads the stored bytes of one tensor without decoding.
    fn read_raw(&self, name: &str) -> Result<Vec<u8>, StoreError>;

    fn tensor_count(&self) -> usize {
        self.metas().len()
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header length: {0}")]
    HeaderLength(String),
    #[error("header not valid JSON: {0}")]
    HeaderJson(String),
    #[error("duplicate tensor name in header: {0:?}")]
    DuplicateTensor(String),
    #[error("tensor {tensor:?}: unknown dtype {dtype:?}")]
    UnknownDType { tensor: String, dtype: String },
    #[error("tensor {tensor:?}: invalid header entry: {reason}")]
    InvalidEntry { tensor: String, reason: String },
    #[error(
        "tensor {tensor:?}: byte range holds {actual} bytes but shape and dtype need {expected}"
    )]
    ByteCountMismatch {
        tensor: String,
        expected: u64,
        actual: u64,
    },
    #[error("tensor {tensor:?}: out-of-bounds range [{begin}, {end}) for a data section of {data_len} bytes")]
    OutOfBounds {
        tensor: String,
        begin: u64,
        end: u64,
        data_len: u64,
    },
    #[error("tensors {first:?} and {second:?} have overlapping byte ranges")]
    Overlap { first: String, second: String },
    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),
    #[error("tensor {tensor:?}: {values} values supplied for shape {shape:?}")]
    ShapeMismatch {
        tensor: String,
        shape: Vec<usize>,
        values: usize,
    },
    #[error("writer expected tensor {expected:?} next but got {got:?}")]
    WriteOrder { expected: String, got: String },
    #[error("writer finished with {0} tensors still unwritten")]
    Incomplete(usize),
    #[error("shard index {path}: {reason}")]
    ShardIndex { path: PathBuf, reason: String },
    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),
}

impl StoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.into(),
            source,
        }
    }
}
