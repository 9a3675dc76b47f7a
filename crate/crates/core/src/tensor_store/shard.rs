use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{open_archive, StoreError, Tensor, TensorArchive, TensorMeta, TensorSource};

/// `{"weight_map": {tensor name: shard file name}}`. Other top-level keys
/// (e.g. `"metadata"`) are ignored on read.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardIndex {
    pub weight_map: IndexMap<String, String>,
}

impl ShardIndex {
    pub fn read(path: &Path) -> Result<Self, StoreError> {
        let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| StoreError::ShardIndex {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Shard file names in order of first appearance.
    pub fn shard_files(&self) -> Vec<&str> {
        let mut files: Vec<&str> = Vec::new();
        for file in self.weight_map.values() {
            if !files.contains(&file.as_str()) {
                files.push(file);
            }
        }
        files
    }
}

/// A checkpoint split across several archives with disjoint tensor names.
#[derive(Debug, Clone)]
pub struct ShardedArchive {
    index_path: PathBuf,
    shards: Vec<(String, TensorArchive)>,
    locator: IndexMap<String, usize>,
}

impl ShardedArchive {
    pub fn open(index_path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let index_path = index_path.as_ref().to_path_buf();
        let index = ShardIndex::read(&index_path)?;
        let dir = index_path.parent().unwrap_or_else(|| Path::new("."));
        let bad = |reason: String| StoreError::ShardIndex {
            path: index_path.clone(),
            reason,
        };

        let mut shards = Vec::new();
        let mut locator = IndexMap::new();
        for file in index.shard_files() {
            let archive = open_archive(dir.join(file))?;
            for name in archive.names() {
                match index.weight_map.get(name) {
                    Some(mapped) if mapped == file => {}
                    Some(mapped) => {
                        return Err(bad(format!(
                            "tensor {name:?} found in {file} but mapped to {mapped}"
                        )))
                    }
                    None => {
                        return Err(bad(format!(
                            "tensor {name:?} in {file} is not in weight_map"
                        )))
                    }
                }
                locator.insert(name.to_string(), shards.len());
            }
            shards.push((file.to_string(), archive));
        }
        if let Some(name) = index.weight_map.keys().find(|n| !locator.contains_key(*n)) {
            return Err(bad(format!(
                "tensor {name:?} listed in weight_map but absent from its shard"
            )));
        }
        Ok(Self {
            index_path,
            shards,
            locator,
        })
    }

    pub fn index_path(&self) -> &Path {
        &self.index_path
    }

    /// Shard file names paired with the tensors each holds, in order.
    pub fn shard_layout(&self) -> Vec<(String, Vec<String>)> {
        self.shards
            .iter()
            .map(|(file, a)| (file.clone(), a.names().map(str::to_string).collect()))
            .collect()
    }

    fn shard_of(&self, name: &str) -> Result<&TensorArchive, StoreError> {
        self.locator
            .get(name)
            .map(|&i| &self.shards[i].1)
            .ok_or_else(|| StoreError::UnknownTensor(name.to_string()))
    }
}

impl TensorSource for ShardedArchive {
    fn metas(&self) -> Vec<&TensorMeta> {
        self.shards.iter().flat_map(|(_, a)| a.metas()).collect()
    }

    fn meta(&self, name: &str) -> Option<&TensorMeta> {
        self.shard_of(name).ok().and_then(|a| a.meta(name))
    }

    fn read_tensor(&self, name: &str) -> Result<Tensor, StoreError> {
        self.shard_of(name)?.read_tensor(name)
    }

    fn read_raw(&self, name: &str) -> Result<Vec<u8>, StoreError> {
        self.shard_of(name)?.read_raw(name)
    }
}

/// Either a single archive file or a sharded checkpoint behind an index.
#[derive(Debug, Clone)]
pub enum Checkpoint {
    Single(TensorArchive),
    Sharded(ShardedArchive),
}

impl Checkpoint {
    /// Opens `path` as a shard index when it has a `.json` extension, otherwise
    /// as a single archive.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e == "json") {
            Ok(Checkpoint::Sharded(ShardedArchive::open(path)?))
        } else {
            Ok(Checkpoint::Single(open_archive(path)?))
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match self {
            Checkpoint::Single(a) => a.path(),
            Checkpoint::Sharded(s) => Some(s.index_path()),
        }
    }

    pub fn shard_layout(&self) -> Option<Vec<(String, Vec<String>)>> {
        match self {
            Checkpoint::Single(_) => None,
            Checkpoint::Sharded(s) => Some(s.shard_layout()),
        }
    }

    fn inner(&self) -> &dyn TensorSource {
        match self {
            Checkpoint::Single(a) => a,
            Checkpoint::Sharded(s) => s,
        }
    }
}

impl From<TensorArchive> for Checkpoint {
    fn from(a: TensorArchive) -> Self {
        Checkpoint::Single(a)
    }
}

impl TensorSource for Checkpoint {
    fn metas(&self) -> Vec<&TensorMeta> {
        self.inner().metas()
    }

    fn meta(&self, name: &str) -> Option<&TensorMeta> {
        self.inner().meta(name)
    }

    fn read_tensor(&self, name: &str) -> Result<Tensor, StoreError> {
        self.inner().read_tensor(name)
    }

    fn read_raw(&self, name: &str) -> Result<Vec<u8>, StoreError> {
        self.inner().read_raw(name)
    }
}
