//! Embedding table format.
//!
//! A table is a JSON header plus one raw little-endian float32 file holding
//! the vectors back to back:
//!
//! ```json
//! {
//!   "version": 1, "dim": 512, "kind": "image", "normalized": true,
//!   "entries": [{"class_id": 0, "item_index": 0, "offset": 0}, ...]
//! }
//! ```
//!
//! Offsets are byte offsets into the data file, which sits next to the header
//! under the same stem with extension `f32` (`image.json` + `image.f32`).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::norm;

pub const TABLE_VERSION: u32 = 1;

/// What the vectors in a table are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Image,
    TextRaw,
    TextPrototype,
}

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    kind: EmbeddingKind,
    normalized: bool,
    keys: Vec<(u32, u32)>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<(u32, u32), usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, kind: EmbeddingKind, normalized: bool) -> Self {
        EmbeddingTable { dim, kind, normalized, keys: Vec::new(), vectors: Vec::new(), index: HashMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn insert(&mut self, class_id: u32, item_index: u32, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::data(format!(
                "vector for class {class_id} item {item_index} has dim {}, table dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if self.index.contains_key(&(class_id, item_index)) {
            return Err(Error::data(format!(
                "duplicate entry for class {class_id} item {item_index}"
            )));
        }
        self.index.insert((class_id, item_index), self.keys.len());
        self.keys.push((class_id, item_index));
        self.vectors.push(vector);
        Ok(())
    }

    pub fn get(&self, class_id: u32, item_index: u32) -> Option<&[f64]> {
        self.index.get(&(class_id, item_index)).map(|&i| self.vectors[i].as_slice())
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = ((u32, u32), &[f64])> {
        self.keys.iter().copied().zip(self.vectors.iter().map(|v| v.as_slice()))
    }

    /// Sorted, deduplicated class ids present in the table.
    pub fn class_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.keys.iter().map(|&(c, _)| c).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Item indices present for a class, sorted.
    pub fn items_for_class(&self, class_id: u32) -> Vec<u32> {
        let mut items: Vec<u32> =
            self.keys.iter().filter(|&&(c, _)| c == class_id).map(|&(_, i)| i).collect();
        items.sort_unstable();
        items
    }

    /// A copy holding only the requested classes, each of which must be
    /// present. Used to build candidate sets for a specific class split.
    pub fn restricted_to(&self, classes: &std::collections::BTreeSet<u32>) -> Result<Self> {
        let mut out = EmbeddingTable::new(self.dim, self.kind, self.normalized);
        for &class in classes {
            let items = self.items_for_class(class);
            if items.is_empty() {
                return Err(Error::data(format!("class {class} is missing from the table")));
            }
            for item in items {
                let v = self.get(class, item).expect("listed item exists");
                out.insert(class, item, v.to_vec())?;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderJson {
    version: u32,
    dim: usize,
    kind: EmbeddingKind,
    normalized: bool,
    entries: Vec<EntryJson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryJson {
    class_id: u32,
    item_index: u32,
    offset: u64,
}

fn data_path_for(header_path: &Path) -> PathBuf {
    header_path.with_extension("f32")
}

/// Load a table from its JSON header; the raw data file sits next to it (same
/// stem, extension `f32`). `expect_dim` cross-checks the header dimension.
pub fn load_embedding_table(path: &Path, expect_dim: Option<usize>) -> Result<EmbeddingTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: HeaderJson = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if header.version != TABLE_VERSION {
        return Err(Error::data(format!(
            "unsupported embedding table version {} (expected {TABLE_VERSION})",
            header.version
        )));
    }
    if header.dim < 1 {
        return Err(Error::data("embedding dimension must be at least 1"));
    }
    if let Some(want) = expect_dim {
        if header.dim != want {
            return Err(Error::data(format!(
                "embedding table {} has dim {}, expected {want}",
                path.display(),
                header.dim
            )));
        }
    }
    let data_path = data_path_for(path);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let vec_bytes = header.dim as u64 * 4;
    let mut table = EmbeddingTable::new(header.dim, header.kind, header.normalized);
    for e in &header.entries {
        let end = e.offset + vec_bytes;
        if end > bytes.len() as u64 {
            return Err(Error::data(format!(
                "entry (class {}, item {}): needs bytes {}..{end} but the data file has {}",
                e.class_id,
                e.item_index,
                e.offset,
                bytes.len()
            )));
        }
        let v: Vec<f64> = bytes[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if header.normalized {
            let n = norm(&v);
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::data(format!(
                    "entry (class {}, item {}) has norm {n} in a normalized table",
                    e.class_id, e.item_index
                )));
            }
        }
        table.insert(e.class_id, e.item_index, v)?;
    }
    Ok(table)
}

/// Write a table as `header.json` + sibling `f32` data file.
pub fn write_embedding_table(table: &EmbeddingTable, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut raw = Vec::with_capacity(table.len() * table.dim() * 4);
    let mut entries = Vec::with_capacity(table.len());
    for ((class_id, item_index), v) in table.iter() {
        entries.push(EntryJson { class_id, item_index, offset: raw.len() as u64 });
        for &x in v {
            raw.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let header = HeaderJson {
        version: TABLE_VERSION,
        dim: table.dim(),
        kind: table.kind(),
        normalized: table.normalized(),
        entries,
    };
    let data_path = data_path_for(path);
    fs::write(&data_path, &raw).map_err(|e| Error::io(&data_path, e))?;
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}
