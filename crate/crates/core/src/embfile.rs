//! Binary embedding storage.
//!
//! A file is one line of JSON header terminated by `\n`, followed by the raw
//! payload: little-endian `f32` values, row-major, `count * dimension` per
//! block. Plain embedding tables have a single block; search indexes store
//! several blocks (base and shared spaces) that share one id list.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EMBEDDINGS_FORMAT: &str = "objfind-embeddings";
pub const INDEX_FORMAT: &str = "objfind-index";

#[derive(Debug, Error)]
pub enum EmbFileError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("header: {0}")]
    Header(String),
    #[error("payload holds {found} floats, header declares {expected}")]
    Truncated { expected: usize, found: usize },
    #[error("row for {id} has {found} components, table dimension is {expected}")]
    Dimension { id: String, expected: usize, found: usize },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("non-finite component in row {0}")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub dimension: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHeader {
    pub format: String,
    pub version: u32,
    pub byte_order: String,
    pub count: usize,
    /// Dimension of the first block.
    pub dimension: usize,
    pub ids: Vec<String>,
    pub blocks: Vec<BlockSpec>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl FileHeader {
    pub fn new(format: &str, ids: Vec<String>, blocks: Vec<BlockSpec>) -> Self {
        Self {
            format: format.to_owned(),
            version: 1,
            byte_order: "little".into(),
            count: ids.len(),
            dimension: blocks.first().map_or(0, |b| b.dimension),
            ids,
            blocks,
            meta: BTreeMap::new(),
        }
    }

    fn floats(&self) -> usize {
        self.blocks.iter().map(|b| b.dimension * self.count).sum()
    }
}

/// Writes a header followed by `blocks` (each `count * dimension` floats).
pub fn write_blocks<W: Write>(mut w: W, header: &FileHeader, blocks: &[&[f32]]) -> Result<(), EmbFileError> {
    assert_eq!(blocks.len(), header.blocks.len(), "block count mismatch");
    serde_json::to_writer(&mut w, header).map_err(|e| EmbFileError::Header(e.to_string()))?;
    w.write_all(b"\n")?;
    for (spec, data) in header.blocks.iter().zip(blocks) {
        assert_eq!(data.len(), spec.dimension * header.count, "block {} size", spec.name);
        let mut buf = Vec::with_capacity(data.len() * 4);
        for v in *data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a header and its blocks, checking `expected_format`.
pub fn read_blocks<R: Read>(r: R, expected_format: &str) -> Result<(FileHeader, Vec<Vec<f32>>), EmbFileError> {
    let mut reader = BufReader::new(r);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    let header: FileHeader =
        serde_json::from_slice(&line).map_err(|e| EmbFileError::Header(e.to_string()))?;
    if header.format != expected_format {
        return Err(EmbFileError::Header(format!(
            "format is {:?}, expected {expected_format:?}",
            header.format
        )));
    }
    if header.byte_order != "little" {
        return Err(EmbFileError::Header(format!("unsupported byte order {}", header.byte_order)));
    }
    if header.ids.len() != header.count {
        return Err(EmbFileError::Header(format!(
            "count {} but {} ids",
            header.count,
            header.ids.len()
        )));
    }
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let expected = header.floats();
    if bytes.len() != expected * 4 {
        return Err(EmbFileError::Truncated {
            expected,
            found: bytes.len() / 4,
        });
    }
    let mut floats = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let blocks = header
        .blocks
        .iter()
        .map(|b| floats.by_ref().take(b.dimension * header.count).collect())
        .collect();
    Ok((header, blocks))
}

/// Dense id-keyed table of fixed-width `f32` vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dimension: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    positions: HashMap<String, usize>,
    pub meta: BTreeMap<String, String>,
}

impl EmbeddingTable {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            ids: Vec::new(),
            data: Vec::new(),
            positions: HashMap::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.positions.get(id).map(|&p| self.row(p))
    }

    pub fn row(&self, pos: usize) -> &[f32] {
        &self.data[pos * self.dimension..(pos + 1) * self.dimension]
    }

    pub fn push(&mut self, id: impl Into<String>, vector: &[f32]) -> Result<(), EmbFileError> {
        let id = id.into();
        if vector.len() != self.dimension {
            return Err(EmbFileError::Dimension {
                id,
                expected: self.dimension,
                found: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(EmbFileError::NonFinite(id));
        }
        if self.positions.contains_key(&id) {
            return Err(EmbFileError::DuplicateId(id));
        }
        self.positions.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<(), EmbFileError> {
        let mut header = FileHeader::new(
            EMBEDDINGS_FORMAT,
            self.ids.clone(),
            vec![BlockSpec {
                name: "vector".into(),
                dimension: self.dimension,
            }],
        );
        header.meta = self.meta.clone();
        write_blocks(w, &header, &[&self.data])
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, EmbFileError> {
        let (header, mut blocks) = read_blocks(r, EMBEDDINGS_FORMAT)?;
        if header.blocks.len() != 1 {
            return Err(EmbFileError::Header("embedding table must have one block".into()));
        }
        let data = blocks.pop().expect("one block");
        let mut table = Self::new(header.dimension);
        table.meta = header.meta;
        for (i, id) in header.ids.into_iter().enumerate() {
            let row = &data[i * table.dimension..(i + 1) * table.dimension];
            table.push(id, row)?;
        }
        Ok(table)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("in-memory write");
        out
    }
}
