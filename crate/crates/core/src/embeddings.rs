//! Precomputed embedding container.
//!
//! Layout: one JSON header line `{"count":N,"dim":d,"views":4,"dtype":"f32le"}`
//! followed by `N` records, each a `u32` little-endian byte length and the UTF-8
//! id, then `(1 image + 1 text + 4 views) × d` little-endian `f32` values.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::encoder::NUM_VIEWS;
use crate::error::{DpodError, Result};
use crate::tensor::{l2_normalize, norm};

const RENORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub image: Vec<f64>,
    pub text: Vec<f64>,
    pub augmentations: [Vec<f64>; NUM_VIEWS],
}

impl EmbeddingRow {
    fn vectors(&self) -> impl Iterator<Item = &Vec<f64>> {
        std::iter::once(&self.image)
            .chain(std::iter::once(&self.text))
            .chain(self.augmentations.iter())
    }

    fn vectors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        std::iter::once(&mut self.image)
            .chain(std::iter::once(&mut self.text))
            .chain(self.augmentations.iter_mut())
    }
}

/// Source of stored, frozen embeddings keyed by sample id.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn lookup(&self, id: &str) -> Result<&EmbeddingRow>;
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    count: usize,
    dim: usize,
    views: usize,
    dtype: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrecomputedEmbeddings {
    dim: usize,
    ids: Vec<String>,
    rows: HashMap<String, EmbeddingRow>,
}

impl EmbeddingProvider for PrecomputedEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn lookup(&self, id: &str) -> Result<&EmbeddingRow> {
        self.rows.get(id).ok_or_else(|| DpodError::UnknownId(id.to_string()))
    }
}

impl PrecomputedEmbeddings {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
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

    /// Inserts a row, re-normalizing any vector whose norm is off by more than 1e-3.
    pub fn insert(&mut self, id: String, mut row: EmbeddingRow) -> Result<()> {
        for v in row.vectors() {
            if v.len() != self.dim {
                return Err(DpodError::DimensionMismatch {
                    expected: self.dim,
                    actual: v.len(),
                    context: "stored embedding",
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(DpodError::Format(format!("non-finite embedding for {id:?}")));
            }
        }
        let mut renormed = false;
        for v in row.vectors_mut() {
            let n = norm(v);
            if n == 0.0 {
                return Err(DpodError::Degenerate(format!("zero embedding for {id:?}")));
            }
            if (n - 1.0).abs() > RENORM_TOLERANCE {
                *v = l2_normalize(v);
                renormed = true;
            }
        }
        if renormed {
            warn!("embedding row {id:?} was not unit-norm; re-normalized");
        }
        if self.rows.insert(id.clone(), row).is_some() {
            return Err(DpodError::DuplicateId { id });
        }
        self.ids.push(id);
        Ok(())
    }

    pub fn write(&self, out: &mut dyn Write) -> Result<()> {
        let io = |e| DpodError::io("<embedding container>", e);
        let header = Header {
            count: self.ids.len(),
            dim: self.dim,
            views: NUM_VIEWS,
            dtype: "f32le".into(),
        };
        serde_json::to_writer(&mut *out, &header)?;
        out.write_all(b"\n").map_err(io)?;
        for id in &self.ids {
            let row = &self.rows[id];
            out.write_all(&(id.len() as u32).to_le_bytes()).map_err(io)?;
            out.write_all(id.as_bytes()).map_err(io)?;
            for v in row.vectors() {
                for x in v {
                    out.write_all(&(*x as f32).to_le_bytes()).map_err(io)?;
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), |w| self.write(w))
    }

    pub fn read(input: &mut dyn BufRead) -> Result<Self> {
        let io = |e| DpodError::io("<embedding container>", e);
        let mut line = String::new();
        input.read_line(&mut line).map_err(io)?;
        let header: Header = serde_json::from_str(line.trim_end())
            .map_err(|e| DpodError::Format(format!("bad container header: {e}")))?;
        if header.views != NUM_VIEWS || header.dtype != "f32le" {
            return Err(DpodError::Format(format!(
                "unsupported container: views={} dtype={}",
                header.views, header.dtype
            )));
        }
        let mut out = Self::new(header.dim);
        let floats = (2 + NUM_VIEWS) * header.dim;
        let mut buf = vec![0u8; floats * 4];
        for r in 0..header.count {
            let mut len = [0u8; 4];
            input
                .read_exact(&mut len)
                .map_err(|_| DpodError::Format(format!("truncated container at record {r}")))?;
            let mut id = vec![0u8; u32::from_le_bytes(len) as usize];
            input
                .read_exact(&mut id)
                .map_err(|_| DpodError::Format(format!("truncated id at record {r}")))?;
            let id = String::from_utf8(id).map_err(|_| DpodError::Format(format!("non-UTF-8 id at record {r}")))?;
            input
                .read_exact(&mut buf)
                .map_err(|_| DpodError::Format(format!("truncated values at record {r} ({id:?})")))?;
            let vals: Vec<f64> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let d = header.dim;
            let part = |i: usize| vals[i * d..(i + 1) * d].to_vec();
            let row = EmbeddingRow {
                image: part(0),
                text: part(1),
                augmentations: [part(2), part(3), part(4), part(5)],
            };
            out.insert(id, row)?;
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest).map_err(io)? != 0 {
            return Err(DpodError::Format("trailing bytes after last record".into()));
        }
        Ok(out)
    }
}

/// Opens an embedding container as a frozen provider.
pub fn load_precomputed(path: impl AsRef<Path>) -> Result<PrecomputedEmbeddings> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DpodError::io(path, e))?;
    PrecomputedEmbeddings::read(&mut BufReader::new(file))
}

#[derive(Deserialize)]
struct ImportRecord {
    id: String,
    #[serde(flatten)]
    row: EmbeddingRow,
}

/// Reads offline embeddings as JSONL
/// (`{"id", "image": [..], "text": [..], "augmentations": [[..] x4]}`).
pub fn import_jsonl(path: impl AsRef<Path>) -> Result<PrecomputedEmbeddings> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DpodError::io(path, e))?;
    let mut out: Option<PrecomputedEmbeddings> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DpodError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImportRecord = serde_json::from_str(&line).map_err(|e| DpodError::MalformedLine {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let store = out.get_or_insert_with(|| PrecomputedEmbeddings::new(rec.row.image.len()));
        store.insert(rec.id, rec.row)?;
    }
    Ok(out.unwrap_or_default())
}
