//! Immutable store of unit-normalized embeddings with row-aligned
//! demographic annotations, plus exact brute-force cosine search.
//!
//! On disk a store is two files: the `FRG1` matrix file and a JSONL sidecar
//! (`<path>.meta.jsonl`) whose line `i` describes row `i`.
//!
//! ```text
//! "FRG1" | u16 version | u32 dim | u64 count | count*dim f32, row-major
//! ```
//!
//! All integers and floats are little-endian.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demographics::{bucket_age, AgeGroup, Gender, IntersectionalGroup, SkinTone};

pub const STORE_MAGIC: &[u8; 4] = b"FRG1";
pub const STORE_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 8;

/// Allowed deviation of a stored row's L2 norm from 1.
pub const ROW_NORM_TOL: f64 = 1e-5;
/// Allowed deviation of a query's L2 norm from 1.
pub const QUERY_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("zero vector for id {0:?}")]
    ZeroVector(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("store is empty")]
    EmptyStore,
    #[error("query is not unit length (norm {0})")]
    QueryNotNormalized(f64),
    #[error("annotation for unknown id {0:?}")]
    UnknownAnnotationId(String),
    #[error("annotation {0:?} has a partial demographic group")]
    PartialGroup(String),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    VersionMismatch(u16),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: u64, found: u64 },
    #[error("row {row} has norm {norm}, outside unit tolerance")]
    NotNormalized { row: usize, norm: f64 },
    #[error("metadata has {meta} rows but matrix has {rows}")]
    MetaCountMismatch { meta: usize, rows: usize },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Demographic annotation of one stored image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub id: String,
    pub group: Option<IntersectionalGroup>,
    pub age_years: Option<u32>,
}

impl Annotation {
    pub fn unannotated(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            group: None,
            age_years: None,
        }
    }

    pub fn with_group(id: impl Into<String>, group: IntersectionalGroup) -> Self {
        Self {
            id: id.into(),
            group: Some(group),
            age_years: None,
        }
    }
}

/// Sidecar JSONL line. All demographic fields are nullable but must be all
/// present or all absent (the age bucket may come from `age_years`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub id: String,
    #[serde(default)]
    pub age_group: Option<AgeGroup>,
    #[serde(default)]
    pub gender: Option<Gender>,
    #[serde(default)]
    pub skin_tone: Option<SkinTone>,
    #[serde(default)]
    pub age_years: Option<u32>,
}

impl MetaRecord {
    pub fn into_annotation(self) -> Result<Annotation, StoreError> {
        let age = self.age_group.or(self.age_years.map(bucket_age));
        let group = match (age, self.gender, self.skin_tone) {
            (Some(a), Some(g), Some(s)) => Some(IntersectionalGroup::new(a, g, s)),
            (None, None, None) => None,
            _ => return Err(StoreError::PartialGroup(self.id)),
        };
        Ok(Annotation {
            id: self.id,
            group,
            age_years: self.age_years,
        })
    }
}

impl From<&Annotation> for MetaRecord {
    fn from(a: &Annotation) -> Self {
        MetaRecord {
            id: a.id.clone(),
            age_group: a.group.map(|g| g.age),
            gender: a.group.map(|g| g.gender),
            skin_tone: a.group.map(|g| g.skin),
            age_years: a.age_years,
        }
    }
}

/// One retrieved row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(default)]
    pub row: usize,
    pub id: String,
    pub score: f64,
    pub group: Option<IntersectionalGroup>,
}

#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    matrix: Vec<f32>,
    meta: Vec<Annotation>,
    index: HashMap<String, usize>,
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Dot product of two f32 slices accumulated in f64.
///
/// Eight independent partial sums so the loop vectorizes; the summation
/// order is fixed, so the result is the same on every call.
#[inline]
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] as f64 * y[i] as f64;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += *x as f64 * *y as f64;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Descending score, then ascending row.
pub fn rank_order(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

impl EmbeddingStore {
    /// Builds a store from `(id, vector)` pairs, normalizing every row and
    /// joining annotations by id. Rows without an annotation get no group.
    pub fn build<I, S>(embeddings: I, annotations: Vec<Annotation>) -> Result<Self, StoreError>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        let mut dim = None;
        let mut ids = Vec::new();
        let mut matrix = Vec::new();
        for (id, v) in embeddings {
            let id = id.into();
            let d = *dim.get_or_insert(v.len());
            if v.len() != d || d == 0 {
                return Err(StoreError::DimensionMismatch {
                    expected: d,
                    got: v.len(),
                });
            }
            matrix.extend_from_slice(&v);
            ids.push(id);
        }
        Self::from_matrix(ids, dim.unwrap_or(0), matrix, annotations)
    }

    /// Same as [`build`](Self::build) but takes a flat row-major matrix.
    pub fn from_matrix(
        ids: Vec<String>,
        dim: usize,
        mut matrix: Vec<f32>,
        annotations: Vec<Annotation>,
    ) -> Result<Self, StoreError> {
        if dim == 0 && !ids.is_empty() {
            return Err(StoreError::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        if matrix.len() != ids.len() * dim {
            return Err(StoreError::DimensionMismatch {
                expected: ids.len() * dim,
                got: matrix.len(),
            });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), row).is_some() {
                return Err(StoreError::DuplicateId(id.clone()));
            }
        }
        if dim > 0 {
            for (row, chunk) in matrix.chunks_exact_mut(dim).enumerate() {
                let norm = l2_norm(chunk);
                if norm == 0.0 || !norm.is_finite() {
                    return Err(StoreError::ZeroVector(ids[row].clone()));
                }
                for x in chunk.iter_mut() {
                    *x = (*x as f64 / norm) as f32;
                }
            }
        }
        let mut meta: Vec<Annotation> = ids.into_iter().map(Annotation::unannotated).collect();
        let mut seen = HashSet::new();
        for ann in annotations {
            let row = *index
                .get(&ann.id)
                .ok_or_else(|| StoreError::UnknownAnnotationId(ann.id.clone()))?;
            if !seen.insert(row) {
                return Err(StoreError::DuplicateId(ann.id));
            }
            meta[row] = ann;
        }
        Ok(Self {
            dim,
            matrix,
            meta,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.matrix[row * self.dim..(row + 1) * self.dim]
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn annotation(&self, row: usize) -> &Annotation {
        &self.meta[row]
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.meta
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn embedding(&self, id: &str) -> Option<&[f32]> {
        self.row_of(id).map(|r| self.row(r))
    }

    fn candidate(&self, row: usize, score: f64) -> Candidate {
        let ann = &self.meta[row];
        Candidate {
            row,
            id: ann.id.clone(),
            score,
            group: ann.group,
        }
    }

    /// Scores of every row against `query`, in row order.
    pub fn scores(&self, query: &[f32]) -> Vec<f64> {
        const BLOCK: usize = 4096;
        let mut scores = vec![0.0f64; self.len()];
        scores
            .par_chunks_mut(BLOCK)
            .enumerate()
            .for_each(|(b, out)| {
                let base = b * BLOCK;
                for (i, s) in out.iter_mut().enumerate() {
                    *s = dot_f64(self.row(base + i), query);
                }
            });
        scores
    }

    /// The `n` rows most similar to `query` (or every row if `n` exceeds the
    /// store), sorted by descending score with ties on ascending row.
    pub fn top_n(&self, query: &[f32], n: usize) -> Result<Vec<Candidate>, StoreError> {
        if self.is_empty() {
            return Err(StoreError::EmptyStore);
        }
        if query.len() != self.dim {
            return Err(StoreError::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let norm = l2_norm(query);
        if (norm - 1.0).abs() > QUERY_NORM_TOL {
            return Err(StoreError::QueryNotNormalized(norm));
        }
        let scores = self.scores(query);
        let n = n.min(self.len());
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut rows: Vec<usize> = (0..self.len()).collect();
        let cmp = |a: &usize, b: &usize| rank_order((scores[*a], *a), (scores[*b], *b));
        if n < rows.len() {
            rows.select_nth_unstable_by(n - 1, cmp);
            rows.truncate(n);
        }
        rows.sort_unstable_by(cmp);
        Ok(rows
            .into_iter()
            .map(|r| self.candidate(r, scores[r]))
            .collect())
    }

    /// Writes the matrix file at `path` and the sidecar next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let path = path.as_ref();
        write_matrix(path, self.dim, &self.matrix)?;
        let mut w = BufWriter::new(fs::File::create(sidecar_path(path))?);
        for ann in &self.meta {
            serde_json::to_writer(&mut w, &MetaRecord::from(ann)).map_err(io::Error::other)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a store written by [`save`](Self::save). Rows must already be
    /// unit length; they are not renormalized, so save/load is lossless.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let m = read_matrix(path)?;
        let meta = read_meta_jsonl(&sidecar_path(path))?;
        if meta.len() != m.count {
            return Err(StoreError::MetaCountMismatch {
                meta: meta.len(),
                rows: m.count,
            });
        }
        let mut index = HashMap::with_capacity(meta.len());
        for (row, ann) in meta.iter().enumerate() {
            if index.insert(ann.id.clone(), row).is_some() {
                return Err(StoreError::DuplicateId(ann.id.clone()));
            }
        }
        if m.dim > 0 {
            for (row, chunk) in m.data.chunks_exact(m.dim).enumerate() {
                let norm = l2_norm(chunk);
                if (norm - 1.0).abs() > ROW_NORM_TOL {
                    return Err(StoreError::NotNormalized { row, norm });
                }
            }
        }
        Ok(Self {
            dim: m.dim,
            matrix: m.data,
            meta,
            index,
        })
    }
}

/// `index.frg` -> `index.frg.meta.jsonl`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.jsonl");
    PathBuf::from(s)
}

/// Raw contents of an `FRG1` file.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub dim: usize,
    pub count: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1)).take(self.count)
    }
}

pub fn encode_matrix(dim: usize, data: &[f32]) -> Vec<u8> {
    let count = if dim == 0 { 0 } else { data.len() / dim };
    let mut buf = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    buf.extend_from_slice(STORE_MAGIC);
    buf.extend_from_slice(&STORE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix, StoreError> {
    if bytes.len() < 4 {
        return Err(StoreError::TruncatedFile {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != STORE_MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(StoreError::TruncatedFile {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != STORE_VERSION {
        return Err(StoreError::VersionMismatch(version));
    }
    let dim = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[10..18].try_into().unwrap()) as usize;
    let expected = HEADER_LEN as u64 + (dim as u64) * (count as u64) * 4;
    if bytes.len() as u64 != expected {
        return Err(StoreError::TruncatedFile {
            expected,
            found: bytes.len() as u64,
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Matrix { dim, count, data })
}

pub fn write_matrix(path: impl AsRef<Path>, dim: usize, data: &[f32]) -> Result<(), StoreError> {
    fs::write(path, encode_matrix(dim, data))?;
    Ok(())
}

/// Reads any `FRG1` file, including feature files that are not unit-norm.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix, StoreError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_matrix(&bytes)
}

/// Parses a JSONL annotation file; errors carry the 1-based line number.
pub fn read_meta_jsonl(path: &Path) -> Result<Vec<Annotation>, StoreError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| StoreError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let rec: MetaRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(
            rec.into_annotation()
                .map_err(|e| parse_err(e.to_string()))?,
        );
    }
    Ok(out)
}
