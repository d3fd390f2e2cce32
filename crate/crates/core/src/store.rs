//! On-disk formats and the in-memory data model.
//!
//! EMB1 layout: `"EMB1" | rows: u32 LE | dim: u32 LE | rows*dim f32 LE`, row-major,
//! no padding. Vocabularies are LF-separated UTF-8, one term per line. Prediction
//! files are JSON Lines with `item_id`, `candidates` and `true_labels`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB1_HEADER_LEN: usize = 12;
/// Slack allowed on the sum of a top-k score slice.
pub const SCORE_SUM_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed header at byte {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },
    #[error("truncated data at byte {offset}: expected {expected} bytes, found {found}")]
    TruncatedData {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("{extra} unexpected trailing bytes at byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("non-finite value at byte {offset}")]
    NonFiniteValue { offset: usize },
    #[error("matrix shape {rows}x{dim} does not match {len} values")]
    Shape { rows: usize, dim: usize, len: usize },
    #[error("empty term on line {line}")]
    EmptyTerm { line: usize },
    #[error("invalid UTF-8 at byte {offset}")]
    InvalidUtf8 { offset: usize },
}

impl StoreError {
    fn io(path: &Path, source: io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Dense row-major `f32` matrix. Rows are token or term embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, values: Vec<f32>) -> Result<Self, StoreError> {
        if rows == 0 || dim == 0 || rows.checked_mul(dim) != Some(values.len()) {
            return Err(StoreError::Shape {
                rows,
                dim,
                len: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFiniteValue {
                offset: EMB1_HEADER_LEN + pos * 4,
            });
        }
        Ok(Self { rows, dim, values })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self, StoreError> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(StoreError::Shape {
                    rows: rows.len(),
                    dim,
                    len: values.len() + row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(rows.len(), dim, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.values[index * self.dim..(index + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.values.chunks_exact(self.dim)
    }

    /// Serializes to EMB1 bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(EMB1_HEADER_LEN + self.values.len() * 4);
        out.extend_from_slice(EMB1_MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses EMB1 bytes. Errors carry the byte offset of the problem.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        if bytes.len() < EMB1_HEADER_LEN {
            return Err(StoreError::MalformedHeader {
                offset: bytes.len(),
                reason: format!(
                    "header needs {EMB1_HEADER_LEN} bytes, file has {}",
                    bytes.len()
                ),
            });
        }
        if &bytes[..4] != EMB1_MAGIC {
            return Err(StoreError::MalformedHeader {
                offset: 0,
                reason: "bad magic, expected \"EMB1\"".to_string(),
            });
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if rows == 0 {
            return Err(StoreError::MalformedHeader {
                offset: 4,
                reason: "rows must be at least 1".to_string(),
            });
        }
        if dim == 0 {
            return Err(StoreError::MalformedHeader {
                offset: 8,
                reason: "dim must be at least 1".to_string(),
            });
        }
        let expected = rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| StoreError::MalformedHeader {
                offset: 4,
                reason: format!("{rows}x{dim} overflows"),
            })?;
        let body = &bytes[EMB1_HEADER_LEN..];
        if body.len() < expected {
            return Err(StoreError::TruncatedData {
                offset: EMB1_HEADER_LEN + body.len() / 4 * 4,
                expected,
                found: body.len(),
            });
        }
        if body.len() > expected {
            return Err(StoreError::TrailingBytes {
                offset: EMB1_HEADER_LEN + expected,
                extra: body.len() - expected,
            });
        }
        let mut values = Vec::with_capacity(rows * dim);
        for (i, chunk) in body.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(StoreError::NonFiniteValue {
                    offset: EMB1_HEADER_LEN + i * 4,
                });
            }
            values.push(v);
        }
        Ok(Self { rows, dim, values })
    }
}

pub fn load_embedding_matrix(path: impl AsRef<Path>) -> Result<EmbeddingMatrix, StoreError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    EmbeddingMatrix::from_bytes(&bytes)
}

pub fn save_embedding_matrix(
    matrix: &EmbeddingMatrix,
    path: impl AsRef<Path>,
) -> Result<(), StoreError> {
    let path = path.as_ref();
    fs::write(path, matrix.to_bytes()).map_err(|e| StoreError::io(path, e))
}

/// Ordered list of terms; index `i` lines up with matrix row `i` and label id `i`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<String>,
}

impl Vocabulary {
    pub fn new(terms: Vec<String>) -> Result<Self, StoreError> {
        if let Some(line) = terms.iter().position(|t| t.trim().is_empty()) {
            return Err(StoreError::EmptyTerm { line });
        }
        Ok(Self { terms })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn get(&self, index: usize) -> Option<&str> {
        self.terms.get(index).map(String::as_str)
    }

    /// `(first_index, duplicate_index)` for every repeated term.
    pub fn duplicates(&self) -> Vec<(usize, usize)> {
        let mut first: HashMap<&str, usize> = HashMap::new();
        let mut out = Vec::new();
        for (i, term) in self.terms.iter().enumerate() {
            match first.get(term.as_str()) {
                Some(&j) => out.push((j, i)),
                None => {
                    first.insert(term, i);
                }
            }
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, StoreError> {
        let text = std::str::from_utf8(bytes).map_err(|e| StoreError::InvalidUtf8 {
            offset: e.valid_up_to(),
        })?;
        if text.is_empty() {
            return Ok(Self::default());
        }
        let body = text.strip_suffix('\n').unwrap_or(text);
        let terms: Vec<String> = body.split('\n').map(str::to_string).collect();
        Self::new(terms)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for term in &self.terms {
            out.push_str(term);
            out.push('\n');
        }
        out
    }
}

pub fn load_vocabulary(path: impl AsRef<Path>) -> Result<Vocabulary, StoreError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    let vocab = Vocabulary::parse(&bytes)?;
    for (first, dup) in vocab.duplicates() {
        log::warn!(
            "{}: term {:?} on line {dup} duplicates line {first}",
            path.display(),
            vocab.terms[dup]
        );
    }
    Ok(vocab)
}

pub fn save_vocabulary(vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<(), StoreError> {
    let path = path.as_ref();
    fs::write(path, vocab.to_text()).map_err(|e| StoreError::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub label: usize,
    pub score: f64,
}

/// One item's top-k candidates (descending score) and its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub item_id: String,
    pub candidates: Vec<Candidate>,
    /// Empty means unlabeled under the current label mode.
    pub true_labels: Vec<usize>,
}

impl PredictionSet {
    pub fn top1(&self) -> Option<usize> {
        self.candidates.first().map(|c| c.label)
    }

    pub fn is_true_label(&self, label: usize) -> bool {
        self.true_labels.contains(&label)
    }

    /// Checks the invariants against a vocabulary of `vocab_len` terms.
    pub fn validate(&self, vocab_len: usize) -> Result<(), DatasetError> {
        let id = || self.item_id.clone();
        if self.candidates.is_empty() {
            return Err(DatasetError::EmptyCandidates { item_id: id() });
        }
        let mut seen = HashSet::new();
        for c in &self.candidates {
            if c.label >= vocab_len {
                return Err(DatasetError::BadLabelIndex {
                    item_id: id(),
                    label: c.label,
                    vocab_len,
                });
            }
            if !seen.insert(c.label) {
                return Err(DatasetError::DuplicateCandidate {
                    item_id: id(),
                    label: c.label,
                });
            }
            if !c.score.is_finite() || !(0.0..=1.0).contains(&c.score) {
                return Err(DatasetError::BadScore {
                    item_id: id(),
                    reason: format!("score {} of label {} outside [0, 1]", c.score, c.label),
                });
            }
        }
        for pair in self.candidates.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let ordered = a.score > b.score || (a.score == b.score && a.label < b.label);
            if !ordered {
                return Err(DatasetError::UnsortedCandidates { item_id: id() });
            }
        }
        let sum: f64 = self.candidates.iter().map(|c| c.score).sum();
        if sum > 1.0 + SCORE_SUM_TOLERANCE {
            return Err(DatasetError::BadScore {
                item_id: id(),
                reason: format!("scores sum to {sum}"),
            });
        }
        if let Some(&label) = self.true_labels.iter().find(|&&l| l >= vocab_len) {
            return Err(DatasetError::BadLabelIndex {
                item_id: id(),
                label,
                vocab_len,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// One true label per item.
    #[default]
    Standard,
    /// Multi-label sets; empty sets are excluded from accuracy denominators.
    Real,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("item {item_id}: label {label} out of range for vocabulary of {vocab_len}")]
    BadLabelIndex {
        item_id: String,
        label: usize,
        vocab_len: usize,
    },
    #[error("item {item_id}: candidates not in descending score order")]
    UnsortedCandidates { item_id: String },
    #[error("item {item_id}: {reason}")]
    BadScore { item_id: String, reason: String },
    #[error("item {item_id}: no candidates")]
    EmptyCandidates { item_id: String },
    #[error("item {item_id}: label {label} listed twice among candidates")]
    DuplicateCandidate { item_id: String, label: usize },
    #[error("item {item_id}: {count} true labels in standard label mode")]
    MultipleTrueLabels { item_id: String, count: usize },
    #[error("item {item_id}: duplicate item id")]
    DuplicateItem { item_id: String },
}

impl DatasetError {
    pub fn item_id(&self) -> Option<&str> {
        match self {
            DatasetError::Store(_) | DatasetError::Malformed { .. } => None,
            DatasetError::BadLabelIndex { item_id, .. }
            | DatasetError::UnsortedCandidates { item_id }
            | DatasetError::BadScore { item_id, .. }
            | DatasetError::EmptyCandidates { item_id }
            | DatasetError::DuplicateCandidate { item_id, .. }
            | DatasetError::MultipleTrueLabels { item_id, .. }
            | DatasetError::DuplicateItem { item_id } => Some(item_id),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionRecord {
    item_id: String,
    candidates: Vec<(usize, f64)>,
    true_labels: Vec<usize>,
}

impl From<&PredictionSet> for PredictionRecord {
    fn from(p: &PredictionSet) -> Self {
        Self {
            item_id: p.item_id.clone(),
            candidates: p.candidates.iter().map(|c| (c.label, c.score)).collect(),
            true_labels: p.true_labels.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub items: Vec<PredictionSet>,
    pub label_mode: LabelMode,
}

impl Dataset {
    /// Validates every item and returns the dataset; items keep their order.
    pub fn new(
        vocabulary: Vocabulary,
        items: Vec<PredictionSet>,
        label_mode: LabelMode,
    ) -> Result<Self, DatasetError> {
        let mut ids = HashSet::new();
        for item in &items {
            item.validate(vocabulary.len())?;
            if label_mode == LabelMode::Standard && item.true_labels.len() > 1 {
                return Err(DatasetError::MultipleTrueLabels {
                    item_id: item.item_id.clone(),
                    count: item.true_labels.len(),
                });
            }
            if !ids.insert(item.item_id.as_str()) {
                return Err(DatasetError::DuplicateItem {
                    item_id: item.item_id.clone(),
                });
            }
        }
        Ok(Self {
            vocabulary,
            items,
            label_mode,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn term(&self, label: usize) -> &str {
        &self.vocabulary.terms()[label]
    }
}

pub fn parse_prediction_line(line: &str, line_no: usize) -> Result<PredictionSet, DatasetError> {
    let record: PredictionRecord =
        serde_json::from_str(line).map_err(|e| DatasetError::Malformed {
            line: line_no,
            reason: e.to_string(),
        })?;
    Ok(PredictionSet {
        item_id: record.item_id,
        candidates: record
            .candidates
            .into_iter()
            .map(|(label, score)| Candidate { label, score })
            .collect(),
        true_labels: record.true_labels,
    })
}

pub fn load_dataset(
    pred_path: impl AsRef<Path>,
    vocab: Vocabulary,
    label_mode: LabelMode,
) -> Result<Dataset, DatasetError> {
    let path = pred_path.as_ref();
    let file = fs::File::open(path).map_err(|e| StoreError::io(path, e))?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| StoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(parse_prediction_line(&line, i + 1)?);
    }
    Dataset::new(vocab, items, label_mode)
}

pub fn write_predictions(items: &[PredictionSet], mut out: impl Write) -> io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, &PredictionRecord::from(item))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_predictions(items: &[PredictionSet], path: impl AsRef<Path>) -> Result<(), StoreError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| StoreError::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_predictions(items, &mut out)
        .and_then(|_| out.flush())
        .map_err(|e| StoreError::io(path, e))
}
