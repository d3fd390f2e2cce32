//! Training-free vision-to-language connector.
//!
//! Image features are scored against a key matrix (one row per vocabulary term),
//! the activation picks the single best term (softmax then one-hot), and the value
//! matrix emits that term's text embedding. Both matrices are stored one row per
//! term so they share the vocabulary index.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reverse::{dot, norm, row_normalize};
use crate::store::{self, EmbeddingMatrix, StoreError, Vocabulary};

pub const META_FILE: &str = "meta.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const KEY_FILE: &str = "w_key.emb";
pub const VALUE_FILE: &str = "w_value.emb";

#[derive(Debug, Error)]
pub enum ConnectorError {
    #[error("{what} has {actual} rows, expected {expected}")]
    RowCountMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("input feature is all zeros")]
    AllZero,
    #[error("term {term_index} has no exemplars")]
    EmptyExemplarSet { term_index: usize },
    #[error("row {row}: {source}")]
    Row {
        row: usize,
        #[source]
        source: Box<ConnectorError>,
    },
    #[error("bad bundle metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyStrategy {
    /// Text-encoder embeddings of each term (contrastive models).
    TextEncoder,
    /// Final classification layer weights.
    Classifier,
    /// Mean of per-term exemplar image embeddings.
    Exemplar,
}

impl KeyStrategy {
    /// Cosine regime for normalized keys, logit regime for classifier heads.
    pub fn default_normalize_input(self) -> bool {
        !matches!(self, KeyStrategy::Classifier)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            KeyStrategy::TextEncoder => "text_encoder",
            KeyStrategy::Classifier => "classifier",
            KeyStrategy::Exemplar => "exemplar",
        }
    }
}

impl fmt::Display for KeyStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KeyStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text_encoder" => Ok(KeyStrategy::TextEncoder),
            "classifier" => Ok(KeyStrategy::Classifier),
            "exemplar" => Ok(KeyStrategy::Exemplar),
            other => Err(format!(
                "unknown strategy {other:?}, expected text_encoder, classifier or exemplar"
            )),
        }
    }
}

pub fn build_value_matrix(
    vocab: &Vocabulary,
    text_embeddings: EmbeddingMatrix,
) -> Result<EmbeddingMatrix, ConnectorError> {
    if text_embeddings.rows() != vocab.len() {
        return Err(ConnectorError::RowCountMismatch {
            what: "text embedding table",
            expected: vocab.len(),
            actual: text_embeddings.rows(),
        });
    }
    Ok(text_embeddings)
}

pub fn build_key_from_text_encoder(term_embeddings: &EmbeddingMatrix) -> EmbeddingMatrix {
    row_normalize(term_embeddings)
}

/// Classifier heads keep their raw weights so scores stay logits.
pub fn build_key_from_classifier(final_layer: &EmbeddingMatrix) -> EmbeddingMatrix {
    final_layer.clone()
}

/// Row `i` is the L2-normalized mean of term `i`'s exemplar embeddings.
pub fn build_key_from_exemplars<R: AsRef<[f32]>>(
    per_term: &[Vec<R>],
) -> Result<EmbeddingMatrix, ConnectorError> {
    let dim = per_term
        .iter()
        .flat_map(|set| set.first())
        .map(|r| r.as_ref().len())
        .next()
        .unwrap_or(0);
    let mut rows = Vec::with_capacity(per_term.len());
    for (term_index, set) in per_term.iter().enumerate() {
        if set.is_empty() {
            return Err(ConnectorError::EmptyExemplarSet { term_index });
        }
        let mut sum = vec![0f64; dim];
        for ex in set {
            let ex = ex.as_ref();
            if ex.len() != dim {
                return Err(ConnectorError::DimensionMismatch {
                    expected: dim,
                    actual: ex.len(),
                });
            }
            for (acc, &x) in sum.iter_mut().zip(ex) {
                *acc += f64::from(x);
            }
        }
        let n = set.len() as f64;
        rows.push(sum.iter().map(|s| (s / n) as f32).collect::<Vec<f32>>());
    }
    let means = EmbeddingMatrix::from_rows(&rows)?;
    Ok(row_normalize(&means))
}

/// Groups exemplar rows by their term label into one set per term.
pub fn group_exemplars<'a>(
    exemplars: &'a EmbeddingMatrix,
    labels: &[usize],
    n_terms: usize,
) -> Result<Vec<Vec<&'a [f32]>>, ConnectorError> {
    if labels.len() != exemplars.rows() {
        return Err(ConnectorError::RowCountMismatch {
            what: "exemplar label list",
            expected: exemplars.rows(),
            actual: labels.len(),
        });
    }
    let mut sets = vec![Vec::new(); n_terms];
    for (row, &label) in exemplars.iter_rows().zip(labels) {
        let set = sets.get_mut(label).ok_or_else(|| {
            ConnectorError::Meta(format!(
                "exemplar label {label} out of range for {n_terms} terms"
            ))
        })?;
        set.push(row);
    }
    Ok(sets)
}

/// Numerically stable softmax at temperature 1.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConnectorWeights {
    strategy: KeyStrategy,
    normalize_input: bool,
    w_key: EmbeddingMatrix,
    w_value: EmbeddingMatrix,
    vocab: Vocabulary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConnectorOutput {
    pub vocab_index: usize,
    pub term: String,
    pub embedding: Vec<f32>,
    /// Pre-activation score of the selected term.
    pub score: f64,
    /// Softmax probability of the selected term, for diagnostics.
    pub probability: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleMeta {
    strategy: KeyStrategy,
    normalize_input: bool,
    e_x: usize,
    e_l: usize,
    v: usize,
}

impl ConnectorWeights {
    pub fn new(
        strategy: KeyStrategy,
        w_key: EmbeddingMatrix,
        w_value: EmbeddingMatrix,
        vocab: Vocabulary,
    ) -> Result<Self, ConnectorError> {
        for (what, rows) in [("w_key", w_key.rows()), ("w_value", w_value.rows())] {
            if rows != vocab.len() {
                return Err(ConnectorError::RowCountMismatch {
                    what,
                    expected: vocab.len(),
                    actual: rows,
                });
            }
        }
        Ok(Self {
            strategy,
            normalize_input: strategy.default_normalize_input(),
            w_key,
            w_value,
            vocab,
        })
    }

    pub fn with_normalize_input(mut self, normalize: bool) -> Self {
        self.normalize_input = normalize;
        self
    }

    pub fn strategy(&self) -> KeyStrategy {
        self.strategy
    }

    pub fn normalize_input(&self) -> bool {
        self.normalize_input
    }

    pub fn w_key(&self) -> &EmbeddingMatrix {
        &self.w_key
    }

    pub fn w_value(&self) -> &EmbeddingMatrix {
        &self.w_value
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Image feature width.
    pub fn e_x(&self) -> usize {
        self.w_key.dim()
    }

    /// Language-model embedding width.
    pub fn e_l(&self) -> usize {
        self.w_value.dim()
    }

    /// Raw key scores `w_key · x`, with `x` L2-normalized first when asked.
    pub fn scores(&self, x: &[f32], normalize_input: bool) -> Result<Vec<f64>, ConnectorError> {
        if x.len() != self.e_x() {
            return Err(ConnectorError::DimensionMismatch {
                expected: self.e_x(),
                actual: x.len(),
            });
        }
        let n = norm(x);
        if n == 0.0 {
            return Err(ConnectorError::AllZero);
        }
        let scale = if normalize_input { 1.0 / n } else { 1.0 };
        Ok(self
            .w_key
            .iter_rows()
            .map(|row| dot(row, x) * scale)
            .collect())
    }

    pub fn forward(&self, x: &[f32]) -> Result<ConnectorOutput, ConnectorError> {
        connector_forward(x, self, self.normalize_input)
    }

    pub fn forward_rows<'a, I>(&self, xs: I) -> Result<Vec<ConnectorOutput>, ConnectorError>
    where
        I: IntoIterator<Item = &'a [f32]>,
    {
        xs.into_iter()
            .enumerate()
            .map(|(row, x)| {
                self.forward(x).map_err(|e| ConnectorError::Row {
                    row,
                    source: Box::new(e),
                })
            })
            .collect()
    }

    pub fn save_bundle(&self, dir: impl AsRef<Path>) -> Result<(), ConnectorError> {
        let dir = dir.as_ref();
        let io = |e| StoreError::Io {
            path: dir.to_path_buf(),
            source: e,
        };
        fs::create_dir_all(dir).map_err(io)?;
        store::save_vocabulary(&self.vocab, dir.join(VOCAB_FILE))?;
        store::save_embedding_matrix(&self.w_key, dir.join(KEY_FILE))?;
        store::save_embedding_matrix(&self.w_value, dir.join(VALUE_FILE))?;
        let meta = BundleMeta {
            strategy: self.strategy,
            normalize_input: self.normalize_input,
            e_x: self.e_x(),
            e_l: self.e_l(),
            v: self.vocab.len(),
        };
        let mut text = serde_json::to_string_pretty(&meta).expect("meta serializes");
        text.push('\n');
        fs::write(dir.join(META_FILE), text).map_err(io)?;
        Ok(())
    }

    pub fn load_bundle(dir: impl AsRef<Path>) -> Result<Self, ConnectorError> {
        let dir = dir.as_ref();
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| StoreError::Io {
            path: meta_path,
            source: e,
        })?;
        let meta: BundleMeta =
            serde_json::from_str(&text).map_err(|e| ConnectorError::Meta(e.to_string()))?;
        let vocab = store::load_vocabulary(dir.join(VOCAB_FILE))?;
        let w_key = store::load_embedding_matrix(dir.join(KEY_FILE))?;
        let w_value = store::load_embedding_matrix(dir.join(VALUE_FILE))?;
        let weights = Self::new(meta.strategy, w_key, w_value, vocab)?
            .with_normalize_input(meta.normalize_input);
        if (weights.e_x(), weights.e_l(), weights.vocab.len()) != (meta.e_x, meta.e_l, meta.v) {
            return Err(ConnectorError::Meta(format!(
                "meta declares e_x={} e_l={} v={}, files have e_x={} e_l={} v={}",
                meta.e_x,
                meta.e_l,
                meta.v,
                weights.e_x(),
                weights.e_l(),
                weights.vocab.len()
            )));
        }
        Ok(weights)
    }
}

pub fn connector_forward(
    x: &[f32],
    w: &ConnectorWeights,
    normalize_input: bool,
) -> Result<ConnectorOutput, ConnectorError> {
    let scores = w.scores(x, normalize_input)?;
    let probs = softmax(&scores);
    // softmax is monotone, so the one-hot of its argmax is the one-hot of the raw argmax
    let index = argmax(&scores).expect("vocabulary is nonempty");
    Ok(ConnectorOutput {
        vocab_index: index,
        term: w.vocab.terms()[index].clone(),
        embedding: w.w_value.row(index).to_vec(),
        score: scores[index],
        probability: probs[index],
    })
}

pub fn connector_forward_block(
    xs: &EmbeddingMatrix,
    w: &ConnectorWeights,
) -> Result<Vec<ConnectorOutput>, ConnectorError> {
    w.forward_rows(xs.iter_rows())
}
