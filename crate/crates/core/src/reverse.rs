//! Reverse embedding: map vision-token embeddings to the most cosine-similar rows
//! of a language model's text embedding table, then decode key terms.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{EmbeddingMatrix, Vocabulary};

#[derive(Debug, Error, PartialEq)]
pub enum ReverseError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("vocabulary has {terms} terms but the embedding table has {rows} rows")]
    VocabularyMismatch { rows: usize, terms: usize },
    #[error("no key terms survived filtering")]
    NoKeyTerms,
}

pub(crate) fn norm(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Scales every nonzero row to unit L2 norm; zero rows stay zero.
pub fn row_normalize(m: &EmbeddingMatrix) -> EmbeddingMatrix {
    let mut values = Vec::with_capacity(m.values().len());
    for row in m.iter_rows() {
        let n = norm(row);
        if n == 0.0 {
            values.extend_from_slice(row);
        } else {
            values.extend(row.iter().map(|&x| (f64::from(x) / n) as f32));
        }
    }
    EmbeddingMatrix::new(m.rows(), m.dim(), values).expect("shape preserved")
}

fn check_dim(v: &[f32], table: &EmbeddingMatrix) -> Result<(), ReverseError> {
    if v.len() != table.dim() {
        return Err(ReverseError::DimensionMismatch {
            expected: table.dim(),
            actual: v.len(),
        });
    }
    Ok(())
}

/// Cosine similarity of `v` against every row of `table`. Zero vectors score 0.
pub fn similarity_scores(v: &[f32], table: &EmbeddingMatrix) -> Result<Vec<f64>, ReverseError> {
    check_dim(v, table)?;
    let vn = norm(v);
    Ok(table
        .iter_rows()
        .map(|row| {
            let rn = norm(row);
            if vn == 0.0 || rn == 0.0 {
                0.0
            } else {
                (dot(v, row) / (vn * rn)).clamp(-1.0, 1.0)
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NearestToken {
    pub index: usize,
    pub similarity: f64,
    /// Set when `v` or every table row is zero: the similarity is undefined and
    /// `index` is 0 by convention.
    pub all_zero: bool,
}

/// Text embedding table with precomputed inverse row norms, for repeated lookups.
pub struct TokenTable<'a> {
    table: &'a EmbeddingMatrix,
    inv_norms: Vec<f64>,
}

impl<'a> TokenTable<'a> {
    pub fn new(table: &'a EmbeddingMatrix) -> Self {
        let inv_norms = table
            .iter_rows()
            .map(|row| {
                let n = norm(row);
                if n == 0.0 {
                    0.0
                } else {
                    1.0 / n
                }
            })
            .collect();
        Self { table, inv_norms }
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }

    /// Row with maximal cosine similarity to `v`, lowest index on ties.
    pub fn nearest(&self, v: &[f32]) -> Result<NearestToken, ReverseError> {
        check_dim(v, self.table)?;
        let vn = norm(v);
        let degenerate = NearestToken {
            index: 0,
            similarity: 0.0,
            all_zero: true,
        };
        if vn == 0.0 {
            return Ok(degenerate);
        }
        // The 1/|v| factor is shared by every row, so it is applied only to the winner.
        let mut best: Option<(usize, f64)> = None;
        for (i, (row, &inv)) in self.table.iter_rows().zip(&self.inv_norms).enumerate() {
            if inv == 0.0 {
                continue;
            }
            let s = dot(v, row) * inv;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        Ok(match best {
            Some((index, s)) => NearestToken {
                index,
                similarity: (s / vn).clamp(-1.0, 1.0),
                all_zero: false,
            },
            None => degenerate,
        })
    }
}

pub fn nearest_token(v: &[f32], table: &EmbeddingMatrix) -> Result<NearestToken, ReverseError> {
    TokenTable::new(table).nearest(v)
}

/// One-hot encoding of `index` over `len` slots.
pub fn one_hot(index: usize, len: usize) -> Vec<f32> {
    let mut out = vec![0.0; len];
    out[index] = 1.0;
    out
}

#[derive(Clone, Debug)]
pub struct VisionTokenBlock {
    pub item_id: String,
    pub tokens: EmbeddingMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyTermOptions {
    /// Tokens whose best similarity is below this are dropped. `None` keeps all.
    pub min_similarity: Option<f64>,
    pub drop_non_alphabetic: bool,
    pub dedup: bool,
}

impl Default for KeyTermOptions {
    fn default() -> Self {
        Self {
            min_similarity: None,
            drop_non_alphabetic: true,
            dedup: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyTermReport {
    pub item_id: String,
    pub key_terms: Vec<String>,
    /// `(token_row, vocab_index, similarity)` for every vision token.
    pub per_token: Vec<(usize, usize, f64)>,
}

/// Strips whitespace and subword markers (`▁`, `Ġ`) from a decoded token.
pub fn clean_term(term: &str) -> &str {
    term.trim()
        .trim_start_matches(['\u{2581}', '\u{0120}'])
        .trim()
}

fn is_alphabetic_term(term: &str) -> bool {
    !term.is_empty()
        && term
            .chars()
            .all(|c| c.is_alphabetic() || c == ' ' || c == '-' || c == '\'')
        && term.chars().any(char::is_alphabetic)
}

pub fn extract_key_terms(
    block: &VisionTokenBlock,
    table: &EmbeddingMatrix,
    vocab: &Vocabulary,
    opts: &KeyTermOptions,
) -> Result<KeyTermReport, ReverseError> {
    if vocab.len() != table.rows() {
        return Err(ReverseError::VocabularyMismatch {
            rows: table.rows(),
            terms: vocab.len(),
        });
    }
    if block.tokens.dim() != table.dim() {
        return Err(ReverseError::DimensionMismatch {
            expected: table.dim(),
            actual: block.tokens.dim(),
        });
    }
    let lookup = TokenTable::new(table);
    let rows: Vec<&[f32]> = block.tokens.iter_rows().collect();
    let nearest = rows
        .par_iter()
        .map(|row| lookup.nearest(row))
        .collect::<Result<Vec<_>, _>>()?;

    let mut per_token = Vec::with_capacity(nearest.len());
    let mut key_terms: Vec<String> = Vec::new();
    for (row, hit) in nearest.iter().enumerate() {
        per_token.push((row, hit.index, hit.similarity));
        if hit.all_zero || opts.min_similarity.is_some_and(|min| hit.similarity < min) {
            continue;
        }
        let term = clean_term(&vocab.terms()[hit.index]);
        if term.is_empty() || (opts.drop_non_alphabetic && !is_alphabetic_term(term)) {
            continue;
        }
        if opts.dedup && key_terms.iter().any(|t| t == term) {
            continue;
        }
        key_terms.push(term.to_string());
    }
    Ok(KeyTermReport {
        item_id: block.item_id.clone(),
        key_terms,
        per_token,
    })
}

/// Text prompt that stands in for the image: key terms followed by the question.
pub fn build_replacement_prompt(
    report: &KeyTermReport,
    question: &str,
) -> Result<String, ReverseError> {
    if report.key_terms.is_empty() {
        return Err(ReverseError::NoKeyTerms);
    }
    Ok(format!(
        "The image local features of {}. {}",
        report.key_terms.join(", "),
        question
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f32]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> EmbeddingMatrix {
        let values = (0..rows * dim)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        EmbeddingMatrix::new(rows, dim, values).unwrap()
    }

    #[test]
    fn normalize_rows() {
        let n = row_normalize(&mat(&[&[3., 4.], &[0., 0.]]));
        assert!((n.row(0)[0] - 0.6).abs() < 1e-6 && (n.row(0)[1] - 0.8).abs() < 1e-6);
        assert_eq!(n.row(1), &[0., 0.]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = row_normalize(&random_matrix(&mut rng, 5, 8));
        for row in n.iter_rows() {
            assert!((norm(row) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn similarity_basics() {
        let e = mat(&[
            &[1., 0.],
            &[0., 1.],
            &[
                std::f32::consts::FRAC_1_SQRT_2,
                std::f32::consts::FRAC_1_SQRT_2,
            ],
        ]);
        let s = similarity_scores(&[1., 0.], &e).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-6);
        assert!(s[1].abs() < 1e-6);

        // Brute-force cosines for v = (0.9, 0.1): row0 0.9939, row1 0.1104, row2 0.7809.
        let s = similarity_scores(&[0.9, 0.1], &e).unwrap();
        let expected = [
            0.9 / 0.82f64.sqrt(),
            0.1 / 0.82f64.sqrt(),
            1.0 / (0.82f64.sqrt() * 2f64.sqrt()),
        ];
        for (got, want) in s.iter().zip(expected) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
        assert_eq!(nearest_token(&[0.9, 0.1], &e).unwrap().index, 0);
        assert_eq!(
            similarity_scores(&[1., 0., 0.], &e),
            Err(ReverseError::DimensionMismatch {
                expected: 2,
                actual: 3
            })
        );
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let e = mat(&[
            &[0., 1.],
            &[1., 1.],
            &[1., 0.],
            &[-1., 0.],
            &[0., -1.],
            &[1., 0.],
        ]);
        let hit = nearest_token(&[2., 0.], &e).unwrap();
        assert_eq!(hit.index, 2);
        let onehot = one_hot(hit.index, e.rows());
        assert_eq!(onehot.iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn zero_inputs_are_flagged() {
        let e = mat(&[&[1., 0.], &[0., 1.]]);
        let hit = nearest_token(&[0., 0.], &e).unwrap();
        assert!(hit.all_zero);
        assert_eq!(hit.index, 0);
        let zeros = mat(&[&[0., 0.], &[0., 0.]]);
        assert!(nearest_token(&[1., 0.], &zeros).unwrap().all_zero);
    }

    #[test]
    fn key_terms_dedup_and_filter() {
        let e = mat(&[&[1., 0., 0.], &[0., 1., 0.], &[0., 0., 1.], &[1., 1., 1.]]);
        let vocab =
            Vocabulary::new(["cap", "uniform", "##", "rally"].map(String::from).to_vec()).unwrap();
        let block = VisionTokenBlock {
            item_id: "img".into(),
            tokens: mat(&[&[1., 0.1, 0.], &[2., 0., 0.], &[0.9, 0., 0.05]]),
        };
        let r = extract_key_terms(&block, &e, &vocab, &KeyTermOptions::default()).unwrap();
        assert_eq!(r.key_terms, vec!["cap"]);
        assert_eq!(r.per_token.len(), 3);

        let block = VisionTokenBlock {
            item_id: "img".into(),
            tokens: mat(&[&[0., 1., 0.], &[0., 0., 1.], &[1., 1., 1.]]),
        };
        let r = extract_key_terms(&block, &e, &vocab, &KeyTermOptions::default()).unwrap();
        assert_eq!(r.key_terms, vec!["uniform", "rally"]);
        let keep_all = KeyTermOptions {
            drop_non_alphabetic: false,
            ..Default::default()
        };
        let r = extract_key_terms(&block, &e, &vocab, &keep_all).unwrap();
        assert_eq!(r.key_terms, vec!["uniform", "##", "rally"]);

        let strict = KeyTermOptions {
            min_similarity: Some(0.99),
            ..Default::default()
        };
        let block = VisionTokenBlock {
            item_id: "img".into(),
            tokens: mat(&[&[1., 0.5, 0.], &[0., 1., 0.]]),
        };
        let r = extract_key_terms(&block, &e, &vocab, &strict).unwrap();
        assert_eq!(r.key_terms, vec!["uniform"]);
    }

    #[test]
    fn subword_markers_are_stripped() {
        assert_eq!(clean_term("\u{2581}cap"), "cap");
        assert_eq!(clean_term(" uniform "), "uniform");
        assert!(!is_alphabetic_term("##"));
        assert!(!is_alphabetic_term("2024"));
        assert!(is_alphabetic_term("bathing cap"));
    }

    #[test]
    fn vocabulary_must_match_table() {
        let e = mat(&[&[1., 0.], &[0., 1.]]);
        let vocab = Vocabulary::new(vec!["a".into()]).unwrap();
        let block = VisionTokenBlock {
            item_id: "x".into(),
            tokens: mat(&[&[1., 0.]]),
        };
        assert_eq!(
            extract_key_terms(&block, &e, &vocab, &KeyTermOptions::default()),
            Err(ReverseError::VocabularyMismatch { rows: 2, terms: 1 })
        );
    }

    #[test]
    fn replacement_prompt_format() {
        let report = |terms: &[&str]| KeyTermReport {
            item_id: "x".into(),
            key_terms: terms.iter().map(|s| s.to_string()).collect(),
            per_token: vec![],
        };
        assert_eq!(
            build_replacement_prompt(&report(&["cap", "uniform"]), "What is he wearing?").unwrap(),
            "The image local features of cap, uniform. What is he wearing?"
        );
        assert_eq!(
            build_replacement_prompt(&report(&["dog"]), "").unwrap(),
            "The image local features of dog. "
        );
        assert_eq!(
            build_replacement_prompt(&report(&[]), "q"),
            Err(ReverseError::NoKeyTerms)
        );
    }

    #[test]
    fn replacement_prompt_is_much_shorter_than_vision_tokens() {
        let terms: Vec<String> = (0..50).map(|i| format!("term{i}")).collect();
        let report = KeyTermReport {
            item_id: "x".into(),
            key_terms: terms,
            per_token: vec![],
        };
        let prompt = build_replacement_prompt(&report, "What is shown?").unwrap();
        // Whitespace word count is a generous upper bound on subword tokens here.
        let words = prompt.split_whitespace().count();
        assert!(words * 4 < 576, "{words} words");
    }

    #[test]
    fn large_block_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (rows, dim) = (32_000, 8);
        let table = random_matrix(&mut rng, rows, dim);
        let vocab = Vocabulary::new((0..rows).map(|i| format!("w{i}")).collect()).unwrap();
        let block = VisionTokenBlock {
            item_id: "big".into(),
            tokens: random_matrix(&mut rng, 576, dim),
        };
        let report = extract_key_terms(
            &block,
            &table,
            &vocab,
            &KeyTermOptions {
                drop_non_alphabetic: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(report.per_token.len(), 576);
        assert!(report.key_terms.len() <= 576);
        for (row, v) in block.tokens.iter_rows().enumerate() {
            // independent brute force: full cosine vector, first maximum
            let s = similarity_scores(v, &table).unwrap();
            let mut best = 0;
            for i in 1..s.len() {
                if s[i] > s[best] {
                    best = i;
                }
            }
            assert_eq!(report.per_token[row].1, best, "token {row}");
        }
    }

    proptest! {
        #[test]
        fn argmax_is_scale_invariant(
            v in prop::collection::vec(-10.0f32..10.0, 6),
            c in 0.01f32..100.0,
            seed in 0u64..1000,
        ) {
            prop_assume!(norm(&v) > 1e-3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let table = random_matrix(&mut rng, 40, 6);
            let scaled: Vec<f32> = v.iter().map(|x| x * c).collect();
            prop_assert_eq!(
                nearest_token(&v, &table).unwrap().index,
                nearest_token(&scaled, &table).unwrap().index
            );
        }

        #[test]
        fn rows_map_back_to_themselves(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let table = random_matrix(&mut rng, 30, 16);
            for i in 0..table.rows() {
                prop_assert_eq!(nearest_token(table.row(i), &table).unwrap().index, i);
            }
        }
    }
}
