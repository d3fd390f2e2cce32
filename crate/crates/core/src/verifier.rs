//! Verifiers answer "is this candidate in the picture?" for one candidate at a time.
//!
//! A [`VerifierQuery`] carries only the item id, the candidate category and the
//! rendered prompt. No ground truth ever reaches a verifier through this interface;
//! the stochastic oracle receives its truth table at construction time, standing in
//! for a model that looks at the image.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::store::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Answer {
    Yes,
    No,
    NotSure,
}

impl Answer {
    pub fn canonical_text(self) -> &'static str {
        match self {
            Answer::Yes => "Yes",
            Answer::No => "No",
            Answer::NotSure => "Not Sure",
        }
    }

    pub fn is_yes(self) -> bool {
        self == Answer::Yes
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub answer: Answer,
    pub raw_text: String,
    /// The text contained no recognizable answer and was read as NotSure.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub parse_miss: bool,
}

impl Verdict {
    /// Verdict produced directly by a synthetic verifier.
    pub fn synthetic(answer: Answer) -> Self {
        Self {
            answer,
            raw_text: answer.canonical_text().to_string(),
            parse_miss: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct VerifierQuery {
    pub item_id: String,
    pub category: String,
    pub prompt: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifierError {
    #[error("no scripted verdict for item {item_id:?}, category {category:?}")]
    MissingEntry { item_id: String, category: String },
    #[error("unknown item {0:?}")]
    UnknownItem(String),
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("HTTP status {status} after {attempts} attempt(s)")]
    BadStatus { status: u16, attempts: u32 },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

pub trait Verifier: Send + Sync {
    fn verify(&self, query: &VerifierQuery) -> Result<Verdict, VerifierError>;
}

impl<V: Verifier + ?Sized> Verifier for &V {
    fn verify(&self, query: &VerifierQuery) -> Result<Verdict, VerifierError> {
        (**self).verify(query)
    }
}

impl<V: Verifier + ?Sized> Verifier for Box<V> {
    fn verify(&self, query: &VerifierQuery) -> Result<Verdict, VerifierError> {
        (**self).verify(query)
    }
}

fn first_sentence(text: &str) -> &str {
    let end = text
        .char_indices()
        .find(|&(_, c)| matches!(c, '.' | '!' | '?' | '\n'))
        .map_or(text.len(), |(i, _)| i);
    &text[..end]
}

/// Reads a free-text answer.
///
/// Only the first sentence is scanned, word by word and case-insensitively, with
/// precedence "not sure" > "no" > "yes". Text with none of these parses as
/// NotSure with `parse_miss` set.
pub fn parse_verdict(text: &str) -> Verdict {
    let words: Vec<String> = first_sentence(text)
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    let not_sure = words.windows(2).any(|w| w[0] == "not" && w[1] == "sure");
    let answer = if not_sure {
        Some(Answer::NotSure)
    } else if words.iter().any(|w| w == "no") {
        Some(Answer::No)
    } else if words.iter().any(|w| w == "yes") {
        Some(Answer::Yes)
    } else {
        None
    };
    Verdict {
        answer: answer.unwrap_or(Answer::NotSure),
        raw_text: text.to_string(),
        parse_miss: answer.is_none(),
    }
}

/// Always gives the same answer.
#[derive(Clone, Copy, Debug)]
pub struct ConstantVerifier(pub Answer);

impl Verifier for ConstantVerifier {
    fn verify(&self, _query: &VerifierQuery) -> Result<Verdict, VerifierError> {
        Ok(Verdict::synthetic(self.0))
    }
}

/// One line of a script file; `rank` is informational.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub item_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    pub category: String,
    pub answer: Answer,
    pub raw_text: String,
}

/// Pure lookup keyed by `(item_id, category)`.
#[derive(Clone, Debug, Default)]
pub struct ScriptedVerifier {
    table: HashMap<(String, String), Verdict>,
}

impl ScriptedVerifier {
    pub fn new(table: HashMap<(String, String), Verdict>) -> Self {
        Self { table }
    }

    pub fn from_entries<I: IntoIterator<Item = ScriptEntry>>(entries: I) -> Self {
        let table = entries
            .into_iter()
            .map(|e| {
                let verdict = Verdict {
                    answer: e.answer,
                    raw_text: e.raw_text,
                    parse_miss: false,
                };
                ((e.item_id, e.category), verdict)
            })
            .collect();
        Self { table }
    }

    /// Loads a JSON Lines script of [`ScriptEntry`] records.
    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let file = fs::File::open(path)?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("line {}: {e}", i + 1),
                )
            })?;
            entries.push(entry);
        }
        Ok(Self::from_entries(entries))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Verifier for ScriptedVerifier {
    fn verify(&self, query: &VerifierQuery) -> Result<Verdict, VerifierError> {
        self.table
            .get(&(query.item_id.clone(), query.category.clone()))
            .cloned()
            .ok_or_else(|| VerifierError::MissingEntry {
                item_id: query.item_id.clone(),
                category: query.category.clone(),
            })
    }
}

/// Simulated verifier quality. `not_sure_share` is the fraction of rejections
/// reported as NotSure rather than No; it is a simulation knob, not a measured rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleParams {
    pub recall: f64,
    pub specificity: f64,
    pub not_sure_share: f64,
    pub seed: u64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            recall: 1.0,
            specificity: 1.0,
            not_sure_share: 0.2,
            seed: 0,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("recall", self.recall),
            ("specificity", self.specificity),
            ("not_sure_share", self.not_sure_share),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        Ok(())
    }
}

/// Seeded verifier with configured recall and specificity.
///
/// Each verdict draws from a generator keyed by `(seed, item_id, category)`, so
/// answers do not depend on query order, thread scheduling or repetition.
#[derive(Clone, Debug)]
pub struct StochasticOracle {
    truth: HashMap<String, BTreeSet<String>>,
    params: OracleParams,
}

impl StochasticOracle {
    pub fn new(
        truth: HashMap<String, BTreeSet<String>>,
        params: OracleParams,
    ) -> Result<Self, String> {
        params.validate()?;
        Ok(Self { truth, params })
    }

    /// Truth table from a dataset's labels, as category names.
    pub fn from_dataset(ds: &Dataset, params: OracleParams) -> Result<Self, String> {
        let truth = ds
            .items
            .iter()
            .map(|item| {
                let names = item
                    .true_labels
                    .iter()
                    .map(|&l| ds.term(l).to_string())
                    .collect();
                (item.item_id.clone(), names)
            })
            .collect();
        Self::new(truth, params)
    }

    pub fn params(&self) -> &OracleParams {
        &self.params
    }

    fn rng_for(&self, item_id: &str, category: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(b"visreflect-oracle-v1");
        h.update(self.params.seed.to_le_bytes());
        h.update((item_id.len() as u64).to_le_bytes());
        h.update(item_id.as_bytes());
        h.update((category.len() as u64).to_le_bytes());
        h.update(category.as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

impl Verifier for StochasticOracle {
    fn verify(&self, query: &VerifierQuery) -> Result<Verdict, VerifierError> {
        let truth = self
            .truth
            .get(&query.item_id)
            .ok_or_else(|| VerifierError::UnknownItem(query.item_id.clone()))?;
        let mut rng = self.rng_for(&query.item_id, &query.category);
        let accept_draw: f64 = rng.random();
        let not_sure_draw: f64 = rng.random();
        let accept = if truth.contains(&query.category) {
            accept_draw < self.params.recall
        } else {
            accept_draw >= self.params.specificity
        };
        let answer = if accept {
            Answer::Yes
        } else if not_sure_draw < self.params.not_sure_share {
            Answer::NotSure
        } else {
            Answer::No
        };
        Ok(Verdict::synthetic(answer))
    }
}

#[derive(Debug, Serialize)]
struct RemoteRequest<'a> {
    item_id: &'a str,
    prompt: &'a str,
    image_ref: Option<&'a str>,
}

#[derive(Debug, Deserialize)]
struct RemoteResponse {
    text: String,
}

/// Counting semaphore bounding in-flight requests.
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().unwrap();
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap();
        }
        *active += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RemoteStats {
    pub requests: u64,
    pub retries: u64,
}

/// HTTP client for a verifier service.
///
/// POSTs `{"item_id", "prompt", "image_ref"}` and expects `{"text"}`. Transport
/// failures (timeouts, connection errors, 5xx) are retried up to `retries` extra
/// attempts; an answer that parses oddly is returned as data, never retried.
pub struct RemoteVerifier {
    client: reqwest::blocking::Client,
    endpoint: String,
    retries: u32,
    image_refs: HashMap<String, String>,
    in_flight: InFlight,
    requests: AtomicU64,
    retried: AtomicU64,
}

impl RemoteVerifier {
    pub fn new(
        endpoint: impl Into<String>,
        timeout: Duration,
        retries: u32,
        max_in_flight: usize,
    ) -> Result<Self, VerifierError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| VerifierError::Transport {
                message: e.to_string(),
                attempts: 0,
            })?;
        Ok(Self {
            client,
            endpoint: endpoint.into(),
            retries,
            image_refs: HashMap::new(),
            in_flight: InFlight {
                limit: max_in_flight.max(1),
                active: Mutex::new(0),
                freed: Condvar::new(),
            },
            requests: AtomicU64::new(0),
            retried: AtomicU64::new(0),
        })
    }

    /// Opaque per-item references passed through to the service.
    pub fn with_image_refs(mut self, refs: HashMap<String, String>) -> Self {
        self.image_refs = refs;
        self
    }

    pub fn stats(&self) -> RemoteStats {
        RemoteStats {
            requests: self.requests.load(Ordering::Relaxed),
            retries: self.retried.load(Ordering::Relaxed),
        }
    }

    fn attempt(
        &self,
        body: &RemoteRequest<'_>,
        attempts: u32,
    ) -> Result<Verdict, (VerifierError, bool)> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let response = self
            .client
            .post(&self.endpoint)
            .json(body)
            .send()
            .map_err(|e| {
                let err = if e.is_timeout() {
                    VerifierError::Timeout { attempts }
                } else {
                    VerifierError::Transport {
                        message: e.to_string(),
                        attempts,
                    }
                };
                (err, true)
            })?;
        let status = response.status();
        if !status.is_success() {
            let err = VerifierError::BadStatus {
                status: status.as_u16(),
                attempts,
            };
            return Err((err, status.is_server_error()));
        }
        let bytes = response.bytes().map_err(|e| {
            let err = if e.is_timeout() {
                VerifierError::Timeout { attempts }
            } else {
                VerifierError::Transport {
                    message: e.to_string(),
                    attempts,
                }
            };
            (err, true)
        })?;
        let parsed: RemoteResponse = serde_json::from_slice(&bytes)
            .map_err(|e| (VerifierError::MalformedResponse(e.to_string()), false))?;
        Ok(parse_verdict(&parsed.text))
    }
}

impl Verifier for RemoteVerifier {
    fn verify(&self, query: &VerifierQuery) -> Result<Verdict, VerifierError> {
        let _slot = self.in_flight.acquire();
        let body = RemoteRequest {
            item_id: &query.item_id,
            prompt: &query.prompt,
            image_ref: self.image_refs.get(&query.item_id).map(String::as_str),
        };
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body, attempts) {
                Ok(verdict) => return Ok(verdict),
                Err((err, retryable)) => {
                    if !retryable || attempts > self.retries {
                        return Err(err);
                    }
                    self.retried.fetch_add(1, Ordering::Relaxed);
                    log::debug!("retrying {} after: {err}", query.item_id);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn query(item: &str, category: &str) -> VerifierQuery {
        VerifierQuery {
            item_id: item.into(),
            category: category.into(),
            prompt: format!("Does the picture have a {category}?"),
        }
    }

    #[test]
    fn parse_basic_answers() {
        assert_eq!(
            parse_verdict("Yes, the picture shows a goldfinch.").answer,
            Answer::Yes
        );
        assert_eq!(
            parse_verdict("No. The cap is part of a uniform.").answer,
            Answer::No
        );
        let v = parse_verdict("I'm not sure, the image is blurry");
        assert_eq!(v.answer, Answer::NotSure);
        assert!(!v.parse_miss);
        assert_eq!(v.raw_text, "I'm not sure, the image is blurry");
    }

    #[test]
    fn parse_precedence_and_scope() {
        // "no" beats "yes" within the first sentence
        assert_eq!(parse_verdict("Yes or no? hard to say").answer, Answer::No);
        assert_eq!(parse_verdict("NOT   SURE yes no").answer, Answer::NotSure);
        // later sentences cannot flip the verdict
        assert_eq!(
            parse_verdict("Yes. No other birds are visible.").answer,
            Answer::Yes
        );
        // substrings do not count as words
        let v = parse_verdict("Nothing like that, I know it");
        assert_eq!(v.answer, Answer::NotSure);
        assert!(v.parse_miss);
        assert_eq!(parse_verdict("Not a chance, no.").answer, Answer::No);
        assert!(parse_verdict("").parse_miss);
        assert_eq!(parse_verdict("yes!").answer, Answer::Yes);
    }

    #[test]
    fn scripted_lookup() {
        let v = ScriptedVerifier::from_entries([ScriptEntry {
            item_id: "i1".into(),
            rank: None,
            category: "cat".into(),
            answer: Answer::Yes,
            raw_text: "Yes".into(),
        }]);
        assert_eq!(v.verify(&query("i1", "cat")).unwrap().answer, Answer::Yes);
        assert_eq!(
            v.verify(&query("i1", "dog")),
            Err(VerifierError::MissingEntry {
                item_id: "i1".into(),
                category: "dog".into()
            })
        );
    }

    #[test]
    fn perfect_oracle() {
        let truth = HashMap::from([("a".to_string(), BTreeSet::from(["cat".to_string()]))]);
        let o = StochasticOracle::new(truth, OracleParams::default()).unwrap();
        assert_eq!(o.verify(&query("a", "cat")).unwrap().answer, Answer::Yes);
        for _ in 0..3 {
            assert_ne!(o.verify(&query("a", "dog")).unwrap().answer, Answer::Yes);
        }
        assert_eq!(
            o.verify(&query("zzz", "cat")),
            Err(VerifierError::UnknownItem("zzz".into()))
        );
    }

    #[test]
    fn oracle_is_keyed_not_ordered() {
        let truth: HashMap<_, _> = (0..200)
            .map(|i| (format!("i{i}"), BTreeSet::from([format!("c{}", i % 7)])))
            .collect();
        let params = OracleParams {
            recall: 0.7,
            specificity: 0.6,
            not_sure_share: 0.3,
            seed: 17,
        };
        let o = StochasticOracle::new(truth, params).unwrap();
        let queries: Vec<_> = (0..200)
            .flat_map(|i| (0..7).map(move |c| query(&format!("i{i}"), &format!("c{c}"))))
            .collect();
        let forward: Vec<_> = queries.iter().map(|q| o.verify(q).unwrap()).collect();
        let mut backward: Vec<_> = queries.iter().rev().map(|q| o.verify(q).unwrap()).collect();
        backward.reverse();
        assert_eq!(forward, backward);
        assert!(forward.iter().any(|v| v.answer == Answer::NotSure));
    }

    #[test]
    fn oracle_params_validated() {
        let bad = OracleParams {
            recall: 1.2,
            ..Default::default()
        };
        assert!(StochasticOracle::new(HashMap::new(), bad).is_err());
    }
}
