//! Uncertainty-gated sequential verification of top-k candidates.
//!
//! Items whose top-1 softmax score is below the policy threshold are checked one
//! candidate at a time, rank 1 first. The first candidate the verifier accepts
//! becomes the final label. If every checked candidate is rejected the item falls
//! back to its top-1 label and is marked exhausted.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation;
use crate::store::{Dataset, PredictionSet, Vocabulary};
use crate::verifier::{Answer, ScriptEntry, Verdict, Verifier, VerifierError, VerifierQuery};

pub const DEFAULT_PATTERN: &str = "Does the picture have {article} {category}?";
pub const DEFAULT_MAX_RANK: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum ReflectionError {
    #[error("prediction set has no candidates")]
    EmptyCandidates,
    #[error("empty category name")]
    EmptyCategory,
    #[error("invalid template: {0}")]
    Template(String),
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("thresholds must be sorted ascending")]
    UnsortedThresholds,
    #[error(transparent)]
    Evaluation(#[from] evaluation::EvalError),
}

/// Prompt pattern with `{category}` (exactly once) and optionally `{article}`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplate {
    pattern: String,
    article_overrides: HashMap<String, String>,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::new(DEFAULT_PATTERN).expect("default pattern is valid")
    }
}

impl PromptTemplate {
    pub fn new(pattern: impl Into<String>) -> Result<Self, ReflectionError> {
        let pattern = pattern.into();
        let slots = pattern.matches("{category}").count();
        if slots != 1 {
            return Err(ReflectionError::Template(format!(
                "pattern must contain {{category}} exactly once, found {slots}"
            )));
        }
        Ok(Self {
            pattern,
            article_overrides: HashMap::new(),
        })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    /// Per-category article overrides, e.g. `"hour" -> "an"`.
    pub fn with_article_overrides(mut self, overrides: HashMap<String, String>) -> Self {
        self.article_overrides = overrides;
        self
    }

    /// Parses an override file: one `category<TAB>article` pair per line.
    pub fn parse_article_overrides(text: &str) -> Result<HashMap<String, String>, ReflectionError> {
        let mut out = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (category, article) = line.split_once('\t').ok_or_else(|| {
                ReflectionError::Template(format!(
                    "override line {}: expected category<TAB>article",
                    i + 1
                ))
            })?;
            out.insert(category.to_string(), article.trim().to_string());
        }
        Ok(out)
    }

    pub fn article_for<'a>(&'a self, category: &str) -> &'a str {
        if let Some(article) = self.article_overrides.get(category) {
            return article;
        }
        match category.chars().next().map(|c| c.to_ascii_lowercase()) {
            Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
            _ => "a",
        }
    }

    pub fn render(&self, category: &str, repetition: usize) -> Result<String, ReflectionError> {
        if category.trim().is_empty() {
            return Err(ReflectionError::EmptyCategory);
        }
        let mention = vec![category; repetition.max(1)].join(", ");
        Ok(self
            .pattern
            .replace("{article}", self.article_for(category))
            .replace("{category}", &mention))
    }
}

/// Fallback when every examined candidate is rejected.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fallback {
    #[default]
    Top1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReflectionPolicy {
    pub threshold: f64,
    pub max_rank: usize,
    pub template: PromptTemplate,
    pub fallback: Fallback,
    /// How many times the category is repeated in the prompt.
    pub repetition: usize,
}

impl Default for ReflectionPolicy {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            max_rank: DEFAULT_MAX_RANK,
            template: PromptTemplate::default(),
            fallback: Fallback::Top1,
            repetition: 1,
        }
    }
}

impl ReflectionPolicy {
    pub fn with_threshold(threshold: f64) -> Self {
        Self {
            threshold,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ReflectionError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ReflectionError::Policy(format!(
                "threshold must be in [0, 1], got {}",
                self.threshold
            )));
        }
        if self.max_rank == 0 {
            return Err(ReflectionError::Policy(
                "max_rank must be at least 1".into(),
            ));
        }
        if self.repetition == 0 {
            return Err(ReflectionError::Policy(
                "repetition must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReflectionStep {
    pub rank: usize,
    pub category: String,
    pub prompt: String,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReflectionTrace {
    pub item_id: String,
    pub gated: bool,
    pub confidence: f64,
    pub steps: Vec<ReflectionStep>,
    pub final_label_index: usize,
    pub exhausted: bool,
    /// Set when the verifier failed; the final label is then the top-1 label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ReflectionTrace {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

/// Maximum softmax probability, i.e. the rank-1 score.
pub fn confidence_score(p: &PredictionSet) -> Result<f64, ReflectionError> {
    p.candidates
        .first()
        .map(|c| c.score)
        .ok_or(ReflectionError::EmptyCandidates)
}

/// Strictly below the threshold.
pub fn should_reflect(confidence: f64, policy: &ReflectionPolicy) -> bool {
    confidence < policy.threshold
}

pub fn render_prompt(category: &str, policy: &ReflectionPolicy) -> Result<String, ReflectionError> {
    policy.template.render(category, policy.repetition)
}

fn run_loop<F>(
    p: &PredictionSet,
    policy: &ReflectionPolicy,
    vocab: &Vocabulary,
    mut ask: F,
) -> Result<ReflectionTrace, ReflectionError>
where
    F: FnMut(usize, &VerifierQuery) -> Result<Verdict, VerifierError>,
{
    let confidence = confidence_score(p)?;
    let top1 = p.candidates[0].label;
    let mut trace = ReflectionTrace {
        item_id: p.item_id.clone(),
        gated: should_reflect(confidence, policy),
        confidence,
        steps: Vec::new(),
        final_label_index: top1,
        exhausted: false,
        failure: None,
    };
    if !trace.gated {
        return Ok(trace);
    }
    for (i, candidate) in p.candidates.iter().take(policy.max_rank).enumerate() {
        let rank = i + 1;
        let category = vocab.terms()[candidate.label].clone();
        let prompt = render_prompt(&category, policy)?;
        let query = VerifierQuery {
            item_id: p.item_id.clone(),
            category,
            prompt,
        };
        let verdict = match ask(rank, &query) {
            Ok(v) => v,
            Err(e) => {
                trace.failure = Some(format!("verifier failed at rank {rank}: {e}"));
                return Ok(trace);
            }
        };
        let accepted = verdict.answer.is_yes();
        trace.steps.push(ReflectionStep {
            rank,
            category: query.category,
            prompt: query.prompt,
            verdict,
        });
        if accepted {
            trace.final_label_index = candidate.label;
            return Ok(trace);
        }
    }
    trace.exhausted = true;
    match policy.fallback {
        Fallback::Top1 => trace.final_label_index = top1,
    }
    Ok(trace)
}

/// Runs the gated verification loop for one item.
///
/// A verifier error ends the item early with `failure` set and the top-1 label.
pub fn verify_candidates(
    p: &PredictionSet,
    verifier: &dyn Verifier,
    policy: &ReflectionPolicy,
    vocab: &Vocabulary,
) -> Result<ReflectionTrace, ReflectionError> {
    run_loop(p, policy, vocab, |_, q| verifier.verify(q))
}

/// Verdicts keyed by `(item_id, rank)`, so repeated runs over the same dataset
/// query the verifier at most once per candidate.
#[derive(Debug, Default)]
pub struct VerdictCache {
    entries: Mutex<HashMap<(String, usize), (String, Verdict)>>,
    calls: AtomicU64,
}

impl VerdictCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Verifier calls made through this cache (misses).
    pub fn verifier_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get_or_query(
        &self,
        rank: usize,
        query: &VerifierQuery,
        verifier: &dyn Verifier,
    ) -> Result<Verdict, VerifierError> {
        let key = (query.item_id.clone(), rank);
        if let Some((category, verdict)) = self.entries.lock().unwrap().get(&key) {
            if *category == query.category {
                return Ok(verdict.clone());
            }
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let verdict = verifier.verify(query)?;
        self.entries
            .lock()
            .unwrap()
            .insert(key, (query.category.clone(), verdict.clone()));
        Ok(verdict)
    }

    /// Entries sorted by `(item_id, rank)`.
    pub fn entries(&self) -> Vec<ScriptEntry> {
        let entries = self.entries.lock().unwrap();
        let sorted: BTreeMap<_, _> = entries.iter().collect();
        sorted
            .into_iter()
            .map(|((item_id, rank), (category, verdict))| ScriptEntry {
                item_id: item_id.clone(),
                rank: Some(*rank),
                category: category.clone(),
                answer: verdict.answer,
                raw_text: verdict.raw_text.clone(),
            })
            .collect()
    }

    /// Writes the cache as a JSON Lines script, replayable by `ScriptedVerifier`.
    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for entry in self.entries() {
            serde_json::to_writer(&mut out, &entry)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn load(path: impl AsRef<Path>) -> io::Result<Self> {
        let cache = Self::new();
        let file = fs::File::open(path)?;
        {
            let mut entries = cache.entries.lock().unwrap();
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let e: ScriptEntry = serde_json::from_str(&line).map_err(|err| {
                    io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {err}", i + 1))
                })?;
                let rank = e.rank.ok_or_else(|| {
                    io::Error::new(
                        io::ErrorKind::InvalidData,
                        format!("line {}: missing rank", i + 1),
                    )
                })?;
                let verdict = Verdict {
                    answer: e.answer,
                    raw_text: e.raw_text,
                    parse_miss: false,
                };
                entries.insert((e.item_id, rank), (e.category, verdict));
            }
        }
        Ok(cache)
    }
}

/// Processes items with at most `concurrency` in flight; output sorted by item id.
fn run_items<F>(
    ds: &Dataset,
    concurrency: usize,
    per_item: F,
) -> Result<Vec<ReflectionTrace>, ReflectionError>
where
    F: Fn(&PredictionSet) -> Result<ReflectionTrace, ReflectionError> + Sync,
{
    let mut traces = if concurrency <= 1 {
        ds.items
            .iter()
            .map(&per_item)
            .collect::<Result<Vec<_>, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(concurrency)
            .build()
            .map_err(|e| ReflectionError::Policy(format!("thread pool: {e}")))?;
        pool.install(|| {
            ds.items
                .par_iter()
                .map(&per_item)
                .collect::<Result<Vec<_>, _>>()
        })?
    };
    traces.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    Ok(traces)
}

/// One trace per item, sorted by item id. Verifier failures are recorded in the
/// affected traces and never abort the batch.
pub fn run_pipeline(
    ds: &Dataset,
    verifier: &dyn Verifier,
    policy: &ReflectionPolicy,
    concurrency: usize,
) -> Result<Vec<ReflectionTrace>, ReflectionError> {
    policy.validate()?;
    run_items(ds, concurrency, |p| {
        verify_candidates(p, verifier, policy, &ds.vocabulary)
    })
}

/// As [`run_pipeline`], answering from `cache` where possible.
pub fn run_pipeline_cached(
    ds: &Dataset,
    verifier: &dyn Verifier,
    policy: &ReflectionPolicy,
    cache: &VerdictCache,
    concurrency: usize,
) -> Result<Vec<ReflectionTrace>, ReflectionError> {
    policy.validate()?;
    run_items(ds, concurrency, |p| {
        run_loop(p, policy, &ds.vocabulary, |rank, q| {
            cache.get_or_query(rank, q, verifier)
        })
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub threshold: f64,
    /// `None` when no item has a usable label.
    pub accuracy: Option<f64>,
    pub fraction_reflected: f64,
    /// Verifier consultations the gate made at this threshold, cached or not.
    pub queries_issued: usize,
}

pub fn sweep_thresholds(
    ds: &Dataset,
    verifier: &dyn Verifier,
    base: &ReflectionPolicy,
    thresholds: &[f64],
    cache: &VerdictCache,
    concurrency: usize,
) -> Result<Vec<SweepRow>, ReflectionError> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(ReflectionError::UnsortedThresholds);
    }
    let mut rows = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let policy = ReflectionPolicy {
            threshold,
            ..base.clone()
        };
        let traces = run_pipeline_cached(ds, verifier, &policy, cache, concurrency)?;
        let gated = traces.iter().filter(|t| t.gated).count();
        rows.push(SweepRow {
            threshold,
            accuracy: evaluation::top1_accuracy(&traces, ds)?,
            fraction_reflected: if traces.is_empty() {
                0.0
            } else {
                gated as f64 / traces.len() as f64
            },
            queries_issued: traces.iter().map(|t| t.steps.len()).sum(),
        });
    }
    Ok(rows)
}

pub const SWEEP_HEADER: &str = "threshold,accuracy,fraction_reflected,queries_issued";

pub fn write_sweep_csv(rows: &[SweepRow], mut out: impl Write) -> io::Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for row in rows {
        writeln!(
            out,
            "{},{},{},{}",
            row.threshold,
            evaluation::fixed4_or_na(row.accuracy),
            evaluation::fixed4(row.fraction_reflected),
            row.queries_issued
        )?;
    }
    Ok(())
}

pub fn write_traces(traces: &[ReflectionTrace], mut out: impl Write) -> io::Result<()> {
    for t in traces {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_traces(traces: &[ReflectionTrace], path: impl AsRef<Path>) -> io::Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_traces(traces, &mut out)?;
    out.flush()
}

pub fn load_traces(path: impl AsRef<Path>) -> io::Result<Vec<ReflectionTrace>> {
    let file = fs::File::open(path)?;
    let mut traces = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        traces.push(serde_json::from_str(&line).map_err(|e| {
            io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?);
    }
    Ok(traces)
}

/// Script entries for every recorded verdict, for record/replay.
pub fn script_from_traces(traces: &[ReflectionTrace]) -> Vec<ScriptEntry> {
    traces
        .iter()
        .flat_map(|t| {
            t.steps.iter().map(move |s| ScriptEntry {
                item_id: t.item_id.clone(),
                rank: Some(s.rank),
                category: s.category.clone(),
                answer: s.verdict.answer,
                raw_text: s.verdict.raw_text.clone(),
            })
        })
        .collect()
}

/// Count of verdicts equal to `answer` across all steps.
pub fn count_answers(traces: &[ReflectionTrace], answer: Answer) -> usize {
    traces
        .iter()
        .flat_map(|t| &t.steps)
        .filter(|s| s.verdict.answer == answer)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{Candidate, LabelMode};
    use crate::verifier::{ConstantVerifier, ScriptedVerifier};

    fn vocab() -> Vocabulary {
        Vocabulary::new(
            [
                "goldfinch",
                "umbrella",
                "bathing cap",
                "tabby cat",
                "orange",
                "hour glass",
                "ox",
            ]
            .map(String::from)
            .to_vec(),
        )
        .unwrap()
    }

    fn item(id: &str, labels: &[usize], top: f64, truth: &[usize]) -> PredictionSet {
        let candidates = labels
            .iter()
            .enumerate()
            .map(|(i, &label)| Candidate {
                label,
                score: top / (i + 1) as f64 / 2f64.powi(i as i32),
            })
            .collect();
        PredictionSet {
            item_id: id.into(),
            candidates,
            true_labels: truth.to_vec(),
        }
    }

    /// Answers from a per-rank list, ignoring everything else.
    struct RankScript(Vec<Answer>);

    impl Verifier for RankScript {
        fn verify(&self, q: &VerifierQuery) -> Result<Verdict, VerifierError> {
            let v = vocab();
            let rank_of = [2usize, 1, 0, 3, 4];
            let label = v.terms().iter().position(|t| *t == q.category).unwrap();
            let rank = rank_of.iter().position(|&l| l == label).unwrap();
            Ok(Verdict::synthetic(self.0[rank]))
        }
    }

    #[test]
    fn confidence_is_top_score() {
        let p = PredictionSet {
            item_id: "x".into(),
            candidates: vec![
                Candidate {
                    label: 0,
                    score: 0.9,
                },
                Candidate {
                    label: 1,
                    score: 0.05,
                },
            ],
            true_labels: vec![],
        };
        assert_eq!(confidence_score(&p).unwrap(), 0.9);
        let tie = PredictionSet {
            candidates: vec![
                Candidate {
                    label: 0,
                    score: 0.2,
                },
                Candidate {
                    label: 1,
                    score: 0.2,
                },
            ],
            ..p.clone()
        };
        assert_eq!(confidence_score(&tie).unwrap(), 0.2);
        let uniform = PredictionSet {
            candidates: (0..5)
                .map(|l| Candidate {
                    label: l,
                    score: 0.001,
                })
                .collect(),
            ..p.clone()
        };
        assert_eq!(confidence_score(&uniform).unwrap(), 0.001);
        let empty = PredictionSet {
            candidates: vec![],
            ..p
        };
        assert_eq!(
            confidence_score(&empty),
            Err(ReflectionError::EmptyCandidates)
        );
    }

    #[test]
    fn gate_is_strict() {
        let at = |t| ReflectionPolicy::with_threshold(t);
        assert!(should_reflect(0.4, &at(0.5)));
        assert!(!should_reflect(0.5, &at(0.5)));
        assert!(should_reflect(0.999, &at(1.0)));
        assert!(!should_reflect(1.0, &at(1.0)));
        assert!(!should_reflect(0.0, &at(0.0)));
    }

    #[test]
    fn prompts() {
        let p = ReflectionPolicy::default();
        assert_eq!(
            render_prompt("bathing cap", &p).unwrap(),
            "Does the picture have a bathing cap?"
        );
        assert_eq!(
            render_prompt("umbrella", &p).unwrap(),
            "Does the picture have an umbrella?"
        );
        assert_eq!(
            render_prompt("Orange", &p).unwrap(),
            "Does the picture have an Orange?"
        );
        let rep = ReflectionPolicy {
            repetition: 3,
            ..ReflectionPolicy::default()
        };
        assert_eq!(
            render_prompt("tabby cat", &rep).unwrap(),
            "Does the picture have a tabby cat, tabby cat, tabby cat?"
        );
        assert_eq!(render_prompt(" ", &p), Err(ReflectionError::EmptyCategory));
    }

    #[test]
    fn article_overrides_and_custom_patterns() {
        let overrides =
            PromptTemplate::parse_article_overrides("hour glass\tan\nunicycle\ta\n").unwrap();
        let template = PromptTemplate::default().with_article_overrides(overrides);
        assert_eq!(
            template.render("hour glass", 1).unwrap(),
            "Does the picture have an hour glass?"
        );
        assert_eq!(
            template.render("unicycle", 1).unwrap(),
            "Does the picture have a unicycle?"
        );

        let simple = PromptTemplate::new("Is this a {category}?").unwrap();
        assert_eq!(simple.render("ox", 2).unwrap(), "Is this a ox, ox?");
        assert!(PromptTemplate::new("no slot").is_err());
        assert!(PromptTemplate::new("{category} {category}").is_err());
        assert!(PromptTemplate::parse_article_overrides("missing tab").is_err());
    }

    #[test]
    fn policy_validation() {
        assert!(ReflectionPolicy::with_threshold(1.5).validate().is_err());
        assert!(ReflectionPolicy::with_threshold(-0.1).validate().is_err());
        let zero_rank = ReflectionPolicy {
            max_rank: 0,
            ..Default::default()
        };
        assert!(zero_rank.validate().is_err());
    }

    #[test]
    fn loop_outcomes() {
        let v = vocab();
        let p = item("a", &[2, 1, 0, 3, 4], 0.3, &[0]);
        let policy = ReflectionPolicy::default();
        use Answer::*;

        let t = verify_candidates(&p, &RankScript(vec![Yes; 5]), &policy, &v).unwrap();
        assert_eq!(
            (t.steps.len(), t.final_label_index, t.exhausted),
            (1, 2, false)
        );

        let t = verify_candidates(&p, &RankScript(vec![No, No, Yes, No, No]), &policy, &v).unwrap();
        assert_eq!(
            (t.steps.len(), t.final_label_index, t.exhausted),
            (3, 0, false)
        );
        assert_eq!(t.steps[2].prompt, "Does the picture have a goldfinch?");
        assert_eq!(
            t.steps.iter().map(|s| s.rank).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );

        let t =
            verify_candidates(&p, &RankScript(vec![No, No, No, NotSure, No]), &policy, &v).unwrap();
        assert_eq!(
            (t.steps.len(), t.final_label_index, t.exhausted),
            (5, 2, true)
        );
        assert_eq!(t.steps[3].verdict.answer, NotSure);

        let capped = ReflectionPolicy {
            max_rank: 2,
            ..Default::default()
        };
        let t = verify_candidates(&p, &RankScript(vec![No, No, Yes, No, No]), &capped, &v).unwrap();
        assert_eq!(
            (t.steps.len(), t.final_label_index, t.exhausted),
            (2, 2, true)
        );

        let confident = item("b", &[2, 1], 0.9, &[2]);
        let t = verify_candidates(&confident, &RankScript(vec![No; 5]), &policy, &v).unwrap();
        assert!(!t.gated && t.steps.is_empty());
        assert_eq!(t.final_label_index, 2);
    }

    #[test]
    fn verifier_failure_marks_trace() {
        let v = vocab();
        let p = item("a", &[2, 1, 0], 0.3, &[0]);
        let empty = ScriptedVerifier::default();
        let t = verify_candidates(&p, &empty, &ReflectionPolicy::default(), &v).unwrap();
        assert!(t.failed());
        assert!(t.failure.as_deref().unwrap().contains("rank 1"));
        assert_eq!(t.final_label_index, 2);
    }

    #[test]
    fn pipeline_sorts_and_tolerates_failures() {
        let v = vocab();
        let ds = Dataset::new(
            v.clone(),
            vec![item("b", &[2, 1], 0.3, &[1]), item("a", &[0, 1], 0.3, &[1])],
            LabelMode::Standard,
        )
        .unwrap();
        let script = ScriptedVerifier::from_entries([ScriptEntry {
            item_id: "b".into(),
            rank: None,
            category: "bathing cap".into(),
            answer: Answer::Yes,
            raw_text: "Yes".into(),
        }]);
        let traces = run_pipeline(&ds, &script, &ReflectionPolicy::default(), 2).unwrap();
        assert_eq!(
            traces
                .iter()
                .map(|t| t.item_id.as_str())
                .collect::<Vec<_>>(),
            vec!["a", "b"]
        );
        assert!(traces[0].failed());
        assert!(!traces[1].failed());

        let empty = Dataset::new(v, vec![], LabelMode::Standard).unwrap();
        assert!(run_pipeline(
            &empty,
            &ConstantVerifier(Answer::Yes),
            &ReflectionPolicy::default(),
            1
        )
        .unwrap()
        .is_empty());
    }

    #[test]
    fn cache_avoids_repeat_queries() {
        let v = vocab();
        let ds = Dataset::new(
            v,
            vec![
                item("a", &[2, 1, 0], 0.3, &[0]),
                item("b", &[1, 0], 0.2, &[1]),
            ],
            LabelMode::Standard,
        )
        .unwrap();
        let cache = VerdictCache::new();
        let verifier = ConstantVerifier(Answer::No);
        let policy = ReflectionPolicy::with_threshold(1.0);
        let first = run_pipeline_cached(&ds, &verifier, &policy, &cache, 1).unwrap();
        assert_eq!(cache.verifier_calls(), 5);
        let second = run_pipeline_cached(&ds, &verifier, &policy, &cache, 1).unwrap();
        assert_eq!(cache.verifier_calls(), 5);
        assert_eq!(first, second);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        cache.save(&path).unwrap();
        let reloaded = VerdictCache::load(&path).unwrap();
        assert_eq!(reloaded.entries(), cache.entries());
        let third = run_pipeline_cached(&ds, &verifier, &policy, &reloaded, 1).unwrap();
        assert_eq!(reloaded.verifier_calls(), 0);
        assert_eq!(third, first);
    }

    #[test]
    fn sweep_rejects_unsorted() {
        let ds = Dataset::new(vocab(), vec![], LabelMode::Standard).unwrap();
        let err = sweep_thresholds(
            &ds,
            &ConstantVerifier(Answer::Yes),
            &ReflectionPolicy::default(),
            &[0.5, 0.2],
            &VerdictCache::new(),
            1,
        );
        assert_eq!(err, Err(ReflectionError::UnsortedThresholds));
    }

    #[test]
    fn trace_json_roundtrip() {
        let v = vocab();
        let p = item("a", &[2, 1, 0], 0.3, &[0]);
        let t = verify_candidates(
            &p,
            &RankScript(vec![Answer::No, Answer::Yes, Answer::No]),
            &ReflectionPolicy::default(),
            &v,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_traces(std::slice::from_ref(&t), &mut buf).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert!(line.starts_with(
            "{\"item_id\":\"a\",\"gated\":true,\"confidence\":0.3,\"steps\":[{\"rank\":1,"
        ));
        assert!(!line.contains("failure"));
        let back: ReflectionTrace = serde_json::from_str(line.trim_end()).unwrap();
        assert_eq!(back, t);
    }
}
