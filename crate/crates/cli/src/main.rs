use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use visreflect::connector::{self, ConnectorWeights, KeyStrategy};
use visreflect::evaluation;
use visreflect::reflection::{self, PromptTemplate, ReflectionPolicy, VerdictCache};
use visreflect::reverse::{self, KeyTermOptions, VisionTokenBlock};
use visreflect::simulate::{self, SimulationConfig};
use visreflect::store::{self, Dataset, DatasetError, LabelMode, StoreError};
use visreflect::verifier::{
    Answer, ConstantVerifier, OracleParams, RemoteVerifier, ScriptedVerifier, StochasticOracle,
    Verifier,
};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_PARTIAL: u8 = 3;
const EXIT_DATA: u8 = 4;

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Other(_) => EXIT_FAILURE,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Other(m) => m,
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> CliError + '_ {
    move |e| CliError::Other(format!("{}: {e}", path.display()))
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "visreflect",
    version,
    about = "Vision reflection toolkit over exported model artifacts"
)]
struct Cli {
    /// Log level: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a vocabulary, a prediction file and any EMB1 matrices.
    Validate(ValidateArgs),
    /// Run uncertainty-gated reflection and write traces plus a report.
    Reflect(ReflectArgs),
    /// Re-run the gate at several thresholds and write a CSV table.
    Sweep(SweepArgs),
    /// Recompute the evaluation report from an existing trace file.
    Evaluate(EvaluateArgs),
    /// Map vision tokens to their nearest text tokens and build a replacement prompt.
    ReverseEmbed(ReverseArgs),
    /// Build or apply a training-free connector.
    #[command(subcommand)]
    Connector(ConnectorCommand),
    /// Generate a seeded synthetic vocabulary and prediction file.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct DatasetArgs {
    /// Prediction file (JSON Lines).
    #[arg(long)]
    preds: PathBuf,
    /// Vocabulary file, one term per line.
    #[arg(long)]
    vocab: PathBuf,
    /// standard (one true label) or real (label sets).
    #[arg(long, default_value = "standard", value_parser = parse_label_mode)]
    label_mode: LabelMode,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// EMB1 matrices to check; each must have one row per vocabulary term.
    #[arg(long = "emb")]
    matrices: Vec<PathBuf>,
}

#[derive(Args)]
struct VerifierArgs {
    /// oracle:recall=R,spec=S[,not_sure=N][,seed=X] | const:yes|no|not_sure |
    /// script:PATH | http://HOST:PORT/PATH
    #[arg(long)]
    verifier: String,
    /// Seed for randomized verifiers when the spec does not set one.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the endpoint of an http verifier.
    #[arg(long, env = "VISREFLECT_ENDPOINT")]
    endpoint: Option<String>,
    /// Per-request timeout for an http verifier.
    #[arg(long, env = "VISREFLECT_TIMEOUT_MS", default_value_t = 30_000)]
    timeout_ms: u64,
    /// Extra attempts after a transport failure.
    #[arg(long, default_value_t = 3)]
    retries: u32,
    /// Maximum items in flight.
    #[arg(long, default_value_t = 1)]
    concurrency: usize,
}

#[derive(Args)]
struct PolicyArgs {
    /// Reflect only when the top-1 score is strictly below this value.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Highest candidate rank to verify.
    #[arg(long, default_value_t = reflection::DEFAULT_MAX_RANK)]
    max_rank: usize,
    /// Times the category is repeated inside the prompt.
    #[arg(long, default_value_t = 1)]
    repetition: usize,
    /// Prompt pattern with {category} once and optionally {article}.
    #[arg(long, default_value = reflection::DEFAULT_PATTERN)]
    template: String,
    /// File of category<TAB>article overrides.
    #[arg(long)]
    article_overrides: Option<PathBuf>,
}

#[derive(Args)]
struct ReflectArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    verifier: VerifierArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Output directory for traces.jsonl, report.json and report.csv.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Verdict cache file, read if present and rewritten afterwards.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    verifier: VerifierArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Comma-separated ascending thresholds, e.g. "0,0.5,1".
    #[arg(long)]
    thresholds: String,
    /// Output CSV path.
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
    /// Verdict cache file, read if present and rewritten afterwards.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Trace file written by `reflect`.
    #[arg(long)]
    traces: PathBuf,
    /// Threshold that defines the uncertain subset.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Report path; a CSV summary is written next to it.
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Args)]
struct ReverseArgs {
    /// EMB1 block of vision tokens.
    #[arg(long)]
    tokens: PathBuf,
    /// EMB1 text embedding table.
    #[arg(long)]
    embeddings: PathBuf,
    /// Decoded vocabulary aligned with the embedding table.
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value = "image")]
    item_id: String,
    /// Drop tokens whose best similarity is below this.
    #[arg(long)]
    min_similarity: Option<f64>,
    /// Keep terms containing digits or punctuation.
    #[arg(long)]
    keep_non_alphabetic: bool,
    /// Keep repeated terms.
    #[arg(long)]
    no_dedup: bool,
    /// Question appended to the replacement prompt.
    #[arg(long, default_value = "")]
    question: String,
    /// Key-term report (JSON Lines, one line).
    #[arg(long, default_value = "key_terms.jsonl")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ConnectorCommand {
    /// Build a connector bundle directory.
    Build(ConnectorBuildArgs),
    /// Apply a bundle to each row of an EMB1 feature file.
    Forward(ConnectorForwardArgs),
}

#[derive(Args)]
struct ConnectorBuildArgs {
    /// text_encoder, classifier or exemplar.
    #[arg(long)]
    strategy: KeyStrategy,
    #[arg(long)]
    vocab: PathBuf,
    /// EMB1 text embeddings, one row per term (the value matrix).
    #[arg(long)]
    values: PathBuf,
    /// EMB1 key source: term embeddings, classifier head, or exemplar features.
    #[arg(long)]
    keys: PathBuf,
    /// For exemplar: one vocabulary index per exemplar row.
    #[arg(long)]
    exemplar_labels: Option<PathBuf>,
    /// Override the strategy's default input normalization.
    #[arg(long)]
    normalize_input: Option<bool>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConnectorForwardArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// EMB1 image features, one row per input.
    #[arg(long)]
    input: PathBuf,
    /// Override the bundle's input normalization.
    #[arg(long)]
    normalize_input: Option<bool>,
    /// Outputs as JSON Lines.
    #[arg(long, default_value = "connector.jsonl")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    classes: usize,
    #[arg(long, default_value_t = store::DEFAULT_TOP_K)]
    k: usize,
    #[arg(long = "top1-acc")]
    top1_acc: f64,
    /// Fraction of items whose true label is in the top k.
    #[arg(long = "top5-contain")]
    top5_contain: f64,
    #[arg(long, default_value_t = 0.05)]
    conf_min: f64,
    #[arg(long, default_value_t = 0.95)]
    conf_max: f64,
    #[arg(long)]
    seed: u64,
    /// Directory for vocab.txt and predictions.jsonl.
    #[arg(long, default_value = "sim")]
    out_dir: PathBuf,
}

fn parse_label_mode(s: &str) -> std::result::Result<LabelMode, String> {
    match s {
        "standard" => Ok(LabelMode::Standard),
        "real" => Ok(LabelMode::Real),
        other => Err(format!("unknown label mode {other:?}")),
    }
}

fn load_dataset(args: &DatasetArgs) -> Result<Dataset> {
    let vocab = store::load_vocabulary(&args.vocab)?;
    Ok(store::load_dataset(&args.preds, vocab, args.label_mode)?)
}

fn build_policy(args: &PolicyArgs) -> Result<ReflectionPolicy> {
    let mut template =
        PromptTemplate::new(args.template.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(path) = &args.article_overrides {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let overrides = PromptTemplate::parse_article_overrides(&text)
            .map_err(|e| CliError::Config(e.to_string()))?;
        template = template.with_article_overrides(overrides);
    }
    let policy = ReflectionPolicy {
        threshold: args.threshold,
        max_rank: args.max_rank,
        template,
        repetition: args.repetition,
        ..ReflectionPolicy::default()
    };
    policy
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(policy)
}

fn parse_oracle(body: &str, default_seed: Option<u64>) -> Result<OracleParams> {
    let mut params = OracleParams::default();
    let mut seed = default_seed;
    for part in body.split(',').filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("oracle option {part:?} is not key=value")))?;
        let num = || {
            value
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("oracle option {key}: bad number {value:?}")))
        };
        match key {
            "recall" => params.recall = num()?,
            "spec" | "specificity" => params.specificity = num()?,
            "not_sure" => params.not_sure_share = num()?,
            "seed" => {
                seed = Some(
                    value
                        .parse()
                        .map_err(|_| CliError::Config(format!("bad seed {value:?}")))?,
                )
            }
            other => return Err(CliError::Config(format!("unknown oracle option {other:?}"))),
        }
    }
    params.seed = seed.ok_or_else(|| {
        CliError::Config("oracle verifier needs a seed (seed=N or --seed)".into())
    })?;
    params.validate().map_err(CliError::Config)?;
    Ok(params)
}

enum BuiltVerifier {
    Plain(Box<dyn Verifier>),
    Remote(RemoteVerifier),
}

impl BuiltVerifier {
    fn as_dyn(&self) -> &dyn Verifier {
        match self {
            BuiltVerifier::Plain(v) => v.as_ref(),
            BuiltVerifier::Remote(v) => v,
        }
    }
}

fn build_verifier(args: &VerifierArgs, ds: &Dataset) -> Result<BuiltVerifier> {
    let spec = args.verifier.as_str();
    if spec.starts_with("http:") || spec.starts_with("https:") {
        let endpoint = match &args.endpoint {
            Some(e) => e.clone(),
            None if spec.starts_with("http://") || spec.starts_with("https://") => spec.to_string(),
            None => format!("http://{}", &spec["http:".len()..]),
        };
        let remote = RemoteVerifier::new(
            endpoint,
            Duration::from_millis(args.timeout_ms),
            args.retries,
            args.concurrency,
        )
        .map_err(|e| CliError::Config(e.to_string()))?;
        return Ok(BuiltVerifier::Remote(remote));
    }
    let (kind, body) = spec
        .split_once(':')
        .ok_or_else(|| CliError::Config(format!("verifier spec {spec:?} has no kind prefix")))?;
    let verifier: Box<dyn Verifier> = match kind {
        "oracle" => {
            let params = parse_oracle(body, args.seed)?;
            Box::new(StochasticOracle::from_dataset(ds, params).map_err(CliError::Config)?)
        }
        "const" | "always" => {
            let answer = match body {
                "yes" => Answer::Yes,
                "no" => Answer::No,
                "not_sure" => Answer::NotSure,
                other => {
                    return Err(CliError::Config(format!(
                        "unknown constant answer {other:?}"
                    )))
                }
            };
            Box::new(ConstantVerifier(answer))
        }
        "script" => Box::new(
            ScriptedVerifier::load(body)
                .map_err(|e| CliError::Config(format!("script {body}: {e}")))?,
        ),
        other => return Err(CliError::Config(format!("unknown verifier kind {other:?}"))),
    };
    Ok(BuiltVerifier::Plain(verifier))
}

fn load_cache(path: Option<&Path>) -> Result<VerdictCache> {
    match path {
        Some(p) if p.exists() => VerdictCache::load(p)
            .map_err(|e| CliError::Config(format!("cache {}: {e}", p.display()))),
        _ => Ok(VerdictCache::new()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn cmd_validate(args: ValidateArgs) -> Result<u8> {
    let ds = load_dataset(&args.data)?;
    for path in &args.matrices {
        let m = store::load_embedding_matrix(path)?;
        if m.rows() != ds.vocabulary.len() {
            return Err(CliError::Data(format!(
                "{}: {} rows, vocabulary has {} terms",
                path.display(),
                m.rows(),
                ds.vocabulary.len()
            )));
        }
    }
    let duplicates = ds.vocabulary.duplicates().len();
    println!(
        "ok: {} terms ({duplicates} duplicate), {} items, {} matrices",
        ds.vocabulary.len(),
        ds.len(),
        args.matrices.len()
    );
    Ok(0)
}

fn cmd_reflect(args: ReflectArgs) -> Result<u8> {
    let policy = build_policy(&args.policy)?;
    let ds = load_dataset(&args.data)?;
    let verifier = build_verifier(&args.verifier, &ds)?;
    let cache = load_cache(args.cache.as_deref())?;
    let traces = reflection::run_pipeline_cached(
        &ds,
        verifier.as_dyn(),
        &policy,
        &cache,
        args.verifier.concurrency,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    create_dir(&args.out_dir)?;
    let trace_path = args.out_dir.join("traces.jsonl");
    reflection::save_traces(&traces, &trace_path).map_err(io_err(&trace_path))?;
    let report = evaluation::evaluate(&traces, &ds, policy.threshold)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let report_path = args.out_dir.join("report.json");
    evaluation::emit_report(&report, &report_path).map_err(io_err(&report_path))?;
    if let Some(path) = &args.cache {
        cache.save(path).map_err(io_err(path))?;
    }
    if let BuiltVerifier::Remote(r) = &verifier {
        let stats = r.stats();
        log::info!(
            "remote verifier: {} requests, {} retries",
            stats.requests,
            stats.retries
        );
    }
    eprintln!(
        "{} items, {} gated, {} verifier calls, baseline {}, reflected {}",
        report.n_items,
        report.n_gated,
        cache.verifier_calls(),
        evaluation::fixed4_or_na(report.baseline_accuracy),
        evaluation::fixed4_or_na(report.reflected_accuracy)
    );
    if report.n_failed > 0 {
        eprintln!("{} items failed verification", report.n_failed);
        return Ok(EXIT_PARTIAL);
    }
    Ok(0)
}

fn parse_thresholds(text: &str) -> Result<Vec<f64>> {
    let values = text
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("bad threshold {t:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(CliError::Config("thresholds must lie in [0, 1]".into()));
    }
    if values.windows(2).any(|w| w[0] > w[1]) {
        return Err(CliError::Config(
            "thresholds must be sorted ascending".into(),
        ));
    }
    Ok(values)
}

fn cmd_sweep(args: SweepArgs) -> Result<u8> {
    let thresholds = parse_thresholds(&args.thresholds)?;
    let policy = build_policy(&args.policy)?;
    let ds = load_dataset(&args.data)?;
    let verifier = build_verifier(&args.verifier, &ds)?;
    let cache = load_cache(args.cache.as_deref())?;
    let rows = reflection::sweep_thresholds(
        &ds,
        verifier.as_dyn(),
        &policy,
        &thresholds,
        &cache,
        args.verifier.concurrency,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let file = fs::File::create(&args.out).map_err(io_err(&args.out))?;
    let mut out = BufWriter::new(file);
    reflection::write_sweep_csv(&rows, &mut out)
        .and_then(|_| out.flush())
        .map_err(io_err(&args.out))?;
    if let Some(path) = &args.cache {
        cache.save(path).map_err(io_err(path))?;
    }
    eprintln!(
        "{} thresholds, {} verifier calls",
        rows.len(),
        cache.verifier_calls()
    );
    Ok(0)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<u8> {
    let ds = load_dataset(&args.data)?;
    let traces = reflection::load_traces(&args.traces)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.traces.display())))?;
    let report = evaluation::evaluate(&traces, &ds, args.threshold)
        .map_err(|e| CliError::Data(e.to_string()))?;
    evaluation::emit_report(&report, &args.out).map_err(io_err(&args.out))?;
    Ok(if report.n_failed > 0 { EXIT_PARTIAL } else { 0 })
}

fn cmd_reverse_embed(args: ReverseArgs) -> Result<u8> {
    let tokens = store::load_embedding_matrix(&args.tokens)?;
    let table = store::load_embedding_matrix(&args.embeddings)?;
    let vocab = store::load_vocabulary(&args.vocab)?;
    let opts = KeyTermOptions {
        min_similarity: args.min_similarity,
        drop_non_alphabetic: !args.keep_non_alphabetic,
        dedup: !args.no_dedup,
    };
    let block = VisionTokenBlock {
        item_id: args.item_id,
        tokens,
    };
    let report = reverse::extract_key_terms(&block, &table, &vocab, &opts)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let mut line = serde_json::to_string(&report).map_err(|e| CliError::Other(e.to_string()))?;
    line.push('\n');
    fs::write(&args.out, line).map_err(io_err(&args.out))?;
    match reverse::build_replacement_prompt(&report, &args.question) {
        Ok(prompt) => println!("{prompt}"),
        Err(e) => eprintln!("{e}"),
    }
    Ok(0)
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| {
                CliError::Data(format!("{} line {}: not an index", path.display(), i + 1))
            })
        })
        .collect()
}

fn cmd_connector(cmd: ConnectorCommand) -> Result<u8> {
    let data_err = |e: connector::ConnectorError| CliError::Data(e.to_string());
    match cmd {
        ConnectorCommand::Build(args) => {
            let vocab = store::load_vocabulary(&args.vocab)?;
            let values =
                connector::build_value_matrix(&vocab, store::load_embedding_matrix(&args.values)?)
                    .map_err(data_err)?;
            let source = store::load_embedding_matrix(&args.keys)?;
            let keys = match args.strategy {
                KeyStrategy::TextEncoder => connector::build_key_from_text_encoder(&source),
                KeyStrategy::Classifier => connector::build_key_from_classifier(&source),
                KeyStrategy::Exemplar => {
                    let labels_path = args.exemplar_labels.as_deref().ok_or_else(|| {
                        CliError::Config("exemplar strategy needs --exemplar-labels".into())
                    })?;
                    let labels = read_labels(labels_path)?;
                    let sets = connector::group_exemplars(&source, &labels, vocab.len())
                        .map_err(data_err)?;
                    connector::build_key_from_exemplars(&sets).map_err(data_err)?
                }
            };
            let mut weights =
                ConnectorWeights::new(args.strategy, keys, values, vocab).map_err(data_err)?;
            if let Some(n) = args.normalize_input {
                weights = weights.with_normalize_input(n);
            }
            weights.save_bundle(&args.out).map_err(data_err)?;
            println!(
                "{} connector: v={} e_x={} e_l={}",
                weights.strategy(),
                weights.vocab().len(),
                weights.e_x(),
                weights.e_l()
            );
        }
        ConnectorCommand::Forward(args) => {
            let mut weights = ConnectorWeights::load_bundle(&args.bundle).map_err(data_err)?;
            if let Some(n) = args.normalize_input {
                weights = weights.with_normalize_input(n);
            }
            let xs = store::load_embedding_matrix(&args.input)?;
            let outputs = connector::connector_forward_block(&xs, &weights).map_err(data_err)?;
            let file = fs::File::create(&args.out).map_err(io_err(&args.out))?;
            let mut out = BufWriter::new(file);
            for o in &outputs {
                serde_json::to_writer(&mut out, o).map_err(|e| CliError::Other(e.to_string()))?;
                out.write_all(b"\n").map_err(io_err(&args.out))?;
            }
            out.flush().map_err(io_err(&args.out))?;
        }
    }
    Ok(0)
}

fn cmd_simulate(args: SimulateArgs) -> Result<u8> {
    let cfg = SimulationConfig {
        n_items: args.n,
        n_classes: args.classes,
        k: args.k,
        top1_accuracy: args.top1_acc,
        topk_containment: args.top5_contain,
        conf_min: args.conf_min,
        conf_max: args.conf_max,
        seed: args.seed,
    };
    let ds = simulate::generate(&cfg).map_err(CliError::Config)?;
    create_dir(&args.out_dir)?;
    store::save_vocabulary(&ds.vocabulary, args.out_dir.join("vocab.txt"))
        .map_err(|e| CliError::Other(e.to_string()))?;
    store::save_predictions(&ds.items, args.out_dir.join("predictions.jsonl"))
        .map_err(|e| CliError::Other(e.to_string()))?;
    Ok(0)
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Validate(a) => cmd_validate(a),
        Command::Reflect(a) => cmd_reflect(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::ReverseEmbed(a) => cmd_reverse_embed(a),
        Command::Connector(c) => cmd_connector(c),
        Command::Simulate(a) => cmd_simulate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
