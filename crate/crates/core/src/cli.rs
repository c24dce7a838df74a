//! Command-line driver for every pipeline stage.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    Gateway, GatewayError, HttpBackend, HttpBackendConfig, ResponseCache, RetryPolicy, RuleOracle, RuleOracleConfig,
    DEFAULT_MAX_IN_FLIGHT, MOCK_BACKEND,
};
use crate::featurize::{balance, fit_bins, stratified_split, BinningModel, SplitSpec};
use crate::metrics::{
    build_report, default_segments, Annotation, Metric, MetricsReport, PredictionRow, ReportInputs, SegmentDefinition,
    ThresholdGrid,
};
use crate::pipeline::{select_exemplars, Assistant, AssistantError};
use crate::prompt::{emit_finetune_pairs, finetune_jsonl, PromptConfig, PromptKind, Templates};
use crate::review::http::{serve, ServiceState};
use crate::review::{ReviewStore, SystemClock};
use crate::schema::{load_schema, FeatureSchema, Label, LabeledTransaction};
use crate::synth::{generate, SynthConfig};

pub const DEFAULT_CONFIG: &str = "./scamlens.json";

/// Like `println!`, but a closed stdout is not an error.
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    User(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

fn user(e: impl std::fmt::Display) -> CliError {
    CliError::User(e.to_string())
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

impl From<AssistantError> for CliError {
    fn from(e: AssistantError) -> Self {
        match e {
            AssistantError::Gateway(GatewayError::Transport { .. } | GatewayError::Cache(_)) => internal(e),
            _ => user(e),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "scamlens", version, about = "Assistive scam detection for payment transactions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic labeled corpus with planted outcomes.
    Generate(GenerateArgs),
    /// Validate a labeled corpus line by line.
    Ingest(IngestArgs),
    /// Stratified split, optional balancing and bin fitting.
    Prepare(PrepareArgs),
    /// Run the assistant over one split and write predictions.
    Classify(ClassifyArgs),
    /// Score predictions against gold labels and reviewer annotations.
    Evaluate(EvaluateArgs),
    /// Run the ablation matrix described by an experiment file.
    Experiment(ExperimentArgs),
    /// Emit prompt/completion pairs for fine-tuning.
    Finetune(FinetuneArgs),
    /// Serve the review queue over HTTP.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Output corpus (JSON Lines).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub scam_rate: f64,
    /// Also write the planted cell of every record here.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Feature schema; the bundled schema when omitted.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Write accepted records here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// train,validation,test fractions summing to 1.
    #[arg(long, default_value = "0.7,0.15,0.15")]
    pub ratios: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Downsample the training split to this scam fraction.
    #[arg(long)]
    pub balance: Option<f64>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    fn file(self) -> &'static str {
        match self {
            SplitName::Train => "train.jsonl",
            SplitName::Validation => "validation.jsonl",
            SplitName::Test => "test.jsonl",
        }
    }

    fn name(self) -> &'static str {
        self.file().trim_end_matches(".jsonl")
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PromptArg {
    Reasoning,
    Classifier,
}

impl From<PromptArg> for PromptKind {
    fn from(p: PromptArg) -> Self {
        match p {
            PromptArg::Reasoning => PromptKind::Reasoning,
            PromptArg::Classifier => PromptKind::Classifier,
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct AblationArgs {
    /// Leave raw numbers out of serialized numeric values.
    #[arg(long)]
    pub no_raw_numeric: bool,
    /// Leave bucket names out of serialized numeric values.
    #[arg(long)]
    pub no_categorical: bool,
    /// Leave the domain background prose out of prompts.
    #[arg(long)]
    pub no_text_context: bool,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Prompt template file; the bundled templates when omitted.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Backend and oracle settings.
    #[arg(long, default_value = DEFAULT_CONFIG)]
    pub config: PathBuf,
    /// Response cache directory; overrides the config file.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    /// `mock` or the id of an HTTP backend from the config file.
    #[arg(long, default_value = MOCK_BACKEND)]
    pub backend: String,
    #[arg(long, value_enum, default_value = "reasoning")]
    pub prompt: PromptArg,
    /// Only classify the first N records of the split.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Predictions file; `<data>/predictions.<split>.jsonl` when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub ablation: AblationArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Bins from `prepare`; fitted on the gold file when omitted.
    #[arg(long)]
    pub bins: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// JSON list of segment definitions; the four default segments when omitted.
    #[arg(long)]
    pub segments: Option<PathBuf>,
    /// Comma-separated thresholds; must include 0.5 and 0.9.
    #[arg(long)]
    pub thresholds: Option<String>,
    /// Where report.json and report.txt go; next to the predictions when omitted.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitName,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub ablation: AblationArgs,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value = MOCK_BACKEND)]
    pub backend: String,
    /// Directory written by `prepare` (bins and exemplars).
    #[arg(long)]
    pub data: PathBuf,
    /// Event log; `<data>/review-events.jsonl` when omitted.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "reasoning")]
    pub prompt: PromptArg,
    /// Idle minutes before an in-review case returns to the queue.
    #[arg(long, default_value_t = 30)]
    pub lease_minutes: u64,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Backend settings read from the `--config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub rule_oracle: RuleOracleConfig,
    pub http_backends: Vec<HttpBackendConfig>,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub cache_dir: Option<PathBuf>,
    pub temperature: f64,
    pub max_output_chars: usize,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            rule_oracle: RuleOracleConfig::default(),
            http_backends: Vec::new(),
            retry: RetryPolicy::default(),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            cache_dir: None,
            temperature: 0.0,
            max_output_chars: 8192,
        }
    }
}

impl AppConfig {
    /// The default path may be absent; an explicit one must exist.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        if !path.exists() && path == Path::new(DEFAULT_CONFIG) {
            return Ok(Self::default());
        }
        let cfg: AppConfig = read_json(path)?;
        cfg.rule_oracle
            .validate()
            .map_err(|e| user(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| user(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("serializable") + "\n")
        .collect()
}

/// Parses non-blank lines; errors carry 1-based line numbers.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Vec<(usize, Result<T, String>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, serde_json::from_str(l).map_err(|e| e.to_string())))
        .collect()
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    parse_jsonl(&read_text(path)?)
        .into_iter()
        .map(|(line, r)| r.map_err(|e| user(format!("{}:{line}: {e}", path.display()))))
        .collect()
}

fn schema_from(path: Option<&Path>) -> Result<FeatureSchema, CliError> {
    match path {
        None => Ok(FeatureSchema::bundled()),
        Some(p) => load_schema(&read_text(p)?).map_err(|e| user(format!("{}: {e}", p.display()))),
    }
}

fn templates_from(path: Option<&Path>) -> Result<Templates, CliError> {
    match path {
        None => Ok(Templates::bundled()),
        Some(p) => Templates::parse(&read_text(p)?).map_err(|e| user(format!("{}: {e}", p.display()))),
    }
}

fn load_bins(path: &Path) -> Result<BinningModel, CliError> {
    BinningModel::from_json(&read_text(path)?).map_err(|e| user(format!("{}: {e}", path.display())))
}

/// Reads and validates a labeled corpus, rejecting the first bad line.
fn load_corpus(path: &Path, schema: &FeatureSchema) -> Result<Vec<LabeledTransaction>, CliError> {
    let data: Vec<LabeledTransaction> = read_jsonl(path)?;
    for t in &data {
        t.check(schema).map_err(|e| user(format!("{}: {e}", path.display())))?;
    }
    Ok(data)
}

fn prompt_config(templates: Templates, ablation: &AblationArgs) -> PromptConfig {
    let mut cfg = PromptConfig {
        templates,
        include_text_context: !ablation.no_text_context,
        ..PromptConfig::default()
    };
    cfg.serialize.include_raw_numeric = !ablation.no_raw_numeric;
    cfg.serialize.include_categorical = !ablation.no_categorical;
    cfg
}

pub fn build_gateway(
    app: &AppConfig,
    schema: Arc<FeatureSchema>,
    model: Arc<BinningModel>,
    cache_dir: Option<&Path>,
) -> Result<Gateway, CliError> {
    let cache = match cache_dir.or(app.cache_dir.as_deref()) {
        Some(dir) => ResponseCache::on_disk(dir).map_err(|e| user(format!("{}: {e}", dir.display())))?,
        None => ResponseCache::in_memory(),
    };
    let mut gateway = Gateway::new(cache, app.retry, app.max_in_flight);
    gateway.register(
        MOCK_BACKEND,
        Arc::new(RuleOracle::new(schema, model, app.rule_oracle.clone())),
    );
    for http in &app.http_backends {
        gateway.register(&http.id, Arc::new(HttpBackend::new(http.clone())));
    }
    Ok(gateway)
}

fn generate_cmd(a: &GenerateArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&a.scam_rate) {
        return Err(user("--scam-rate must be within [0, 1]"));
    }
    let cfg = SynthConfig {
        n: a.n,
        seed: a.seed,
        scam_rate: a.scam_rate,
        ..SynthConfig::default()
    };
    let (data, planted) = generate(&cfg);
    write_file(&a.out, &to_jsonl(&data))?;
    if let Some(m) = &a.manifest {
        write_file(m, &to_jsonl(&planted))?;
    }
    say!("generated {} records -> {}", data.len(), a.out.display());
    Ok(())
}

fn ingest_cmd(a: &IngestArgs) -> Result<(), CliError> {
    let schema = schema_from(a.schema.as_deref())?;
    let text = read_text(&a.input)?;
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    let mut ids = std::collections::HashSet::new();
    for (line, parsed) in parse_jsonl::<LabeledTransaction>(&text) {
        let checked = parsed.and_then(|t| {
            t.check(&schema).map_err(|e| e.to_string())?;
            if !ids.insert(t.id().to_string()) {
                return Err(format!("duplicate id {:?}", t.id()));
            }
            Ok(t)
        });
        match checked {
            Ok(t) => accepted.push(t),
            Err(e) => rejected.push((line, e)),
        }
    }
    if accepted.is_empty() && rejected.is_empty() {
        return Err(user(format!("{}: no records (empty prediction set)", a.input.display())));
    }
    for (line, e) in &rejected {
        eprintln!("line {line}: {e}");
    }
    if let Some(out) = &a.out {
        write_file(out, &to_jsonl(&accepted))?;
    }
    say!("{} accepted, {} rejected", accepted.len(), rejected.len());
    if rejected.is_empty() {
        Ok(())
    } else {
        Err(user(format!("{} invalid lines", rejected.len())))
    }
}

pub fn parse_ratios(s: &str) -> Result<[f64; 3], CliError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| user(format!("--ratios {s:?}: {e}")))?;
    <[f64; 3]>::try_from(parts).map_err(|_| user(format!("--ratios {s:?}: expected three comma-separated numbers")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitManifest {
    ratios: [f64; 3],
    seed: u64,
    balance: Option<f64>,
    counts: BTreeMap<String, [usize; 2]>,
}

fn prepare_into(
    corpus: &[LabeledTransaction],
    schema: &FeatureSchema,
    ratios: [f64; 3],
    seed: u64,
    balance_target: Option<f64>,
    out_dir: &Path,
) -> Result<(), CliError> {
    let spec = SplitSpec::new(ratios, seed).map_err(user)?;
    let mut split = stratified_split(corpus, &spec).map_err(user)?;
    if let Some(t) = balance_target {
        split.train = balance(&split.train, t, seed).map_err(user)?;
    }
    let model = fit_bins(&split.train, schema).map_err(user)?;
    let mut counts = BTreeMap::new();
    for (name, part) in [
        (SplitName::Train, &split.train),
        (SplitName::Validation, &split.validation),
        (SplitName::Test, &split.test),
    ] {
        write_file(&out_dir.join(name.file()), &to_jsonl(part))?;
        let scams = part.iter().filter(|t| t.label == Label::Scam).count();
        counts.insert(name.name().to_string(), [part.len(), scams]);
        say!("{}: {} records ({} scam)", name.name(), part.len(), scams);
    }
    write_file(&out_dir.join("bins.json"), &model.to_json())?;
    let manifest = SplitManifest {
        ratios,
        seed,
        balance: balance_target,
        counts,
    };
    write_file(
        &out_dir.join("split.json"),
        &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"),
    )
}

fn prepare_cmd(a: &PrepareArgs) -> Result<(), CliError> {
    let schema = schema_from(a.schema.as_deref())?;
    let ratios = parse_ratios(&a.ratios)?;
    let corpus = load_corpus(&a.corpus, &schema)?;
    prepare_into(&corpus, &schema, ratios, a.seed, a.balance, &a.out_dir)
}

struct ClassifyPlan<'a> {
    data: &'a Path,
    split: SplitName,
    backend: &'a str,
    kind: PromptKind,
    limit: Option<usize>,
    out: PathBuf,
    ablation: AblationArgs,
    schema: Option<&'a Path>,
    templates: Option<&'a Path>,
    app: &'a AppConfig,
    cache_dir: Option<&'a Path>,
}

fn make_assistant(
    data: &Path,
    backend: &str,
    kind: PromptKind,
    ablation: &AblationArgs,
    schema: Option<&Path>,
    templates: Option<&Path>,
    app: &AppConfig,
    cache_dir: Option<&Path>,
) -> Result<Assistant, CliError> {
    let schema = Arc::new(schema_from(schema)?);
    let model = Arc::new(load_bins(&data.join("bins.json"))?);
    let gateway = build_gateway(app, schema.clone(), model.clone(), cache_dir)?;
    if !gateway.has_backend(backend) {
        return Err(user(GatewayError::UnknownBackend(backend.to_string())));
    }
    let prompt_config = prompt_config(templates_from(templates)?, ablation);
    let train = load_corpus(&data.join(SplitName::Train.file()), &schema)?;
    let exemplars = select_exemplars(&train, kind, &schema, &model, &prompt_config)?;
    Ok(Assistant {
        schema,
        model,
        gateway: Arc::new(gateway),
        backend_id: backend.to_string(),
        kind,
        prompt_config,
        exemplars,
        temperature: app.temperature,
        max_output_chars: app.max_output_chars,
    })
}

fn classify_run(plan: &ClassifyPlan<'_>) -> Result<Vec<PredictionRow>, CliError> {
    let assistant = make_assistant(
        plan.data,
        plan.backend,
        plan.kind,
        &plan.ablation,
        plan.schema,
        plan.templates,
        plan.app,
        plan.cache_dir,
    )?;
    let mut records = load_corpus(&plan.data.join(plan.split.file()), &assistant.schema)?;
    if let Some(n) = plan.limit {
        records.truncate(n);
    }
    log::info!(
        "classifying {} {} records with backend {} (prompt kind: {})",
        records.len(),
        plan.split.name(),
        plan.backend,
        match plan.kind {
            PromptKind::Reasoning => "reasoning",
            PromptKind::Classifier => "classifier",
        }
    );
    let raw: Vec<_> = records.iter().map(|t| t.record.clone()).collect();
    let mut rows = Vec::with_capacity(raw.len());
    let mut cached = 0;
    for (t, outcome) in records.iter().zip(assistant.assess_all(&raw, assistant.gateway.max_in_flight())) {
        let a = outcome?;
        cached += a.cached as usize;
        for w in &a.output.warnings {
            log::warn!("{}: {w}", t.id());
        }
        rows.push(a.output.prediction_row(t.id()));
    }
    log::info!("{} predictions ({} from cache)", rows.len(), cached);
    write_file(&plan.out, &to_jsonl(&rows))?;
    Ok(rows)
}

fn classify_cmd(a: &ClassifyArgs) -> Result<(), CliError> {
    let app = AppConfig::load(&a.common.config)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.data.join(format!("predictions.{}.jsonl", a.split.name())));
    let rows = classify_run(&ClassifyPlan {
        data: &a.data,
        split: a.split,
        backend: &a.backend,
        kind: a.prompt.into(),
        limit: a.limit,
        out: out.clone(),
        ablation: a.ablation.clone(),
        schema: a.common.schema.as_deref(),
        templates: a.common.templates.as_deref(),
        app: &app,
        cache_dir: a.common.cache_dir.as_deref(),
    })?;
    say!("wrote {} predictions -> {}", rows.len(), out.display());
    Ok(())
}

pub fn parse_thresholds(s: &str) -> Result<ThresholdGrid, CliError> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| user(format!("--thresholds {s:?}: {e}")))?;
    ThresholdGrid::new(v).map_err(user)
}

struct EvaluatePlan<'a> {
    predictions: &'a [PredictionRow],
    gold_path: &'a Path,
    annotations: Option<&'a Path>,
    bins: Option<&'a Path>,
    schema: &'a FeatureSchema,
    segments: &'a [SegmentDefinition],
    grid: &'a ThresholdGrid,
    corpus: String,
    out_dir: &'a Path,
}

fn evaluate_run(plan: &EvaluatePlan<'_>) -> Result<MetricsReport, CliError> {
    let gold = load_corpus(plan.gold_path, plan.schema)?;
    let annotations: Option<Vec<Annotation>> = plan.annotations.map(read_jsonl).transpose()?;
    let mut fitted_notice = None;
    let model = match plan.bins {
        Some(p) => load_bins(p)?,
        None => {
            fitted_notice = Some("no --bins given; bins were fitted on the gold file".to_string());
            fit_bins(&gold, plan.schema).map_err(user)?
        }
    };
    let mut report = build_report(&ReportInputs {
        predictions: plan.predictions,
        gold: &gold,
        annotations: annotations.as_deref(),
        schema: plan.schema,
        model: &model,
        segments: plan.segments,
        grid: plan.grid,
        corpus: &plan.corpus,
    })
    .map_err(user)?;
    report.notices.extend(fitted_notice);
    write_file(&plan.out_dir.join("report.json"), &report.to_json())?;
    write_file(&plan.out_dir.join("report.txt"), &report.render_table())?;
    Ok(report)
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<(), CliError> {
    let schema = schema_from(a.schema.as_deref())?;
    let predictions: Vec<PredictionRow> = read_jsonl(&a.pred)?;
    let segments = match &a.segments {
        Some(p) => read_json(p)?,
        None => default_segments(),
    };
    let grid = match &a.thresholds {
        Some(s) => parse_thresholds(s)?,
        None => ThresholdGrid::default(),
    };
    let out_dir = a.out_dir.clone().unwrap_or_else(|| {
        a.pred
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    });
    let report = evaluate_run(&EvaluatePlan {
        predictions: &predictions,
        gold_path: &a.gold,
        annotations: a.annotations.as_deref(),
        bins: a.bins.as_deref(),
        schema: &schema,
        segments: &segments,
        grid: &grid,
        corpus: a.gold.display().to_string(),
        out_dir: &out_dir,
    })?;
    say!("{}", report.render_table().trim_end());
    say!("report -> {}", out_dir.join("report.json").display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationFlag {
    IncludeRawNumeric,
    IncludeCategorical,
    IncludeTextContext,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub seed: u64,
}

/// An ablation matrix. Relative paths resolve against the file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: PathBuf,
    #[serde(default)]
    pub schema: Option<PathBuf>,
    #[serde(default)]
    pub templates: Option<PathBuf>,
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default = "default_prompt")]
    pub prompt: PromptKind,
    pub split: SplitConfig,
    #[serde(default)]
    pub balance: Option<f64>,
    #[serde(default)]
    pub thresholds: Option<ThresholdGrid>,
    #[serde(default)]
    pub segments: Option<Vec<SegmentDefinition>>,
    /// Flags run both on and off; the rest stay on.
    #[serde(default)]
    pub toggle: Vec<AblationFlag>,
    /// Data volumes; `null` means the whole split.
    #[serde(default = "default_limits")]
    pub limits: Vec<Option<usize>>,
    /// Backend settings file; defaults apply when omitted.
    #[serde(default)]
    pub app_config: Option<PathBuf>,
    pub out_dir: PathBuf,
}

fn default_backend() -> String {
    MOCK_BACKEND.to_string()
}

fn default_prompt() -> PromptKind {
    PromptKind::Reasoning
}

fn default_limits() -> Vec<Option<usize>> {
    vec![None]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub run: String,
    pub include_raw_numeric: bool,
    pub include_categorical: bool,
    pub include_text_context: bool,
    pub limit: Option<usize>,
    pub predictions: u64,
    pub precision_at_0_5: Metric,
    pub recall_at_0_5: Metric,
    pub f1_at_0_5: Metric,
    pub precision_at_0_9: Metric,
    pub recall_at_0_9: Metric,
    pub f1_at_0_9: Metric,
    pub auc_roc: Metric,
    pub verdict_accuracy: Metric,
}

/// Cartesian product of the toggled flags, all-on first.
pub fn ablation_grid(toggle: &[AblationFlag]) -> Vec<AblationArgs> {
    let mut flags: Vec<AblationFlag> = toggle.to_vec();
    flags.sort();
    flags.dedup();
    (0..1usize << flags.len())
        .map(|mask| {
            let mut a = AblationArgs::default();
            for (bit, f) in flags.iter().enumerate() {
                if mask & (1 << bit) != 0 {
                    match f {
                        AblationFlag::IncludeRawNumeric => a.no_raw_numeric = true,
                        AblationFlag::IncludeCategorical => a.no_categorical = true,
                        AblationFlag::IncludeTextContext => a.no_text_context = true,
                    }
                }
            }
            a
        })
        .collect()
}

fn render_matrix(rows: &[MatrixRow]) -> String {
    let mut s = format!(
        "{:<28} {:>5} {:>5} {:>5} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "run", "raw", "cat", "ctx", "limit", "n", "P@0.5", "R@0.5", "P@0.9", "R@0.9", "AUC"
    );
    let yn = |b: bool| if b { "on" } else { "off" };
    for r in rows {
        s.push_str(&format!(
            "{:<28} {:>5} {:>5} {:>5} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            r.run,
            yn(r.include_raw_numeric),
            yn(r.include_categorical),
            yn(r.include_text_context),
            r.limit.map_or("all".to_string(), |l| l.to_string()),
            r.predictions,
            r.precision_at_0_5.to_string(),
            r.recall_at_0_5.to_string(),
            r.precision_at_0_9.to_string(),
            r.recall_at_0_9.to_string(),
            r.auc_roc.to_string(),
        ));
    }
    s
}

fn experiment_cmd(a: &ExperimentArgs) -> Result<(), CliError> {
    let exp: ExperimentConfig = read_json(&a.config)?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let schema_path = exp.schema.as_deref().map(resolve);
    let templates_path = exp.templates.as_deref().map(resolve);
    let out_dir = resolve(&exp.out_dir);
    let app = match &exp.app_config {
        Some(p) => AppConfig::load(&resolve(p))?,
        None => AppConfig::default(),
    };
    let schema = schema_from(schema_path.as_deref())?;
    let corpus = load_corpus(&resolve(&exp.corpus), &schema)?;
    let data = out_dir.join("prepared");
    prepare_into(&corpus, &schema, exp.split.ratios, exp.split.seed, exp.balance, &data)?;
    let segments = exp.segments.clone().unwrap_or_else(default_segments);
    let grid = exp.thresholds.clone().unwrap_or_default();
    let cache_dir = out_dir.join("cache");

    let mut rows = Vec::new();
    for ablation in ablation_grid(&exp.toggle) {
        for &limit in &exp.limits {
            let run = format!(
                "raw-{}_cat-{}_ctx-{}_n-{}",
                !ablation.no_raw_numeric as u8,
                !ablation.no_categorical as u8,
                !ablation.no_text_context as u8,
                limit.map_or("all".to_string(), |l| l.to_string())
            );
            let run_dir = out_dir.join("runs").join(&run);
            let predictions = classify_run(&ClassifyPlan {
                data: &data,
                split: SplitName::Test,
                backend: &exp.backend,
                kind: exp.prompt,
                limit,
                out: run_dir.join("predictions.jsonl"),
                ablation: ablation.clone(),
                schema: schema_path.as_deref(),
                templates: templates_path.as_deref(),
                app: &app,
                cache_dir: Some(&cache_dir),
            })?;
            let gold_path = run_dir.join("gold.jsonl");
            let mut gold = load_corpus(&data.join(SplitName::Test.file()), &schema)?;
            if let Some(n) = limit {
                gold.truncate(n);
            }
            write_file(&gold_path, &to_jsonl(&gold))?;
            let report = evaluate_run(&EvaluatePlan {
                predictions: &predictions,
                gold_path: &gold_path,
                annotations: None,
                bins: Some(&data.join("bins.json")),
                schema: &schema,
                segments: &segments,
                grid: &grid,
                corpus: run.clone(),
                out_dir: &run_dir,
            })?;
            let at = |t: f64| report.at(t).cloned().expect("mandatory threshold present");
            let (p5, p9) = (at(0.5), at(0.9));
            rows.push(MatrixRow {
                run,
                include_raw_numeric: !ablation.no_raw_numeric,
                include_categorical: !ablation.no_categorical,
                include_text_context: !ablation.no_text_context,
                limit,
                predictions: report.predictions,
                precision_at_0_5: p5.precision,
                recall_at_0_5: p5.recall,
                f1_at_0_5: p5.f1,
                precision_at_0_9: p9.precision,
                recall_at_0_9: p9.recall,
                f1_at_0_9: p9.f1,
                auc_roc: report.auc_roc,
                verdict_accuracy: report.verdict_accuracy,
            });
        }
    }
    write_file(
        &out_dir.join("matrix.json"),
        &(serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n"),
    )?;
    let table = render_matrix(&rows);
    write_file(&out_dir.join("matrix.txt"), &table)?;
    say!("{}", table.trim_end());
    Ok(())
}

fn finetune_cmd(a: &FinetuneArgs) -> Result<(), CliError> {
    let schema = schema_from(a.schema.as_deref())?;
    let model = load_bins(&a.data.join("bins.json"))?;
    let cfg = prompt_config(templates_from(a.templates.as_deref())?, &a.ablation);
    let data = load_corpus(&a.data.join(a.split.file()), &schema)?;
    let pairs = emit_finetune_pairs(&data, &schema, &model, &cfg).map_err(user)?;
    write_file(&a.out, &finetune_jsonl(&pairs))?;
    say!("wrote {} pairs -> {}", pairs.len(), a.out.display());
    Ok(())
}

fn serve_cmd(a: &ServeArgs) -> Result<(), CliError> {
    let app = AppConfig::load(&a.common.config)?;
    let assistant = make_assistant(
        &a.data,
        &a.backend,
        a.prompt.into(),
        &AblationArgs::default(),
        a.common.schema.as_deref(),
        a.common.templates.as_deref(),
        &app,
        a.common.cache_dir.as_deref(),
    )?;
    let store_path = a.store.clone().unwrap_or_else(|| a.data.join("review-events.jsonl"));
    let store = ReviewStore::open(
        &store_path,
        Arc::new(SystemClock),
        Duration::from_secs(a.lease_minutes * 60),
    )
    .map_err(internal)?;
    let counts = store.snapshot().counts();
    log::info!(
        "review store {}: {} cases ({} pending, {} decided)",
        store_path.display(),
        counts.total,
        counts.pending,
        counts.decided
    );
    let state = ServiceState {
        store: Arc::new(store),
        assistant: Arc::new(assistant),
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(internal)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .map_err(|e| user(format!("cannot bind {}:{}: {e}", a.host, a.port)))?;
        let addr = listener.local_addr().map_err(internal)?;
        say!("listening on http://{addr}");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutdown requested");
        };
        serve(listener, state, shutdown).await.map_err(internal)
    })?;
    log::info!("shutdown complete");
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => generate_cmd(a),
        Command::Ingest(a) => ingest_cmd(a),
        Command::Prepare(a) => prepare_cmd(a),
        Command::Classify(a) => classify_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

/// Parses the process arguments, runs the command and maps errors to exit codes.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
