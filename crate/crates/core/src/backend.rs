//! Completion backends behind one gateway.
//!
//! The gateway owns the backend registry, a content-addressed response cache,
//! transient-failure retries with exponential backoff and a bound on
//! in-flight requests. Two backends ship with the crate: [`RuleOracle`], a
//! deterministic rule engine that answers in the evaluation grammar, and
//! [`HttpBackend`], a generic chat-completion client.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evaluation::{render_evaluation, Evaluation, Reason, Verdict};
use crate::featurize::{format_number, BinningModel, Bucket};
use crate::prompt::{Prompt, PromptKind};
use crate::schema::{FeatureSchema, FeatureSpec, TransactionRecord};

pub const MOCK_BACKEND: &str = "mock";

#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub prompt: Prompt,
    pub temperature: f64,
    pub max_output_chars: usize,
    pub backend_id: String,
    /// The transaction behind the prompt. Offline backends read it directly;
    /// network backends only see the prompt text.
    pub record: Option<Arc<TransactionRecord>>,
}

impl CompletionRequest {
    pub fn new(prompt: Prompt, backend_id: &str) -> Self {
        Self {
            prompt,
            temperature: 0.0,
            max_output_chars: 8192,
            backend_id: backend_id.to_string(),
            record: None,
        }
    }

    pub fn with_record(mut self, record: Arc<TransactionRecord>) -> Self {
        self.record = Some(record);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionResult {
    pub text: String,
    pub latency_ms: u64,
    pub backend_id: String,
    pub cached: bool,
}

/// Failure reported by a backend for one attempt.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendFailure {
    /// Worth retrying: timeouts, connection errors, 429 and 5xx.
    Transient(String),
    Refused { status: u16, message: String },
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendFailure>;
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("unknown backend {0:?}")]
    UnknownBackend(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend {backend:?} failed after {attempts} attempts: {message}")]
    Transport {
        backend: String,
        attempts: u32,
        message: String,
    },
    #[error("backend {backend:?} refused the request (status {status}): {message}")]
    BackendRefused {
        backend: String,
        status: u16,
        message: String,
    },
    #[error("cache I/O: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 200,
            max_delay_ms: 5_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        let ms = self
            .base_delay_ms
            .saturating_mul(1u64 << retry.min(20))
            .min(self.max_delay_ms);
        Duration::from_millis(ms)
    }
}

/// Content-addressed response cache: one UTF-8 file per key under `dir`, or
/// memory only when no directory is set.
#[derive(Debug, Default)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<String, String>>,
    writer: Mutex<()>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir: Some(dir),
            ..Self::default()
        })
    }

    pub fn key(backend_id: &str, prompt_text: &str, temperature: f64) -> String {
        let mut h = Sha256::new();
        h.update(backend_id.as_bytes());
        h.update([0]);
        h.update(prompt_text.as_bytes());
        h.update([0]);
        h.update(temperature.to_bits().to_be_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.txt")))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if let Some(v) = self.memory.read().expect("cache lock").get(key) {
            return Some(v.clone());
        }
        let text = fs::read_to_string(self.path(key)?).ok()?;
        self.memory
            .write()
            .expect("cache lock")
            .insert(key.to_string(), text.clone());
        Some(text)
    }

    /// Writes through to disk via a temp file and atomic rename.
    pub fn put(&self, key: &str, text: &str) -> std::io::Result<()> {
        let _guard = self.writer.lock().expect("cache writer lock");
        if let (Some(dir), Some(path)) = (&self.dir, self.path(key)) {
            let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
            tmp.write_all(text.as_bytes())?;
            tmp.as_file().sync_data()?;
            tmp.persist(path).map_err(|e| e.error)?;
        }
        self.memory
            .write()
            .expect("cache lock")
            .insert(key.to_string(), text.to_string());
        Ok(())
    }
}

/// Counting semaphore bounding concurrent backend calls.
#[derive(Debug)]
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.active.lock().expect("in-flight lock");
        while *n >= self.limit {
            n = self.freed.wait(n).expect("in-flight lock");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().expect("in-flight lock") -= 1;
        self.0.freed.notify_one();
    }
}

pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

pub struct Gateway {
    backends: HashMap<String, Arc<dyn Backend>>,
    cache: ResponseCache,
    retry: RetryPolicy,
    in_flight: InFlight,
}

impl Gateway {
    pub fn new(cache: ResponseCache, retry: RetryPolicy, max_in_flight: usize) -> Self {
        Self {
            backends: HashMap::new(),
            cache,
            retry,
            in_flight: InFlight::new(max_in_flight),
        }
    }

    pub fn register(&mut self, id: &str, backend: Arc<dyn Backend>) {
        self.backends.insert(id.to_string(), backend);
    }

    pub fn has_backend(&self, id: &str) -> bool {
        self.backends.contains_key(id)
    }

    pub fn max_in_flight(&self) -> usize {
        self.in_flight.limit
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let started = Instant::now();
        let backend = self
            .backends
            .get(&request.backend_id)
            .ok_or_else(|| GatewayError::UnknownBackend(request.backend_id.clone()))?;
        if !(request.temperature.is_finite() && request.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} must be >= 0",
                request.temperature
            )));
        }
        if request.max_output_chars == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_output_chars must be positive".into(),
            ));
        }
        let key = ResponseCache::key(&request.backend_id, &request.prompt.text, request.temperature);
        let finish = |text: String, cached: bool| CompletionResult {
            text: text.chars().take(request.max_output_chars).collect(),
            latency_ms: started.elapsed().as_millis() as u64,
            backend_id: request.backend_id.clone(),
            cached,
        };
        if let Some(hit) = self.cache.get(&key) {
            return Ok(finish(hit, true));
        }
        let _permit = self.in_flight.acquire();
        let mut attempt = 0u32;
        let text = loop {
            attempt += 1;
            match backend.complete(request) {
                Ok(text) => break text,
                Err(BackendFailure::Refused { status, message }) => {
                    return Err(GatewayError::BackendRefused {
                        backend: request.backend_id.clone(),
                        status,
                        message,
                    })
                }
                Err(BackendFailure::Transient(message)) => {
                    if attempt > self.retry.max_retries {
                        return Err(GatewayError::Transport {
                            backend: request.backend_id.clone(),
                            attempts: attempt,
                            message,
                        });
                    }
                    log::warn!(
                        "backend {} attempt {attempt} failed: {message}; retrying",
                        request.backend_id
                    );
                    std::thread::sleep(self.retry.delay(attempt - 1));
                }
            }
        };
        self.cache.put(&key, &text)?;
        Ok(finish(text, false))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleWeights {
    pub amount: f64,
    pub spam_reports: f64,
    pub keyword: f64,
    pub first_time_payee: f64,
}

impl Default for RuleWeights {
    fn default() -> Self {
        Self {
            amount: 0.5,
            spam_reports: 1.5,
            keyword: 1.5,
            first_time_payee: 0.5,
        }
    }
}

/// Rules of the offline oracle backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleOracleConfig {
    /// Lowercase terms; matched as whole words (or word sequences) in the memo.
    pub suspicious_keywords: Vec<String>,
    pub spam_report_threshold: u32,
    pub weights: RuleWeights,
    /// Subtracted from the fired-weight sum before the logistic.
    pub offset: f64,
    pub amount_feature: String,
    pub spam_feature: String,
    pub memo_feature: String,
    pub prior_txn_feature: String,
}

impl Default for RuleOracleConfig {
    fn default() -> Self {
        Self {
            suspicious_keywords: [
                "lottery", "prize", "kyc", "otp", "refund", "cashback", "reward", "winner",
                "investment", "urgent", "blocked", "verify",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            spam_report_threshold: 0,
            weights: RuleWeights::default(),
            offset: 1.5,
            amount_feature: "amount".into(),
            spam_feature: "payee_spam_reports".into(),
            memo_feature: "memo".into(),
            prior_txn_feature: "payer_payee_prior_txns".into(),
        }
    }
}

impl RuleOracleConfig {
    pub fn validate(&self) -> Result<(), String> {
        let w = &self.weights;
        if [w.amount, w.spam_reports, w.keyword, w.first_time_payee, self.offset]
            .iter()
            .any(|v| !v.is_finite())
        {
            return Err("rule weights and offset must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleOutcome {
    pub evaluation: Evaluation,
    pub text: String,
    pub confidence: f64,
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normalized_words(text: &str) -> String {
    let words: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    format!(" {} ", words.join(" "))
}

fn numeric_phrase(spec: &FeatureSpec, v: f64, model: &BinningModel) -> String {
    match model.get(&spec.id) {
        Some(b) => format!("{} is {} (raw: {})", spec.description, b.bucket(v), format_number(v)),
        None => format!("{} is {}", spec.description, format_number(v)),
    }
}

/// Evaluates the four rules. Each firing rule adds a fraud reason and its
/// weight; each rule that can be checked but does not fire adds a legitimacy
/// reason. Rules whose input is missing are skipped.
pub fn rule_oracle_evaluate(
    record: &TransactionRecord,
    schema: &FeatureSchema,
    model: &BinningModel,
    config: &RuleOracleConfig,
) -> RuleOutcome {
    // (signal priority position, fired, reason)
    let mut findings: Vec<(usize, bool, Reason)> = Vec::new();
    let mut score = 0.0;
    let position = |id: &str| {
        schema
            .ordered_features()
            .iter()
            .position(|f| f.id == id)
            .unwrap_or(usize::MAX)
    };
    let mut keyword_fired = false;
    let mut spam_fired = false;

    if let (Some(spec), Some(v)) = (
        schema.feature(&config.amount_feature),
        record.number(&config.amount_feature),
    ) {
        if let Ok(bucket) = model.bucket(&spec.id, v) {
            let fired = bucket >= Bucket::High;
            if fired {
                score += config.weights.amount;
            }
            let text = numeric_phrase(spec, v, model);
            let text = if fired {
                format!("{text}, unusually large for this payer")
            } else {
                format!("{text}, an ordinary amount")
            };
            findings.push((position(&spec.id), fired, Reason::known(&spec.id, &text).unwrap()));
        }
    }

    if let (Some(spec), Some(v)) = (
        schema.feature(&config.spam_feature),
        record.number(&config.spam_feature),
    ) {
        let fired = v > config.spam_report_threshold as f64;
        if fired {
            score += config.weights.spam_reports;
            spam_fired = true;
        }
        let text = numeric_phrase(spec, v, model);
        let text = if fired {
            format!("{text}; other users have flagged this payee")
        } else {
            format!("{text}; the payee has a clean report history")
        };
        findings.push((position(&spec.id), fired, Reason::known(&spec.id, &text).unwrap()));
    }

    if let Some(spec) = schema.feature(&config.memo_feature) {
        if let Some(memo) = record.value(&spec.id).as_text() {
            let hay = normalized_words(memo);
            let hit = config.suspicious_keywords.iter().find(|k| {
                let needle = normalized_words(k);
                needle.trim() != "" && hay.contains(&needle)
            });
            let text = match hit {
                Some(k) => format!("{} mentions \"{}\", a common scam lure", spec.description, k),
                None => format!("{} contains no suspicious keywords", spec.description),
            };
            if hit.is_some() {
                score += config.weights.keyword;
                keyword_fired = true;
            }
            findings.push((position(&spec.id), hit.is_some(), Reason::known(&spec.id, &text).unwrap()));
        }
    }

    if let (Some(spec), Some(v)) = (
        schema.feature(&config.prior_txn_feature),
        record.number(&config.prior_txn_feature),
    ) {
        let fired = v == 0.0;
        if fired {
            score += config.weights.first_time_payee;
        }
        let text = numeric_phrase(spec, v, model);
        let text = if fired {
            format!("{text}: first payment from this payer to the payee")
        } else {
            format!("{text}: the payer has paid this payee before")
        };
        findings.push((position(&spec.id), fired, Reason::known(&spec.id, &text).unwrap()));
    }

    findings.sort_by_key(|(pos, _, _)| *pos);
    let (fraud, legit): (Vec<_>, Vec<_>) = findings.into_iter().partition(|(_, fired, _)| *fired);
    let confidence = (logistic(score - config.offset) * 100.0).round() / 100.0;
    let verdict = if confidence >= 0.5 {
        Verdict::Fraudulent
    } else {
        Verdict::Legitimate
    };
    let mo = match verdict {
        Verdict::Legitimate => None,
        Verdict::Fraudulent if keyword_fired => Some("phishing".to_string()),
        Verdict::Fraudulent if spam_fired => Some("impersonation".to_string()),
        Verdict::Fraudulent => None,
    };
    let evaluation = Evaluation::new(
        fraud.into_iter().map(|(_, _, r)| r).collect(),
        legit.into_iter().map(|(_, _, r)| r).collect(),
        verdict,
        mo,
        confidence,
    )
    .expect("oracle output satisfies evaluation invariants");
    RuleOutcome {
        text: render_evaluation(&evaluation),
        confidence,
        evaluation,
    }
}

/// Renders a rule outcome as a classifier answer.
pub fn rule_oracle_label_text(outcome: &RuleOutcome) -> String {
    let e = &outcome.evaluation;
    let label = e.verdict().label();
    let explanation = match e.fraud_reasons().first() {
        Some(r) if e.verdict() == Verdict::Fraudulent => r.text.clone(),
        _ => e
            .legit_reasons()
            .first()
            .map(|r| r.text.clone())
            .unwrap_or_else(|| "no risk signals fired".to_string()),
    };
    format!("{label}\n{explanation}\nCONFIDENCE: {}\n", outcome.confidence)
}

/// Deterministic offline backend driven by [`rule_oracle_evaluate`].
pub struct RuleOracle {
    schema: Arc<FeatureSchema>,
    model: Arc<BinningModel>,
    config: RuleOracleConfig,
}

impl RuleOracle {
    pub fn new(schema: Arc<FeatureSchema>, model: Arc<BinningModel>, config: RuleOracleConfig) -> Self {
        Self {
            schema,
            model,
            config,
        }
    }
}

impl Backend for RuleOracle {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendFailure> {
        let record = request.record.as_ref().ok_or_else(|| BackendFailure::Refused {
            status: 400,
            message: "the rule oracle needs the transaction record attached".into(),
        })?;
        let outcome = rule_oracle_evaluate(record, &self.schema, &self.model, &self.config);
        Ok(match request.prompt.kind {
            PromptKind::Reasoning => outcome.text,
            PromptKind::Classifier => rule_oracle_label_text(&outcome),
        })
    }
}

/// Generic chat-completion endpoint. The request body is `request_template`
/// with the prompt (and optionally model and temperature) written at dotted
/// paths; the completion is read from `response_path`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    pub id: String,
    pub base_url: String,
    pub auth_header: String,
    /// Environment variable holding the bearer token.
    pub token_env: Option<String>,
    pub model: Option<String>,
    pub request_template: Value,
    pub prompt_path: String,
    pub model_path: Option<String>,
    pub temperature_path: Option<String>,
    pub response_path: String,
    pub timeout_ms: u64,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            id: "http".into(),
            base_url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            auth_header: "Authorization".into(),
            token_env: None,
            model: None,
            request_template: serde_json::json!({"messages": [{"role": "user", "content": ""}]}),
            prompt_path: "messages.0.content".into(),
            model_path: Some("model".into()),
            temperature_path: Some("temperature".into()),
            response_path: "choices.0.message.content".into(),
            timeout_ms: 60_000,
        }
    }
}

/// Writes `value` at a dotted path (`a.0.b`), creating objects as needed.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), String> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| format!("{path}: {part:?} is not an index"))?;
                items
                    .get_mut(idx)
                    .ok_or_else(|| format!("{path}: index {idx} out of range"))?
            }
            Value::Object(map) => map.entry(part.to_string()).or_insert(if last {
                Value::Null
            } else {
                Value::Object(Default::default())
            }),
            _ => return Err(format!("{path}: cannot descend into a scalar at {part:?}")),
        };
    }
    *cur = value;
    Ok(())
}

pub fn get_path<'a>(root: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(root, |cur, part| match cur {
        Value::Array(items) => items.get(part.parse::<usize>().ok()?),
        Value::Object(map) => map.get(part),
        _ => None,
    })
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    pub fn build_body(&self, request: &CompletionRequest) -> Result<Value, String> {
        let c = &self.config;
        let mut body = c.request_template.clone();
        set_path(&mut body, &c.prompt_path, Value::String(request.prompt.text.clone()))?;
        if let (Some(path), Some(model)) = (&c.model_path, &c.model) {
            set_path(&mut body, path, Value::String(model.clone()))?;
        }
        if let Some(path) = &c.temperature_path {
            set_path(&mut body, path, serde_json::json!(request.temperature))?;
        }
        Ok(body)
    }
}

impl Backend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendFailure> {
        let c = &self.config;
        let body = self.build_body(request).map_err(|message| BackendFailure::Refused {
            status: 0,
            message,
        })?;
        let mut req = self.agent.post(&c.base_url);
        if let Some(var) = &c.token_env {
            let token = std::env::var(var).map_err(|_| BackendFailure::Refused {
                status: 0,
                message: format!("environment variable {var} is not set"),
            })?;
            req = req.header(c.auth_header.as_str(), format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| BackendFailure::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendFailure::Transient(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(BackendFailure::Transient(format!("status {status}: {text}")));
        }
        if !(200..300).contains(&status) {
            return Err(BackendFailure::Refused {
                status,
                message: text,
            });
        }
        let json: Value = serde_json::from_str(&text).map_err(|e| BackendFailure::Refused {
            status,
            message: format!("response is not JSON: {e}"),
        })?;
        match get_path(&json, &c.response_path) {
            Some(Value::String(s)) => Ok(s.clone()),
            _ => Err(BackendFailure::Refused {
                status,
                message: format!("response has no string at {}", c.response_path),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::parse_evaluation;
    use crate::featurize::FeatureBins;
    use crate::prompt::PromptKind;
    use std::collections::BTreeMap;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn model() -> BinningModel {
        let mut m = BTreeMap::new();
        m.insert(
            "amount".to_string(),
            FeatureBins {
                boundaries: [100.0, 500.0, 1000.0, 5000.0],
                n: 20,
            },
        );
        m.insert(
            "payee_spam_reports".to_string(),
            FeatureBins {
                boundaries: [0.0, 0.0, 1.0, 2.0],
                n: 20,
            },
        );
        BinningModel::from_bins(m).unwrap()
    }

    fn prompt(kind: PromptKind, text: &str) -> Prompt {
        Prompt {
            kind,
            text: text.to_string(),
            exemplar_ids: vec![],
            signal_order: vec![],
            template_version: "t".into(),
            record_id: "r".into(),
        }
    }

    fn clean_record() -> TransactionRecord {
        TransactionRecord::new("r", "qr_scan")
            .with("amount", 50.0)
            .with("memo", "rent for march")
            .with("payee_spam_reports", 0.0)
            .with("payer_payee_prior_txns", 4.0)
    }

    #[test]
    fn no_rules_fire() {
        let s = FeatureSchema::bundled();
        let out = rule_oracle_evaluate(&clean_record(), &s, &model(), &RuleOracleConfig::default());
        assert_eq!(out.evaluation.verdict(), Verdict::Legitimate);
        assert!(out.evaluation.fraud_reasons().is_empty());
        assert_eq!(out.evaluation.legit_reasons().len(), 4);
        assert_eq!(out.evaluation.mo(), None);
        assert_eq!(out.confidence, 0.18);
    }

    #[test]
    fn keyword_and_spam_example() {
        let s = FeatureSchema::bundled();
        let config = RuleOracleConfig {
            spam_report_threshold: 0,
            weights: RuleWeights {
                amount: 1.0,
                spam_reports: 1.0,
                keyword: 1.0,
                first_time_payee: 1.0,
            },
            offset: 1.0,
            ..Default::default()
        };
        let r = clean_record()
            .with("memo", "You won the LOTTERY, pay fee")
            .with("payee_spam_reports", 3.0);
        let out = rule_oracle_evaluate(&r, &s, &model(), &config);
        // logistic(1.0) = 0.7310585786...
        assert_eq!(out.confidence, 0.73);
        assert_eq!(out.evaluation.verdict(), Verdict::Fraudulent);
        assert_eq!(out.evaluation.mo(), Some("phishing"));
        assert_eq!(out.evaluation.fraud_reasons().len(), 2);
        assert_eq!(out.evaluation.fraud_reasons()[0].signal.raw_id(), "memo");
        let parsed = parse_evaluation(&out.text, &s).unwrap();
        assert!(parsed.warnings.is_empty());
        assert_eq!(parsed.evaluation, out.evaluation);
    }

    #[test]
    fn keywords_match_whole_words() {
        let s = FeatureSchema::bundled();
        let r = clean_record().with("memo", "hotpot dinner");
        let out = rule_oracle_evaluate(&r, &s, &model(), &RuleOracleConfig::default());
        assert!(out.evaluation.fraud_reasons().is_empty());
    }

    #[test]
    fn oracle_reasons_are_consistent_with_the_record() {
        let s = FeatureSchema::bundled();
        let m = model();
        let r = clean_record()
            .with("amount", 7000.0)
            .with("payee_spam_reports", 2.0)
            .with("payer_payee_prior_txns", 0.0);
        let out = rule_oracle_evaluate(&r, &s, &m, &RuleOracleConfig::default());
        for (_, reason) in out.evaluation.tagged_reasons() {
            assert_eq!(
                crate::evaluation::canonicalize_reason(reason, &r, &s, &m),
                crate::evaluation::ReasonCheck::Consistent,
                "{reason:?}"
            );
        }
    }

    fn gateway_with_mock() -> Gateway {
        let s = Arc::new(FeatureSchema::bundled());
        let mut g = Gateway::new(ResponseCache::in_memory(), RetryPolicy::default(), 4);
        g.register(
            MOCK_BACKEND,
            Arc::new(RuleOracle::new(s, Arc::new(model()), RuleOracleConfig::default())),
        );
        g
    }

    #[test]
    fn mock_is_cached_on_second_call() {
        let g = gateway_with_mock();
        let req = CompletionRequest::new(prompt(PromptKind::Reasoning, "p"), MOCK_BACKEND)
            .with_record(Arc::new(clean_record()));
        let a = g.complete(&req).unwrap();
        let b = g.complete(&req).unwrap();
        assert!(!a.cached);
        assert!(b.cached);
        assert_eq!(a.text, b.text);
    }

    #[test]
    fn unknown_backend() {
        let g = gateway_with_mock();
        let req = CompletionRequest::new(prompt(PromptKind::Reasoning, "p"), "nope");
        assert!(matches!(g.complete(&req), Err(GatewayError::UnknownBackend(_))));
    }

    #[test]
    fn invalid_requests() {
        let g = gateway_with_mock();
        let mut req = CompletionRequest::new(prompt(PromptKind::Reasoning, "p"), MOCK_BACKEND);
        req.temperature = -1.0;
        assert!(matches!(g.complete(&req), Err(GatewayError::InvalidRequest(_))));
        req.temperature = 0.0;
        req.max_output_chars = 0;
        assert!(matches!(g.complete(&req), Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn output_is_truncated() {
        let g = gateway_with_mock();
        let mut req = CompletionRequest::new(prompt(PromptKind::Classifier, "p"), MOCK_BACKEND)
            .with_record(Arc::new(clean_record()));
        req.max_output_chars = 8;
        assert_eq!(g.complete(&req).unwrap().text.chars().count(), 8);
    }

    struct Flaky {
        failures: usize,
        calls: AtomicUsize,
        refuse: bool,
    }

    impl Backend for Flaky {
        fn complete(&self, _: &CompletionRequest) -> Result<String, BackendFailure> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if self.refuse {
                return Err(BackendFailure::Refused {
                    status: 400,
                    message: "bad".into(),
                });
            }
            if n < self.failures {
                Err(BackendFailure::Transient("timeout".into()))
            } else {
                Ok("VERDICT: legitimate".into())
            }
        }
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            max_retries: 2,
            base_delay_ms: 1,
            max_delay_ms: 2,
        }
    }

    #[test]
    fn retries_transient_failures() {
        let flaky = Arc::new(Flaky {
            failures: 2,
            calls: AtomicUsize::new(0),
            refuse: false,
        });
        let mut g = Gateway::new(ResponseCache::in_memory(), fast_retry(), 2);
        g.register("f", flaky.clone());
        let req = CompletionRequest::new(prompt(PromptKind::Reasoning, "p"), "f");
        assert_eq!(g.complete(&req).unwrap().text, "VERDICT: legitimate");
        assert_eq!(flaky.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gives_up_after_retry_limit() {
        let flaky = Arc::new(Flaky {
            failures: 10,
            calls: AtomicUsize::new(0),
            refuse: false,
        });
        let mut g = Gateway::new(ResponseCache::in_memory(), fast_retry(), 2);
        g.register("f", flaky.clone());
        let req = CompletionRequest::new(prompt(PromptKind::Reasoning, "p"), "f");
        assert!(matches!(
            g.complete(&req),
            Err(GatewayError::Transport { attempts: 3, .. })
        ));
    }

    #[test]
    fn refusals_are_not_retried() {
        let flaky = Arc::new(Flaky {
            failures: 0,
            calls: AtomicUsize::new(0),
            refuse: true,
        });
        let mut g = Gateway::new(ResponseCache::in_memory(), fast_retry(), 2);
        g.register("f", flaky.clone());
        let req = CompletionRequest::new(prompt(PromptKind::Reasoning, "p"), "f");
        assert!(matches!(g.complete(&req), Err(GatewayError::BackendRefused { status: 400, .. })));
        assert_eq!(flaky.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn disk_cache_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let key = ResponseCache::key("b", "prompt", 0.0);
        ResponseCache::on_disk(dir.path()).unwrap().put(&key, "answer").unwrap();
        let reopened = ResponseCache::on_disk(dir.path()).unwrap();
        assert_eq!(reopened.get(&key).as_deref(), Some("answer"));
        assert!(dir.path().join(format!("{key}.txt")).exists());
        assert_ne!(key, ResponseCache::key("b", "prompt", 0.5));
        assert_ne!(key, ResponseCache::key("c", "prompt", 0.0));
    }

    #[test]
    fn dotted_paths() {
        let mut v = serde_json::json!({"messages": [{"role": "user", "content": ""}]});
        set_path(&mut v, "messages.0.content", "hi".into()).unwrap();
        set_path(&mut v, "options.temperature", 0.5.into()).unwrap();
        assert_eq!(get_path(&v, "messages.0.content").unwrap(), "hi");
        assert_eq!(get_path(&v, "options.temperature").unwrap(), 0.5);
        assert!(set_path(&mut v, "messages.3.content", "x".into()).is_err());
        assert!(get_path(&v, "choices.0").is_none());
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy {
            max_retries: 5,
            base_delay_ms: 100,
            max_delay_ms: 350,
        };
        assert_eq!(p.delay(0), Duration::from_millis(100));
        assert_eq!(p.delay(1), Duration::from_millis(200));
        assert_eq!(p.delay(2), Duration::from_millis(350));
    }
}
