use std::sync::Arc;
use std::time::Duration;

use scamlens::backend::{
    Backend, BackendFailure, CompletionRequest, Gateway, ResponseCache, RetryPolicy, RuleOracle, RuleOracleConfig,
    MOCK_BACKEND,
};
use scamlens::featurize::fit_bins;
use scamlens::pipeline::{select_exemplars, Assistant};
use scamlens::prompt::{PromptConfig, PromptKind};
use scamlens::review::http::{serve, ServiceState, REVIEWER_HEADER};
use scamlens::review::{ManualClock, ReviewStore};
use scamlens::schema::FeatureSchema;
use scamlens::synth::{generate, SynthConfig};
use serde_json::{json, Value};
use tokio::sync::oneshot;

struct Garbage;

impl Backend for Garbage {
    fn complete(&self, _: &CompletionRequest) -> Result<String, BackendFailure> {
        Ok("I cannot decide.".into())
    }
}

struct Service {
    base: String,
    agent: ureq::Agent,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
    records: Vec<Value>,
}

impl Drop for Service {
    fn drop(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn start(backend_id: &str, store_path: Option<&std::path::Path>) -> Service {
    let (data, _) = generate(&SynthConfig { n: 120, ..SynthConfig::default() });
    let schema = Arc::new(FeatureSchema::bundled());
    let model = Arc::new(fit_bins(&data, &schema).unwrap());
    let mut gateway = Gateway::new(ResponseCache::in_memory(), RetryPolicy::default(), 4);
    gateway.register(
        MOCK_BACKEND,
        Arc::new(RuleOracle::new(schema.clone(), model.clone(), RuleOracleConfig::default())),
    );
    gateway.register("garbage", Arc::new(Garbage));
    let cfg = PromptConfig::default();
    let exemplars = select_exemplars(&data, PromptKind::Reasoning, &schema, &model, &cfg).unwrap();
    let assistant = Assistant {
        schema,
        model,
        gateway: Arc::new(gateway),
        backend_id: backend_id.into(),
        kind: PromptKind::Reasoning,
        prompt_config: cfg,
        exemplars,
        temperature: 0.0,
        max_output_chars: 8192,
    };
    let clock = Arc::new(ManualClock::new(1_000));
    let lease = Duration::from_secs(1800);
    let store = match store_path {
        Some(p) => ReviewStore::open(p, clock, lease).unwrap(),
        None => ReviewStore::in_memory(clock, lease),
    };
    let state = ServiceState {
        store: Arc::new(store),
        assistant: Arc::new(assistant),
    };
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let (addr_tx, addr_rx) = std::sync::mpsc::channel();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            addr_tx.send(listener.local_addr().unwrap()).unwrap();
            serve(listener, state, async {
                let _ = stop_rx.await;
            })
            .await
            .unwrap();
        });
    });
    let addr = addr_rx.recv().unwrap();
    let agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(10)))
        .http_status_as_error(false)
        .build()
        .into();
    let records = data
        .iter()
        .take(5)
        .map(|t| serde_json::to_value(&t.record).unwrap())
        .collect();
    Service {
        base: format!("http://{addr}"),
        agent,
        stop: Some(stop_tx),
        thread: Some(thread),
        records,
    }
}

impl Service {
    fn get(&self, path: &str) -> (u16, String, Option<String>) {
        let mut r = self.agent.get(&format!("{}{path}", self.base)).call().unwrap();
        let count = r.headers().get("x-record-count").map(|v| v.to_str().unwrap().to_string());
        (r.status().as_u16(), r.body_mut().read_to_string().unwrap(), count)
    }

    fn get_json(&self, path: &str) -> (u16, Value) {
        let (status, body, _) = self.get(path);
        (status, serde_json::from_str(&body).unwrap_or(Value::Null))
    }

    fn post(&self, path: &str, body: &Value) -> (u16, Value) {
        let mut r = self
            .agent
            .post(&format!("{}{path}", self.base))
            .header(REVIEWER_HEADER, "hdr-reviewer")
            .send_json(body)
            .unwrap();
        let status = r.status().as_u16();
        let text = r.body_mut().read_to_string().unwrap();
        (status, serde_json::from_str(&text).unwrap_or(Value::Null))
    }
}

#[test]
fn enqueue_is_idempotent_and_reports_rejections() {
    let s = start(MOCK_BACKEND, None);
    let mut batch = s.records.clone();
    batch.push(json!({"id": "broken", "mode": "telepathy", "timestamp": 0, "values": {}}));
    let (status, body) = s.post("/v1/transactions", &json!({ "records": batch }));
    assert_eq!(status, 200);
    assert_eq!(body["accepted"], 5);
    assert_eq!(body["rejected"], 1);
    assert_eq!(body["results"][5]["error"]["code"], "Validation");
    for r in body["results"].as_array().unwrap().iter().take(5) {
        assert_eq!(r["created"], true);
    }

    let (status, again) = s.post("/v1/transactions", &Value::Array(s.records.clone()));
    assert_eq!(status, 200);
    for (a, b) in again["results"].as_array().unwrap().iter().zip(body["results"].as_array().unwrap()) {
        assert_eq!(a["created"], false);
        assert_eq!(a["case_id"], b["case_id"]);
    }
    let (_, q) = s.get_json("/v1/queue");
    assert_eq!(q["total"], 5);
    assert_eq!(q["pending"], 5);

    let (status, err) = s.post("/v1/transactions", &json!({"records": "nope"}));
    assert_eq!(status, 422);
    assert!(err["code"].is_string());
}

#[test]
fn review_cycle_and_errors() {
    let s = start(MOCK_BACKEND, None);
    s.post("/v1/transactions", &Value::Array(s.records[..2].to_vec()));

    let (status, _) = s.get_json("/v1/review/next");
    assert_eq!(status, 422, "reviewer id is required");

    let (status, first) = s.get_json("/v1/review/next?reviewer=alice");
    assert_eq!(status, 200);
    assert_eq!(first["status"], "in_review");
    assert_eq!(first["reviewer"], "alice");
    assert!(!first["features"].as_array().unwrap().is_empty());
    let case_id = first["case_id"].as_str().unwrap().to_string();

    let (status, again) = s.get_json("/v1/review/next?reviewer=alice");
    assert_eq!(status, 200);
    assert_eq!(again["case_id"], case_id.as_str(), "a reviewer keeps their lease");

    let (status, second) = s.get_json("/v1/review/next?reviewer=bob");
    assert_eq!(status, 200);
    assert_ne!(second["case_id"], case_id.as_str());
    let (status, _) = s.get_json("/v1/review/next?reviewer=carol");
    assert_eq!(status, 204);

    let verdict_path = format!("/v1/review/{case_id}/verdict");
    let (status, err) = s.post(&verdict_path, &json!({"reviewer": "bob", "verdict": "scam"}));
    assert_eq!(status, 409);
    assert_eq!(err["code"], "WrongReviewer");
    let (status, err) = s.post(&verdict_path, &json!({"reviewer": "alice", "verdict": "perhaps"}));
    assert_eq!(status, 422, "{err}");
    let (status, decided) = s.post(&verdict_path, &json!({"reviewer": "alice", "verdict": "scam"}));
    assert_eq!(status, 200);
    assert_eq!(decided["status"], "decided");
    assert_eq!(decided["verdict"], "scam");
    let (status, err) = s.post(&verdict_path, &json!({"reviewer": "alice", "verdict": "not_scam"}));
    assert_eq!(status, 409);
    assert_eq!(err["code"], "NotInReview");

    let (status, err) = s.post("/v1/review/case-999/verdict", &json!({"reviewer": "alice", "verdict": "scam"}));
    assert_eq!(status, 404);
    assert_eq!(err["code"], "UnknownCase");
    let (status, _) = s.get_json("/v1/cases/case-999");
    assert_eq!(status, 404);

    let fb_path = format!("/v1/review/{case_id}/feedback");
    let polarity = if decided["assistant"]["evaluation"]["fraud_reasons"].as_array().unwrap().is_empty() {
        "supports_legitimacy"
    } else {
        "supports_fraud"
    };
    let (status, _) = s.post(&fb_path, &json!({"polarity": polarity, "reason_index": 0, "rating": "down", "note": "not the point"}));
    assert_eq!(status, 201);
    let (status, err) = s.post(&fb_path, &json!({"polarity": polarity, "reason_index": 99, "rating": "up"}));
    assert_eq!(status, 422);
    assert_eq!(err["code"], "UnknownReason");

    let (status, case) = s.get_json(&format!("/v1/cases/{case_id}"));
    assert_eq!(status, 200);
    assert_eq!(case["feedback"][0]["note"], "not the point");
    assert_eq!(case["feedback"][0]["reviewer"], "hdr-reviewer");

    let (status, body, count) = s.get("/v1/export/decisions");
    assert_eq!(status, 200);
    assert_eq!(count.as_deref(), Some("1"));
    let line: Value = serde_json::from_str(body.lines().next().unwrap()).unwrap();
    assert_eq!(line["label"], "scam");
    assert_eq!(line["feedback"][0]["note"], "not the point");

    let (status, report) = s.get_json("/v1/metrics/report");
    assert_eq!(status, 200);
    assert_eq!(report["predictions"], 1);
}

#[test]
fn report_before_any_decision_is_a_notice() {
    let s = start(MOCK_BACKEND, None);
    let (status, body) = s.get_json("/v1/metrics/report");
    assert_eq!(status, 200);
    assert!(body["notice"].is_string());
    assert_eq!(body["counts"]["total"], 0);
    let (status, text, count) = s.get("/v1/export/decisions");
    assert_eq!(status, 200);
    assert!(text.is_empty());
    assert_eq!(count.as_deref(), Some("0"));
}

#[test]
fn unparseable_completions_are_queued_and_flagged() {
    let s = start("garbage", None);
    let (status, body) = s.post("/v1/transactions", &Value::Array(s.records[..1].to_vec()));
    assert_eq!(status, 200);
    assert_eq!(body["accepted"], 1);
    assert_eq!(body["results"][0]["unparsed"], true);
    let (_, case) = s.get_json("/v1/review/next?reviewer=dana");
    assert!(case["assistant"]["parse_error"].is_string());
    assert_eq!(case["assistant"]["raw_text"], "I cannot decide.");
}

#[test]
fn decisions_survive_a_restart() {
    let dir = tempfile::TempDir::new().unwrap();
    let log = dir.path().join("events.jsonl");
    let case_id;
    {
        let s = start(MOCK_BACKEND, Some(&log));
        s.post("/v1/transactions", &Value::Array(s.records.clone()));
        let (_, c) = s.get_json("/v1/review/next?reviewer=erin");
        case_id = c["case_id"].as_str().unwrap().to_string();
        let (status, _) = s.post(&format!("/v1/review/{case_id}/verdict"), &json!({"reviewer": "erin", "verdict": "not_scam"}));
        assert_eq!(status, 200);
    }
    let s = start(MOCK_BACKEND, Some(&log));
    let (_, q) = s.get_json("/v1/queue");
    assert_eq!(q["total"], 5);
    assert_eq!(q["decided"], 1);
    let (_, c) = s.get_json(&format!("/v1/cases/{case_id}"));
    assert_eq!(c["verdict"], "not_scam");
}
