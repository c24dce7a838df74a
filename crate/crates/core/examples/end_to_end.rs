//! The whole loop in-process: synthesize, split, fit, assess with the mock
//! backend on worker threads, and report.

use std::sync::Arc;

use scamlens::backend::{Gateway, ResponseCache, RetryPolicy, RuleOracle, RuleOracleConfig, MOCK_BACKEND};
use scamlens::featurize::{fit_bins, stratified_split, SplitSpec};
use scamlens::metrics::{build_report, default_segments, ReportInputs, ThresholdGrid};
use scamlens::pipeline::{select_exemplars, Assistant};
use scamlens::prompt::{PromptConfig, PromptKind};
use scamlens::schema::{FeatureSchema, TransactionRecord};
use scamlens::synth::{generate, SynthConfig};

fn main() {
    let schema = Arc::new(FeatureSchema::bundled());
    let (data, _) = generate(&SynthConfig::default());
    let split = stratified_split(&data, &SplitSpec::new([0.7, 0.15, 0.15], 42).unwrap()).unwrap();
    let model = Arc::new(fit_bins(&split.train, &schema).unwrap());

    let mut gateway = Gateway::new(ResponseCache::in_memory(), RetryPolicy::default(), 8);
    gateway.register(
        MOCK_BACKEND,
        Arc::new(RuleOracle::new(schema.clone(), model.clone(), RuleOracleConfig::default())),
    );
    let cfg = PromptConfig::default();
    let exemplars = select_exemplars(&split.train, PromptKind::Reasoning, &schema, &model, &cfg).unwrap();
    let assistant = Assistant {
        schema: schema.clone(),
        model: model.clone(),
        gateway: Arc::new(gateway),
        backend_id: MOCK_BACKEND.into(),
        kind: PromptKind::Reasoning,
        prompt_config: cfg,
        exemplars,
        temperature: 0.0,
        max_output_chars: 8192,
    };

    let records: Vec<TransactionRecord> = split.test.iter().map(|t| t.record.clone()).collect();
    let predictions: Vec<_> = assistant
        .assess_all(&records, 8)
        .into_iter()
        .zip(&records)
        .map(|(a, r)| a.unwrap().output.prediction_row(&r.id))
        .collect();

    let report = build_report(&ReportInputs {
        predictions: &predictions,
        gold: &split.test,
        annotations: None,
        schema: &schema,
        model: &model,
        segments: &default_segments(),
        grid: &ThresholdGrid::default(),
        corpus: "synthetic test split",
    })
    .unwrap();
    print!("{}", report.render_table());
}
