//! Runs the deterministic rule-oracle backend through the gateway, showing
//! the response cache.

use std::sync::Arc;

use scamlens::backend::{
    CompletionRequest, Gateway, ResponseCache, RetryPolicy, RuleOracle, RuleOracleConfig, DEFAULT_MAX_IN_FLIGHT,
    MOCK_BACKEND,
};
use scamlens::featurize::fit_bins;
use scamlens::prompt::{build_prompt, PromptConfig, PromptKind};
use scamlens::pipeline::select_exemplars;
use scamlens::schema::{FeatureSchema, TransactionRecord};
use scamlens::synth::{generate, SynthConfig};

fn main() {
    let schema = Arc::new(FeatureSchema::bundled());
    let (data, _) = generate(&SynthConfig { n: 300, ..SynthConfig::default() });
    let model = Arc::new(fit_bins(&data, &schema).unwrap());

    let mut gateway = Gateway::new(ResponseCache::in_memory(), RetryPolicy::default(), DEFAULT_MAX_IN_FLIGHT);
    gateway.register(
        MOCK_BACKEND,
        Arc::new(RuleOracle::new(schema.clone(), model.clone(), RuleOracleConfig::default())),
    );

    let record = TransactionRecord::new("demo", "payment_request")
        .with("amount", 25_000.0)
        .with("memo", "Urgent: KYC blocked, verify with OTP")
        .with("payee_spam_reports", 4.0)
        .with("payer_payee_prior_txns", 0.0);
    let cfg = PromptConfig::default();
    let exemplars = select_exemplars(&data, PromptKind::Reasoning, &schema, &model, &cfg).unwrap();
    let prompt = build_prompt(PromptKind::Reasoning, &record, &schema, &model, &exemplars, &cfg).unwrap();
    let request = CompletionRequest::new(prompt, MOCK_BACKEND).with_record(Arc::new(record));

    for _ in 0..2 {
        let out = gateway.complete(&request).unwrap();
        println!("cached: {}, latency {} ms", out.cached, out.latency_ms);
        println!("{}", out.text);
    }
}
