//! Scores rule-oracle predictions on a held-out split and prints the
//! threshold sweep, segments and AUC.

use std::sync::Arc;

use scamlens::backend::{rule_oracle_evaluate, RuleOracleConfig};
use scamlens::featurize::{fit_bins, stratified_split, SplitSpec};
use scamlens::metrics::{build_report, default_segments, PredictionRow, ReportInputs, ThresholdGrid};
use scamlens::schema::FeatureSchema;
use scamlens::synth::{generate, SynthConfig};

fn main() {
    let schema = Arc::new(FeatureSchema::bundled());
    let (data, _) = generate(&SynthConfig::default());
    let split = stratified_split(&data, &SplitSpec::new([0.7, 0.15, 0.15], 1).unwrap()).unwrap();
    let model = fit_bins(&split.train, &schema).unwrap();
    let cfg = RuleOracleConfig::default();

    let predictions: Vec<PredictionRow> = split
        .test
        .iter()
        .map(|t| {
            let out = rule_oracle_evaluate(&t.record, &schema, &model, &cfg);
            PredictionRow {
                id: t.id().to_string(),
                confidence: out.confidence,
                verdict: out.evaluation.verdict(),
                evaluation_text: out.text,
                template_version: None,
                warnings: vec![],
            }
        })
        .collect();

    let report = build_report(&ReportInputs {
        predictions: &predictions,
        gold: &split.test,
        annotations: None,
        schema: &schema,
        model: &model,
        segments: &default_segments(),
        grid: &ThresholdGrid::default(),
        corpus: "synthetic",
    })
    .unwrap();
    print!("{}", report.render_table());
}
