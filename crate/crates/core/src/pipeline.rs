//! The assistant: prompt construction, completion and parsing for one record.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{CompletionRequest, Gateway, GatewayError};
use crate::evaluation::{parse_evaluation, parse_label, Evaluation, Verdict};
use crate::featurize::{serialize_record, BinningModel};
use crate::metrics::PredictionRow;
use crate::prompt::{build_prompt, Exemplar, Prompt, PromptConfig, PromptError, PromptKind};
use crate::schema::{FeatureSchema, Label, LabeledTransaction, TransactionRecord};

#[derive(Debug, Error)]
pub enum AssistantError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("training data has no {0} example with reviewer notes to use as an exemplar")]
    NoExemplar(&'static str),
}

/// What the assistant said about one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistantOutput {
    pub kind: PromptKind,
    pub raw_text: String,
    /// Present for reasoning prompts whose completion parsed.
    pub evaluation: Option<Evaluation>,
    pub verdict: Verdict,
    pub confidence: f64,
    pub explanation: Option<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// Set when the completion could not be parsed; verdict and confidence
    /// then fall back to legitimate and 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
    #[serde(default)]
    pub template_version: String,
}

impl AssistantOutput {
    pub fn unparsed(&self) -> bool {
        self.parse_error.is_some()
    }

    pub fn from_completion(kind: PromptKind, text: &str, schema: &FeatureSchema, template_version: &str) -> Self {
        let mut out = AssistantOutput {
            kind,
            raw_text: text.to_string(),
            evaluation: None,
            verdict: Verdict::Legitimate,
            confidence: 0.0,
            explanation: None,
            warnings: Vec::new(),
            parse_error: None,
            template_version: template_version.to_string(),
        };
        match kind {
            PromptKind::Reasoning => match parse_evaluation(text, schema) {
                Ok(p) => {
                    out.verdict = p.evaluation.verdict();
                    out.confidence = p.evaluation.confidence();
                    out.warnings = p.warnings.iter().map(ToString::to_string).collect();
                    out.evaluation = Some(p.evaluation);
                }
                Err(e) => out.parse_error = Some(e.to_string()),
            },
            PromptKind::Classifier => match parse_label(text) {
                Ok(p) => {
                    out.verdict = Verdict::from_label(p.label);
                    out.confidence = p.confidence;
                    out.explanation = p.explanation;
                    out.warnings = p.warnings.iter().map(ToString::to_string).collect();
                }
                Err(e) => out.parse_error = Some(e.to_string()),
            },
        }
        if let Some(e) = &out.parse_error {
            out.warnings.push(format!("unparsed completion: {e}"));
        }
        out
    }

    pub fn prediction_row(&self, id: &str) -> PredictionRow {
        PredictionRow {
            id: id.to_string(),
            confidence: self.confidence,
            verdict: self.verdict,
            evaluation_text: self.raw_text.clone(),
            template_version: Some(self.template_version.clone()),
            warnings: self.warnings.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Assessment {
    pub prompt: Prompt,
    pub cached: bool,
    pub latency_ms: u64,
    pub output: AssistantOutput,
}

/// Exemplars drawn from training data: the first scam and the first
/// not-scam transaction that carry reviewer notes, in that order.
pub fn select_exemplars(
    train: &[LabeledTransaction],
    kind: PromptKind,
    schema: &FeatureSchema,
    model: &BinningModel,
    cfg: &PromptConfig,
) -> Result<Vec<Exemplar>, AssistantError> {
    let mut out = Vec::new();
    for (label, name) in [(Label::Scam, "scam"), (Label::NotScam, "not-scam")] {
        let Some(txn) = train
            .iter()
            .find(|t| t.label == label && !t.reviewer_notes.is_empty())
        else {
            return Err(AssistantError::NoExemplar(name));
        };
        out.push(match kind {
            PromptKind::Reasoning => Exemplar::from_reviewed(txn, schema, model, &cfg.serialize)?,
            PromptKind::Classifier => {
                let serialized = serialize_record(&txn.record, schema, model, &cfg.serialize)
                    .map_err(PromptError::from)?;
                let explanation: Vec<&str> = txn.reviewer_notes.iter().map(|n| n.free_text.as_str()).collect();
                Exemplar::classifier(txn.id(), serialized, txn.label, &explanation.join("; "))
            }
        });
    }
    Ok(out)
}

pub struct Assistant {
    pub schema: Arc<FeatureSchema>,
    pub model: Arc<BinningModel>,
    pub gateway: Arc<Gateway>,
    pub backend_id: String,
    pub kind: PromptKind,
    pub prompt_config: PromptConfig,
    pub exemplars: Vec<Exemplar>,
    pub temperature: f64,
    pub max_output_chars: usize,
}

impl Assistant {
    pub fn assess(&self, record: &TransactionRecord) -> Result<Assessment, AssistantError> {
        let prompt = build_prompt(
            self.kind,
            record,
            &self.schema,
            &self.model,
            &self.exemplars,
            &self.prompt_config,
        )?;
        let mut request = CompletionRequest::new(prompt.clone(), &self.backend_id)
            .with_record(Arc::new(record.clone()));
        request.temperature = self.temperature;
        request.max_output_chars = self.max_output_chars;
        let result = self.gateway.complete(&request)?;
        let output = AssistantOutput::from_completion(self.kind, &result.text, &self.schema, &prompt.template_version);
        Ok(Assessment {
            prompt,
            cached: result.cached,
            latency_ms: result.latency_ms,
            output,
        })
    }

    /// Assesses records on up to `workers` threads; results keep input order.
    pub fn assess_all(
        &self,
        records: &[TransactionRecord],
        workers: usize,
    ) -> Vec<Result<Assessment, AssistantError>> {
        let workers = workers.clamp(1, records.len().max(1));
        let chunk = records.len().div_ceil(workers).max(1);
        std::thread::scope(|scope| {
            let handles: Vec<_> = records
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|r| self.assess(r)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("assessment worker panicked"))
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ResponseCache, RetryPolicy, RuleOracle, RuleOracleConfig, MOCK_BACKEND};
    use crate::featurize::FeatureBins;
    use crate::schema::{Polarity, ReviewerReason};
    use std::collections::BTreeMap;

    fn model() -> BinningModel {
        let mut m = BTreeMap::new();
        for f in FeatureSchema::bundled().features() {
            if f.kind == crate::schema::FeatureKind::Numeric {
                m.insert(
                    f.id.clone(),
                    FeatureBins {
                        boundaries: [0.0, 1.0, 3.0, 10.0],
                        n: 20,
                    },
                );
            }
        }
        m.insert(
            "amount".to_string(),
            FeatureBins {
                boundaries: [100.0, 500.0, 1000.0, 5000.0],
                n: 20,
            },
        );
        BinningModel::from_bins(m).unwrap()
    }

    fn train() -> Vec<LabeledTransaction> {
        let mut scam = LabeledTransaction::new(
            TransactionRecord::new("s1", "qr_scan")
                .with("amount", 9000.0)
                .with("memo", "claim your lottery prize")
                .with("payee_spam_reports", 4.0)
                .with("payer_payee_prior_txns", 0.0),
            Label::Scam,
        );
        scam.reviewer_notes = vec![ReviewerReason::new("memo", Polarity::SupportsFraud, "lottery lure")];
        scam.mo = Some("phishing".into());
        let mut legit = LabeledTransaction::new(
            TransactionRecord::new("n1", "app_intent")
                .with("amount", 50.0)
                .with("memo", "rent")
                .with("payee_spam_reports", 0.0)
                .with("payer_payee_prior_txns", 12.0),
            Label::NotScam,
        );
        legit.reviewer_notes = vec![ReviewerReason::new(
            "payer_payee_prior_txns",
            Polarity::SupportsLegitimacy,
            "regular payee",
        )];
        vec![LabeledTransaction::new(TransactionRecord::new("x", "qr_scan"), Label::Scam), scam, legit]
    }

    fn assistant(kind: PromptKind) -> Assistant {
        let schema = Arc::new(FeatureSchema::bundled());
        let model = Arc::new(model());
        let mut gateway = Gateway::new(ResponseCache::in_memory(), RetryPolicy::default(), 4);
        gateway.register(
            MOCK_BACKEND,
            Arc::new(RuleOracle::new(schema.clone(), model.clone(), RuleOracleConfig::default())),
        );
        let cfg = PromptConfig::default();
        let exemplars = select_exemplars(&train(), kind, &schema, &model, &cfg).unwrap();
        Assistant {
            schema,
            model,
            gateway: Arc::new(gateway),
            backend_id: MOCK_BACKEND.into(),
            kind,
            prompt_config: cfg,
            exemplars,
            temperature: 0.0,
            max_output_chars: 8192,
        }
    }

    #[test]
    fn exemplars_skip_unannotated_records() {
        let s = FeatureSchema::bundled();
        let ex = select_exemplars(&train(), PromptKind::Reasoning, &s, &model(), &PromptConfig::default()).unwrap();
        let ids: Vec<&str> = ex.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["s1", "n1"]);
        let none = select_exemplars(&train()[..1], PromptKind::Reasoning, &s, &model(), &PromptConfig::default());
        assert!(matches!(none, Err(AssistantError::NoExemplar("scam"))));
    }

    #[test]
    fn reasoning_assessment() {
        let a = assistant(PromptKind::Reasoning);
        let rec = train()[1].record.clone();
        let out = a.assess(&rec).unwrap();
        assert_eq!(out.prompt.kind, PromptKind::Reasoning);
        assert_eq!(out.output.verdict, Verdict::Fraudulent);
        assert!(out.output.evaluation.is_some());
        assert!(out.output.warnings.is_empty());
        assert!(!out.cached);
        assert!(a.assess(&rec).unwrap().cached);
    }

    #[test]
    fn classifier_assessment() {
        let a = assistant(PromptKind::Classifier);
        let out = a.assess(&train()[2].record).unwrap();
        assert_eq!(out.output.verdict, Verdict::Legitimate);
        assert!(out.output.evaluation.is_none());
        assert!(out.output.explanation.is_some());
        assert!(out.output.confidence < 0.5);
    }

    #[test]
    fn garbage_is_marked_unparsed() {
        let out = AssistantOutput::from_completion(PromptKind::Reasoning, "zzz", &FeatureSchema::bundled(), "v");
        assert!(out.unparsed());
        assert_eq!(out.confidence, 0.0);
        assert_eq!(out.verdict, Verdict::Legitimate);
    }

    #[test]
    fn assess_all_keeps_order() {
        let a = assistant(PromptKind::Reasoning);
        let recs: Vec<TransactionRecord> = (0..10)
            .map(|i| TransactionRecord::new(format!("r{i}"), "qr_scan").with("amount", i as f64 * 1000.0))
            .collect();
        let out = a.assess_all(&recs, 3);
        let ids: Vec<String> = out.iter().map(|r| r.as_ref().unwrap().prompt.record_id.clone()).collect();
        let want: Vec<String> = (0..10).map(|i| format!("r{i}")).collect();
        assert_eq!(ids, want);
    }
}
