//! Classifier and reasoning prompts, plus fine-tuning pairs.
//!
//! Prose lives in a template file split into `## <section>` blocks; this
//! module only arranges the blocks around the serialized transaction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{render_evaluation, Evaluation, Reason, SignalRef, Verdict};
use crate::featurize::{serialize_record, BinningModel, FeaturizeError, SerializeOptions};
use crate::schema::{FeatureSchema, Label, LabeledTransaction, Polarity, TransactionRecord};

const BUNDLED_TEMPLATE: &str = include_str!("../templates/v1.md");

/// Upper bound on classifier exemplars.
pub const MAX_CLASSIFIER_EXEMPLARS: usize = 8;

pub const DEFAULT_REASONING_EXEMPLARS: usize = 2;

const REQUIRED_SECTIONS: [&str; 5] = [
    "version",
    "context",
    "classifier_instructions",
    "reasoning_role",
    "reasoning_task",
];

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error(transparent)]
    Featurize(#[from] FeaturizeError),
    #[error("template is missing section {0:?}")]
    MissingSection(String),
    #[error("template repeats section {0:?}")]
    DuplicateSection(String),
    #[error("reasoning prompts need exactly {expected} exemplars, got {found}")]
    WrongExemplarCount { expected: usize, found: usize },
    #[error("classifier prompts take at most {MAX_CLASSIFIER_EXEMPLARS} exemplars, got {0}")]
    TooManyExemplars(usize),
    #[error("exemplar {0:?} has the wrong answer kind for this prompt")]
    WrongExemplarKind(String),
    #[error("exemplar {0:?}: verdict disagrees with its label")]
    InconsistentExemplar(String),
    #[error("prompt is {len} characters, above the limit of {limit}")]
    TooLong { len: usize, limit: usize },
}

/// Prompt prose, keyed by section name.
#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    sections: BTreeMap<String, String>,
}

impl Templates {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut sections = BTreeMap::new();
        let mut current: Option<(String, Vec<&str>)> = None;
        let flush = |cur: Option<(String, Vec<&str>)>,
                         sections: &mut BTreeMap<String, String>|
         -> Result<(), PromptError> {
            if let Some((name, lines)) = cur {
                let body = lines.join("\n").trim().to_string();
                if sections.insert(name.clone(), body).is_some() {
                    return Err(PromptError::DuplicateSection(name));
                }
            }
            Ok(())
        };
        for line in text.lines() {
            if let Some(name) = line.strip_prefix("## ") {
                flush(current.take(), &mut sections)?;
                current = Some((name.trim().to_string(), Vec::new()));
            } else if let Some((_, lines)) = current.as_mut() {
                lines.push(line);
            }
        }
        flush(current.take(), &mut sections)?;
        for s in REQUIRED_SECTIONS {
            if !sections.contains_key(s) {
                return Err(PromptError::MissingSection(s.to_string()));
            }
        }
        Ok(Self { sections })
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_TEMPLATE).expect("bundled template is valid")
    }

    pub fn section(&self, name: &str) -> &str {
        self.sections.get(name).map(String::as_str).unwrap_or("")
    }

    pub fn version(&self) -> &str {
        self.section("version")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptConfig {
    pub templates: Templates,
    pub serialize: SerializeOptions,
    /// When false the domain background prose is left out.
    pub include_text_context: bool,
    /// Required reasoning exemplar count; `None` accepts any number.
    pub reasoning_exemplars: Option<usize>,
    pub max_chars: Option<usize>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            templates: Templates::bundled(),
            serialize: SerializeOptions::default(),
            include_text_context: true,
            reasoning_exemplars: Some(DEFAULT_REASONING_EXEMPLARS),
            max_chars: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Classifier,
    Reasoning,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prompt {
    pub kind: PromptKind,
    pub text: String,
    pub exemplar_ids: Vec<String>,
    pub signal_order: Vec<String>,
    pub template_version: String,
    pub record_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExemplarAnswer {
    Label { label: Label, explanation: String },
    Evaluation(Evaluation),
}

/// A worked example embedded into a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub id: String,
    pub serialized_record: String,
    pub answer: ExemplarAnswer,
}

impl Exemplar {
    pub fn classifier(id: &str, serialized_record: String, label: Label, explanation: &str) -> Self {
        Self {
            id: id.to_string(),
            serialized_record,
            answer: ExemplarAnswer::Label {
                label,
                explanation: explanation.split_whitespace().collect::<Vec<_>>().join(" "),
            },
        }
    }

    pub fn reasoning(
        id: &str,
        serialized_record: String,
        label: Label,
        evaluation: Evaluation,
    ) -> Result<Self, PromptError> {
        if Verdict::from_label(label) != evaluation.verdict() {
            return Err(PromptError::InconsistentExemplar(id.to_string()));
        }
        Ok(Self {
            id: id.to_string(),
            serialized_record,
            answer: ExemplarAnswer::Evaluation(evaluation),
        })
    }

    /// Builds a reasoning exemplar from a reviewer-annotated transaction: the
    /// reviewer's notes become the reason lists and the label the verdict.
    pub fn from_reviewed(
        txn: &LabeledTransaction,
        schema: &FeatureSchema,
        model: &BinningModel,
        opts: &SerializeOptions,
    ) -> Result<Self, PromptError> {
        let serialized = serialize_record(&txn.record, schema, model, opts)?;
        let mut fraud = Vec::new();
        let mut legit = Vec::new();
        for note in &txn.reviewer_notes {
            let Ok(reason) = Reason::new(SignalRef::Known(note.tag.signal_id.clone()), &note.free_text)
            else {
                continue;
            };
            match note.tag.polarity {
                Polarity::SupportsFraud => fraud.push(reason),
                Polarity::SupportsLegitimacy => legit.push(reason),
            }
        }
        let (mo, confidence) = match txn.label {
            Label::Scam => (txn.mo.clone(), 0.9),
            Label::NotScam => (None, 0.1),
        };
        let evaluation = Evaluation::new(fraud, legit, Verdict::from_label(txn.label), mo, confidence)
            .map_err(|_| PromptError::InconsistentExemplar(txn.record.id.clone()))?;
        Self::reasoning(&txn.record.id, serialized, txn.label, evaluation)
    }

    fn label_explanation(&self) -> Option<(Label, &str)> {
        match &self.answer {
            ExemplarAnswer::Label { label, explanation } => Some((*label, explanation)),
            ExemplarAnswer::Evaluation(_) => None,
        }
    }
}

fn finish(
    kind: PromptKind,
    text: String,
    record: &TransactionRecord,
    schema: &FeatureSchema,
    exemplars: &[Exemplar],
    cfg: &PromptConfig,
) -> Result<Prompt, PromptError> {
    let len = text.chars().count();
    if let Some(limit) = cfg.max_chars {
        if len > limit {
            return Err(PromptError::TooLong { len, limit });
        }
    }
    Ok(Prompt {
        kind,
        text,
        exemplar_ids: exemplars.iter().map(|e| e.id.clone()).collect(),
        signal_order: schema.signal_priority().to_vec(),
        template_version: cfg.templates.version().to_string(),
        record_id: record.id.clone(),
    })
}

/// Context, feature descriptions, instructions, optional examples, then the
/// transaction.
pub fn build_classifier_prompt(
    record: &TransactionRecord,
    schema: &FeatureSchema,
    model: &BinningModel,
    exemplars: &[Exemplar],
    cfg: &PromptConfig,
) -> Result<Prompt, PromptError> {
    if exemplars.len() > MAX_CLASSIFIER_EXEMPLARS {
        return Err(PromptError::TooManyExemplars(exemplars.len()));
    }
    let serialized = serialize_record(record, schema, model, &cfg.serialize)?;
    let t = &cfg.templates;
    let mut text = String::new();
    if cfg.include_text_context {
        text.push_str("CONTEXT:\n");
        text.push_str(t.section("context"));
        text.push_str("\n\n");
    }
    text.push_str("FEATURE DESCRIPTIONS:\n");
    for f in schema.features() {
        text.push_str(&format!("- {}: {}\n", f.id, f.description));
    }
    text.push_str("\nINSTRUCTIONS:\n");
    text.push_str(t.section("classifier_instructions"));
    text.push_str("\n\n");
    if !exemplars.is_empty() {
        text.push_str("EXAMPLES:\n");
        for (i, ex) in exemplars.iter().enumerate() {
            let (label, explanation) = ex
                .label_explanation()
                .ok_or_else(|| PromptError::WrongExemplarKind(ex.id.clone()))?;
            text.push_str(&format!("Example {}:\n", i + 1));
            text.push_str(&ex.serialized_record);
            text.push_str(&format!("Answer:\n{label}\n{explanation}\n\n"));
        }
    }
    text.push_str("TRANSACTION:\n");
    text.push_str(&serialized);
    text.push_str("\nAnswer:\n");
    finish(PromptKind::Classifier, text, record, schema, exemplars, cfg)
}

/// Context (modes, MO types, prioritized signals), instruction, examples,
/// transaction and a trailing `EVALUATION:` cue.
pub fn build_reasoning_prompt(
    record: &TransactionRecord,
    schema: &FeatureSchema,
    model: &BinningModel,
    exemplars: &[Exemplar],
    cfg: &PromptConfig,
) -> Result<Prompt, PromptError> {
    if let Some(expected) = cfg.reasoning_exemplars {
        if exemplars.len() != expected {
            return Err(PromptError::WrongExemplarCount {
                expected,
                found: exemplars.len(),
            });
        }
    }
    let serialized = serialize_record(record, schema, model, &cfg.serialize)?;
    let t = &cfg.templates;
    let mut text = String::from("CONTEXT:\n");
    if cfg.include_text_context {
        text.push_str(t.section("context"));
        text.push('\n');
    }
    text.push_str(&format!("Modes of transaction: {}\n", schema.modes().join(", ")));
    text.push_str(&format!("MO types: {}\n", schema.mo_types().join(", ")));
    text.push_str("Signals (highest priority first):\n");
    let features = schema.ordered_features();
    let limit = cfg.serialize.max_signals.unwrap_or(features.len());
    for (i, f) in features.into_iter().take(limit).enumerate() {
        text.push_str(&format!("{}. [{}] {}\n", i + 1, f.id, f.description));
    }
    text.push_str("\nINSTRUCTION:\n");
    text.push_str(t.section("reasoning_role"));
    text.push('\n');
    text.push_str(t.section("reasoning_task"));
    text.push_str("\n\n");
    if !exemplars.is_empty() {
        text.push_str("EXAMPLES:\n");
        for (i, ex) in exemplars.iter().enumerate() {
            let ExemplarAnswer::Evaluation(e) = &ex.answer else {
                return Err(PromptError::WrongExemplarKind(ex.id.clone()));
            };
            text.push_str(&format!("Example {}:\nTRANSACTION:\n", i + 1));
            text.push_str(&ex.serialized_record);
            text.push_str("EVALUATION:\n");
            text.push_str(&render_evaluation(e));
            text.push('\n');
        }
    }
    text.push_str("TRANSACTION:\n");
    text.push_str(&serialized);
    text.push_str("\nEVALUATION:\n");
    finish(PromptKind::Reasoning, text, record, schema, exemplars, cfg)
}

pub fn build_prompt(
    kind: PromptKind,
    record: &TransactionRecord,
    schema: &FeatureSchema,
    model: &BinningModel,
    exemplars: &[Exemplar],
    cfg: &PromptConfig,
) -> Result<Prompt, PromptError> {
    match kind {
        PromptKind::Classifier => build_classifier_prompt(record, schema, model, exemplars, cfg),
        PromptKind::Reasoning => build_reasoning_prompt(record, schema, model, exemplars, cfg),
    }
}

/// One line of a fine-tuning JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetunePair {
    pub prompt: String,
    pub completion: String,
}

/// Zero-shot classifier prompt per record; the completion is the label
/// followed by the reviewer's explanation when notes exist.
pub fn emit_finetune_pairs(
    dataset: &[LabeledTransaction],
    schema: &FeatureSchema,
    model: &BinningModel,
    cfg: &PromptConfig,
) -> Result<Vec<FinetunePair>, PromptError> {
    dataset
        .iter()
        .map(|t| {
            let prompt = build_classifier_prompt(&t.record, schema, model, &[], cfg)?;
            let mut completion = t.label.as_text().to_string();
            if !t.reviewer_notes.is_empty() {
                let notes: Vec<String> = t
                    .reviewer_notes
                    .iter()
                    .map(|n| n.free_text.split_whitespace().collect::<Vec<_>>().join(" "))
                    .filter(|s| !s.is_empty())
                    .collect();
                if !notes.is_empty() {
                    completion.push('\n');
                    completion.push_str(&notes.join("; "));
                }
            }
            Ok(FinetunePair {
                prompt: prompt.text,
                completion,
            })
        })
        .collect()
}

/// JSON-Lines rendering of fine-tuning pairs.
pub fn finetune_jsonl(pairs: &[FinetunePair]) -> String {
    pairs
        .iter()
        .map(|p| serde_json::to_string(p).expect("pair serializes") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::parse_evaluation;
    use crate::featurize::FeatureBins;
    use crate::schema::ReviewerReason;

    fn model() -> BinningModel {
        let mut m = BTreeMap::new();
        for (id, b) in [
            ("amount", [100.0, 500.0, 1000.0, 5000.0]),
            ("payer_account_age_days", [30.0, 180.0, 365.0, 1000.0]),
            ("payer_txn_count", [5.0, 20.0, 50.0, 200.0]),
            ("payee_account_age_days", [30.0, 180.0, 365.0, 1000.0]),
            ("payee_txn_count", [5.0, 20.0, 50.0, 200.0]),
            ("payee_spam_reports", [0.0, 0.0, 1.0, 3.0]),
            ("payer_payee_prior_txns", [0.0, 1.0, 3.0, 10.0]),
        ] {
            m.insert(id.to_string(), FeatureBins { boundaries: b, n: 50 });
        }
        BinningModel::from_bins(m).unwrap()
    }

    fn record() -> TransactionRecord {
        TransactionRecord::new("t1", "app_intent")
            .with("amount", 2500.0)
            .with("memo", "claim your lottery prize")
            .with("payee_spam_reports", 4.0)
            .with("payer_payee_prior_txns", 0.0)
    }

    fn reviewed(id: &str, label: Label) -> LabeledTransaction {
        let mut t = LabeledTransaction::new(record().clone(), label);
        t.record.id = id.to_string();
        t.reviewer_notes = match label {
            Label::Scam => vec![ReviewerReason::new(
                "payee_spam_reports",
                Polarity::SupportsFraud,
                "payee was reported for spam",
            )],
            Label::NotScam => vec![ReviewerReason::new(
                "payer_payee_prior_txns",
                Polarity::SupportsLegitimacy,
                "payer knows the payee",
            )],
        };
        if label == Label::Scam {
            t.mo = Some("lottery_scam".into());
        }
        t
    }

    #[test]
    fn template_sections() {
        let t = Templates::bundled();
        assert_eq!(t.version(), "scamlens-prompt/v1");
        assert!(matches!(
            Templates::parse("## version\nv\n"),
            Err(PromptError::MissingSection(_))
        ));
        assert!(matches!(
            Templates::parse("## version\nv\n## version\nw\n"),
            Err(PromptError::DuplicateSection(_))
        ));
    }

    #[test]
    fn classifier_prompt_layout() {
        let s = FeatureSchema::bundled();
        let cfg = PromptConfig::default();
        let p = build_classifier_prompt(&record(), &s, &model(), &[], &cfg).unwrap();
        assert_eq!(p.kind, PromptKind::Classifier);
        assert!(!p.text.contains("EXAMPLES:"));
        let ctx = p.text.find("CONTEXT:").unwrap();
        let feat = p.text.find("FEATURE DESCRIPTIONS:").unwrap();
        let instr = p.text.find("INSTRUCTIONS:").unwrap();
        let txn = p.text.find("TRANSACTION:").unwrap();
        assert!(ctx < feat && feat < instr && instr < txn);
        let instructions = &p.text[instr..txn];
        assert!(instructions.contains("\"scam\"") && instructions.contains("\"not scam\""));
        assert_eq!(p.signal_order, s.signal_priority());
        assert_eq!(p.template_version, "scamlens-prompt/v1");
        assert!(p.text.contains("Transaction amount: high (raw: 2500)"));
    }

    #[test]
    fn each_description_listed_once() {
        let s = FeatureSchema::bundled();
        let p =
            build_classifier_prompt(&record(), &s, &model(), &[], &PromptConfig::default()).unwrap();
        let block = &p.text[p.text.find("FEATURE DESCRIPTIONS:").unwrap()..p.text.find("INSTRUCTIONS:").unwrap()];
        for f in s.features() {
            assert_eq!(block.matches(&format!(": {}\n", f.description)).count(), 1);
        }
    }

    #[test]
    fn classifier_examples_in_order() {
        let s = FeatureSchema::bundled();
        let m = model();
        let cfg = PromptConfig::default();
        let ser = serialize_record(&record(), &s, &m, &cfg.serialize).unwrap();
        let ex = vec![
            Exemplar::classifier("e1", ser.clone(), Label::Scam, "lottery bait"),
            Exemplar::classifier("e2", ser, Label::NotScam, "known payee"),
        ];
        let p = build_classifier_prompt(&record(), &s, &m, &ex, &cfg).unwrap();
        assert!(p.text.find("lottery bait").unwrap() < p.text.find("known payee").unwrap());
        assert_eq!(p.exemplar_ids, ["e1", "e2"]);
        let nine = vec![ex[0].clone(); 9];
        assert_eq!(
            build_classifier_prompt(&record(), &s, &m, &nine, &cfg),
            Err(PromptError::TooManyExemplars(9))
        );
    }

    #[test]
    fn reasoning_prompt_layout() {
        let s = FeatureSchema::bundled();
        let m = model();
        let cfg = PromptConfig::default();
        let ex: Vec<Exemplar> = [("e1", Label::Scam), ("e2", Label::NotScam)]
            .iter()
            .map(|(id, l)| Exemplar::from_reviewed(&reviewed(id, *l), &s, &m, &cfg.serialize).unwrap())
            .collect();
        let p = build_reasoning_prompt(&record(), &s, &m, &ex, &cfg).unwrap();
        for mode in ["payer_initiated_lookup", "app_intent", "qr_scan", "payment_request"] {
            assert!(p.text.contains(mode));
        }
        assert!(p.text.ends_with("EVALUATION:\n"));
        let order = ["CONTEXT:", "INSTRUCTION:", "EXAMPLES:", "\nTRANSACTION:", "\nEVALUATION:\n"];
        let pos: Vec<usize> = order.iter().map(|k| p.text.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{pos:?}");

        // exemplar evaluations parse back through the grammar
        let examples = &p.text[p.text.find("EXAMPLES:").unwrap()..p.text.rfind("TRANSACTION:").unwrap()];
        let chunks: Vec<&str> = examples.split("EVALUATION:\n").skip(1).collect();
        assert_eq!(chunks.len(), 2);
        for c in chunks {
            let body = c.split("Example").next().unwrap();
            assert!(parse_evaluation(body, &s).unwrap().warnings.is_empty());
        }

        assert_eq!(
            build_reasoning_prompt(&record(), &s, &m, &ex[..1], &cfg),
            Err(PromptError::WrongExemplarCount { expected: 2, found: 1 })
        );
    }

    #[test]
    fn swapping_signals_only_permutes_lines() {
        let s = FeatureSchema::bundled();
        let m = model();
        let cfg = PromptConfig {
            reasoning_exemplars: None,
            ..Default::default()
        };
        let mut prio = s.signal_priority().to_vec();
        prio.swap(0, 2);
        let swapped = s.with_signal_priority(prio).unwrap();
        let a = build_reasoning_prompt(&record(), &s, &m, &[], &cfg).unwrap().text;
        let b = build_reasoning_prompt(&record(), &swapped, &m, &[], &cfg).unwrap().text;
        assert_ne!(a, b);
        let strip_numbering = |t: &str| {
            let mut lines: Vec<String> = t
                .lines()
                .map(|l| match l.split_once(". [") {
                    Some((n, rest)) if n.chars().all(|c| c.is_ascii_digit()) => format!("[{rest}"),
                    _ => l.to_string(),
                })
                .collect();
            lines.sort();
            lines
        };
        assert_eq!(strip_numbering(&a), strip_numbering(&b));
    }

    #[test]
    fn text_context_ablation() {
        let s = FeatureSchema::bundled();
        let cfg = PromptConfig {
            include_text_context: false,
            ..Default::default()
        };
        let p = build_classifier_prompt(&record(), &s, &model(), &[], &cfg).unwrap();
        assert!(!p.text.contains("CONTEXT:"));
        assert!(p.text.contains("claim your lottery prize"));
    }

    #[test]
    fn max_chars_guard() {
        let s = FeatureSchema::bundled();
        let cfg = PromptConfig {
            max_chars: Some(100),
            ..Default::default()
        };
        assert!(matches!(
            build_classifier_prompt(&record(), &s, &model(), &[], &cfg),
            Err(PromptError::TooLong { limit: 100, .. })
        ));
    }

    #[test]
    fn finetune_pairs() {
        let s = FeatureSchema::bundled();
        let data = vec![
            reviewed("a", Label::Scam),
            reviewed("b", Label::NotScam),
            LabeledTransaction::new(record(), Label::NotScam),
        ];
        let pairs = emit_finetune_pairs(&data, &s, &model(), &PromptConfig::default()).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[0].completion, "scam\npayee was reported for spam");
        assert!(pairs[1].completion.starts_with("not scam"));
        assert_eq!(pairs[2].completion, "not scam");
    }

    #[test]
    fn inconsistent_exemplar_rejected() {
        let e = Evaluation::new(vec![], vec![], Verdict::Legitimate, None, 0.1).unwrap();
        assert_eq!(
            Exemplar::reasoning("x", String::new(), Label::Scam, e),
            Err(PromptError::InconsistentExemplar("x".into()))
        );
    }
}
