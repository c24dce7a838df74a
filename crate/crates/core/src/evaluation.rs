//! The assistant's evaluation format and its tolerant parser.
//!
//! ```text
//! FRAUD_REASONS:
//! - [payee_spam_reports] Spam reports filed against the payee is very high (raw: 4)
//! LEGIT_REASONS:
//! - [payer_payee_prior_txns] Prior transactions from payer to payee is high (raw: 12)
//! VERDICT: fraudulent
//! MO: impersonation
//! CONFIDENCE: 0.82
//! ```
//!
//! Keywords are case-insensitive, prose before the first keyword is ignored,
//! and an optional `EVAL/1` version line is skipped. Classifier answers use a
//! smaller format: a `scam` / `not scam` line, an explanation, and an
//! optional `CONFIDENCE:` line.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurize::{BinningModel, Bucket, UNKNOWN};
use crate::schema::{FeatureKind, FeatureSchema, FeatureValue, Label, Polarity, TransactionRecord};

pub const EVAL_VERSION: &str = "EVAL/1";

/// Confidence assumed when the text carries none.
pub const DEFAULT_CONFIDENCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Fraudulent,
    Legitimate,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Fraudulent => "fraudulent",
            Verdict::Legitimate => "legitimate",
        }
    }

    pub fn from_label(label: Label) -> Self {
        match label {
            Label::Scam => Verdict::Fraudulent,
            Label::NotScam => Verdict::Legitimate,
        }
    }

    pub fn label(self) -> Label {
        match self {
            Verdict::Fraudulent => Label::Scam,
            Verdict::Legitimate => Label::NotScam,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        let s = s
            .trim()
            .trim_matches(|c: char| c == '*' || c == '`' || c == '"' || c == '.')
            .trim()
            .to_ascii_lowercase();
        match s.as_str() {
            "fraudulent" | "fraud" | "scam" => Some(Verdict::Fraudulent),
            "legitimate" | "legit" | "not scam" | "not_scam" | "not fraudulent" => {
                Some(Verdict::Legitimate)
            }
            _ => None,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which signal a reason refers to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum SignalRef {
    Known(String),
    /// The bracketed id (possibly empty) did not resolve to a schema feature.
    Unresolvable(String),
}

impl SignalRef {
    pub fn known_id(&self) -> Option<&str> {
        match self {
            SignalRef::Known(id) => Some(id),
            SignalRef::Unresolvable(_) => None,
        }
    }

    pub fn raw_id(&self) -> &str {
        match self {
            SignalRef::Known(id) | SignalRef::Unresolvable(id) => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reason {
    pub signal: SignalRef,
    pub text: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum EvaluationError {
    #[error("confidence {0} outside [0, 1]")]
    ConfidenceOutOfRange(f64),
    #[error("MO {0:?} given with a legitimate verdict")]
    MoWithoutFraud(String),
    #[error("reason text is empty")]
    EmptyReasonText,
}

impl Reason {
    /// Collapses whitespace so the text fits on one line.
    pub fn new(signal: SignalRef, text: &str) -> Result<Self, EvaluationError> {
        let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
        if text.is_empty() {
            return Err(EvaluationError::EmptyReasonText);
        }
        Ok(Self { signal, text })
    }

    pub fn known(signal_id: &str, text: &str) -> Result<Self, EvaluationError> {
        Self::new(SignalRef::Known(signal_id.to_string()), text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    fraud_reasons: Vec<Reason>,
    legit_reasons: Vec<Reason>,
    verdict: Verdict,
    mo: Option<String>,
    confidence: f64,
}

impl Evaluation {
    pub fn new(
        fraud_reasons: Vec<Reason>,
        legit_reasons: Vec<Reason>,
        verdict: Verdict,
        mo: Option<String>,
        confidence: f64,
    ) -> Result<Self, EvaluationError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(EvaluationError::ConfidenceOutOfRange(confidence));
        }
        let mo = mo.filter(|m| m != crate::schema::MO_NONE);
        if let (Some(m), Verdict::Legitimate) = (&mo, verdict) {
            return Err(EvaluationError::MoWithoutFraud(m.clone()));
        }
        Ok(Self {
            fraud_reasons,
            legit_reasons,
            verdict,
            mo,
            confidence,
        })
    }

    pub fn fraud_reasons(&self) -> &[Reason] {
        &self.fraud_reasons
    }

    pub fn legit_reasons(&self) -> &[Reason] {
        &self.legit_reasons
    }

    pub fn reasons(&self, polarity: Polarity) -> &[Reason] {
        match polarity {
            Polarity::SupportsFraud => &self.fraud_reasons,
            Polarity::SupportsLegitimacy => &self.legit_reasons,
        }
    }

    /// All reasons with their polarity, fraud reasons first.
    pub fn tagged_reasons(&self) -> impl Iterator<Item = (Polarity, &Reason)> {
        self.fraud_reasons
            .iter()
            .map(|r| (Polarity::SupportsFraud, r))
            .chain(
                self.legit_reasons
                    .iter()
                    .map(|r| (Polarity::SupportsLegitimacy, r)),
            )
    }

    pub fn verdict(&self) -> Verdict {
        self.verdict
    }

    pub fn mo(&self) -> Option<&str> {
        self.mo.as_deref()
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "warning", rename_all = "snake_case")]
pub enum ParseWarning {
    UnresolvableSignal { line: usize, id: String },
    UntaggedReason { line: usize },
    EmptyReasonText { line: usize },
    MissingConfidence,
    BadConfidence { line: usize, raw: String },
    ConfidenceClamped { line: usize, raw: String },
    UnrecognizedVerdict { line: usize, raw: String },
    UnknownMoType { mo: String },
    MoWithLegitimateVerdict { mo: String },
    DuplicateField { line: usize, field: &'static str },
    StrayLine { line: usize },
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseWarning::UnresolvableSignal { line, id } => {
                write!(f, "line {line}: signal [{id}] is not in the schema")
            }
            ParseWarning::UntaggedReason { line } => {
                write!(f, "line {line}: reason has no [signal_id] tag")
            }
            ParseWarning::EmptyReasonText { line } => write!(f, "line {line}: empty reason dropped"),
            ParseWarning::MissingConfidence => {
                write!(f, "no CONFIDENCE line; assuming {DEFAULT_CONFIDENCE}")
            }
            ParseWarning::BadConfidence { line, raw } => write!(
                f,
                "line {line}: unreadable confidence {raw:?}; assuming {DEFAULT_CONFIDENCE}"
            ),
            ParseWarning::ConfidenceClamped { line, raw } => {
                write!(f, "line {line}: confidence {raw:?} clamped to [0, 1]")
            }
            ParseWarning::UnrecognizedVerdict { line, raw } => {
                write!(f, "line {line}: unrecognized verdict {raw:?}")
            }
            ParseWarning::UnknownMoType { mo } => write!(f, "MO {mo:?} is not a declared type"),
            ParseWarning::MoWithLegitimateVerdict { mo } => {
                write!(f, "MO {mo:?} dropped because the verdict is legitimate")
            }
            ParseWarning::DuplicateField { line, field } => {
                write!(f, "line {line}: repeated {field}; first value kept")
            }
            ParseWarning::StrayLine { line } => {
                write!(f, "line {line}: text inside a reason list ignored")
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no VERDICT line found")]
    NoVerdictFound,
    #[error("conflicting VERDICT lines")]
    ContradictoryVerdicts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedEvaluation {
    pub evaluation: Evaluation,
    pub warnings: Vec<ParseWarning>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Keyword {
    FraudReasons,
    LegitReasons,
    Verdict,
    Mo,
    Confidence,
}

/// Splits `KEYWORD: rest` when the line starts with one of the grammar keywords.
fn keyword(line: &str) -> Option<(Keyword, &str)> {
    let line = line.trim_start_matches(|c: char| c == '#' || c == '*' || c.is_whitespace());
    let (head, rest) = line.split_once(':')?;
    let head = head
        .trim_end_matches('*')
        .trim()
        .to_ascii_uppercase()
        .replace(' ', "_");
    let kw = match head.as_str() {
        "FRAUD_REASONS" => Keyword::FraudReasons,
        "LEGIT_REASONS" | "LEGITIMACY_REASONS" => Keyword::LegitReasons,
        "VERDICT" => Keyword::Verdict,
        "MO" | "MO_TYPE" => Keyword::Mo,
        "CONFIDENCE" => Keyword::Confidence,
        _ => return None,
    };
    Some((kw, rest.trim_start_matches('*').trim()))
}

fn parse_confidence(raw: &str) -> Option<f64> {
    let raw = raw.trim().trim_matches('*').trim();
    let (num, scale) = match raw.strip_suffix('%') {
        Some(n) => (n.trim(), 100.0),
        None => (raw, 1.0),
    };
    num.parse::<f64>().ok().filter(|v| v.is_finite()).map(|v| v / scale)
}

struct ConfidenceScan {
    value: f64,
    warnings: Vec<ParseWarning>,
}

fn confidence_from(found: Option<(usize, &str)>) -> ConfidenceScan {
    let mut warnings = Vec::new();
    let value = match found {
        None => {
            warnings.push(ParseWarning::MissingConfidence);
            DEFAULT_CONFIDENCE
        }
        Some((line, raw)) => match parse_confidence(raw) {
            None => {
                warnings.push(ParseWarning::BadConfidence {
                    line,
                    raw: raw.to_string(),
                });
                DEFAULT_CONFIDENCE
            }
            Some(v) if !(0.0..=1.0).contains(&v) => {
                warnings.push(ParseWarning::ConfidenceClamped {
                    line,
                    raw: raw.to_string(),
                });
                v.clamp(0.0, 1.0)
            }
            Some(v) => v,
        },
    };
    ConfidenceScan { value, warnings }
}

/// Parses assistant output. Total over arbitrary text: returns an evaluation
/// (with warnings for anything it had to repair) or one of two errors.
pub fn parse_evaluation(text: &str, schema: &FeatureSchema) -> Result<ParsedEvaluation, ParseError> {
    let mut warnings = Vec::new();
    let mut fraud = Vec::new();
    let mut legit = Vec::new();
    let mut section: Option<Polarity> = None;
    let mut verdicts: Vec<Verdict> = Vec::new();
    let mut mo: Option<(usize, String)> = None;
    let mut confidence: Option<(usize, &str)> = None;

    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw_line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some((kw, rest)) = keyword(line) {
            match kw {
                Keyword::FraudReasons => section = Some(Polarity::SupportsFraud),
                Keyword::LegitReasons => section = Some(Polarity::SupportsLegitimacy),
                Keyword::Verdict => {
                    section = None;
                    match Verdict::parse(rest) {
                        Some(v) => verdicts.push(v),
                        None => warnings.push(ParseWarning::UnrecognizedVerdict {
                            line: line_no,
                            raw: rest.to_string(),
                        }),
                    }
                }
                Keyword::Mo => {
                    section = None;
                    if mo.is_some() {
                        warnings.push(ParseWarning::DuplicateField {
                            line: line_no,
                            field: "MO",
                        });
                    } else {
                        mo = Some((line_no, rest.to_string()));
                    }
                }
                Keyword::Confidence => {
                    section = None;
                    if confidence.is_some() {
                        warnings.push(ParseWarning::DuplicateField {
                            line: line_no,
                            field: "CONFIDENCE",
                        });
                    } else {
                        confidence = Some((line_no, rest));
                    }
                }
            }
            continue;
        }
        let Some(polarity) = section else { continue };
        let Some(body) = line
            .strip_prefix('-')
            .or_else(|| line.strip_prefix('*'))
            .or_else(|| line.strip_prefix('•'))
        else {
            warnings.push(ParseWarning::StrayLine { line: line_no });
            continue;
        };
        let body = body.trim();
        let (signal, text) = match body.strip_prefix('[').and_then(|b| b.split_once(']')) {
            Some((id, text)) => {
                let id = id.trim();
                if schema.has_feature(id) {
                    (SignalRef::Known(id.to_string()), text)
                } else {
                    warnings.push(ParseWarning::UnresolvableSignal {
                        line: line_no,
                        id: id.to_string(),
                    });
                    (SignalRef::Unresolvable(id.to_string()), text)
                }
            }
            None => {
                warnings.push(ParseWarning::UntaggedReason { line: line_no });
                (SignalRef::Unresolvable(String::new()), body)
            }
        };
        match Reason::new(signal, text) {
            Ok(r) => match polarity {
                Polarity::SupportsFraud => fraud.push(r),
                Polarity::SupportsLegitimacy => legit.push(r),
            },
            Err(_) => warnings.push(ParseWarning::EmptyReasonText { line: line_no }),
        }
    }

    let verdict = match verdicts.first() {
        None => return Err(ParseError::NoVerdictFound),
        Some(v) if verdicts.iter().any(|x| x != v) => return Err(ParseError::ContradictoryVerdicts),
        Some(v) => *v,
    };

    let mut mo = mo.and_then(|(_, raw)| {
        let m = raw
            .trim_matches(|c: char| c == '*' || c == '`' || c == '"' || c == '.')
            .trim()
            .to_ascii_lowercase();
        match m.as_str() {
            "" | "none" | "n/a" | "na" | "-" => None,
            _ => Some(m),
        }
    });
    if let Some(m) = &mo {
        if !schema.mo_types().iter().any(|t| t == m) {
            warnings.push(ParseWarning::UnknownMoType { mo: m.clone() });
        }
        if verdict == Verdict::Legitimate {
            warnings.push(ParseWarning::MoWithLegitimateVerdict { mo: m.clone() });
            mo = None;
        }
    }

    let conf = confidence_from(confidence);
    warnings.extend(conf.warnings);
    let evaluation = Evaluation::new(fraud, legit, verdict, mo, conf.value)
        .expect("parser upholds evaluation invariants");
    Ok(ParsedEvaluation {
        evaluation,
        warnings,
    })
}

/// Canonical text in fixed order and casing.
pub fn render_evaluation(e: &Evaluation) -> String {
    let mut out = String::from("FRAUD_REASONS:\n");
    for r in &e.fraud_reasons {
        out.push_str(&format!("- [{}] {}\n", r.signal.raw_id(), r.text));
    }
    out.push_str("LEGIT_REASONS:\n");
    for r in &e.legit_reasons {
        out.push_str(&format!("- [{}] {}\n", r.signal.raw_id(), r.text));
    }
    out.push_str(&format!("VERDICT: {}\n", e.verdict));
    out.push_str(&format!("MO: {}\n", e.mo.as_deref().unwrap_or(crate::schema::MO_NONE)));
    out.push_str(&format!("CONFIDENCE: {}\n", e.confidence));
    out
}

/// A parsed classifier answer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedLabel {
    pub label: Label,
    pub explanation: Option<String>,
    pub confidence: f64,
    pub warnings: Vec<ParseWarning>,
}

fn leading_label(line: &str) -> Option<(Label, &str)> {
    let l = line.trim_start_matches(|c: char| c == '*' || c == '#' || c.is_whitespace());
    let l = match l.split_once(':') {
        Some((head, rest))
            if matches!(
                head.trim().to_ascii_lowercase().as_str(),
                "label" | "answer" | "classification"
            ) =>
        {
            rest.trim()
        }
        _ => l,
    };
    let lower = l.to_ascii_lowercase();
    let boundary = |s: &str, n: usize| {
        s[n..]
            .chars()
            .next()
            .is_none_or(|c| !c.is_alphanumeric() && c != '_')
    };
    for (token, label) in [
        ("not scam", Label::NotScam),
        ("not_scam", Label::NotScam),
        ("scam", Label::Scam),
    ] {
        if lower.starts_with(token) && boundary(&lower, token.len()) {
            let rest = l[token.len()..].trim_start_matches(|c: char| {
                c.is_whitespace() || matches!(c, '.' | ',' | ':' | '-' | '*' | '"')
            });
            return Some((label, rest));
        }
    }
    None
}

/// Parses a classifier answer: the first line that starts with `scam` or
/// `not scam` (optionally behind `LABEL:`) decides the label.
pub fn parse_label(text: &str) -> Result<ParsedLabel, ParseError> {
    let mut label = None;
    let mut explanation: Option<String> = None;
    let mut confidence = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some((Keyword::Confidence, rest)) = keyword(line) {
            confidence.get_or_insert((i + 1, rest));
            continue;
        }
        if label.is_none() {
            if let Some((l, rest)) = leading_label(line) {
                label = Some(l);
                if !rest.is_empty() {
                    explanation = Some(rest.to_string());
                }
                continue;
            }
        } else if explanation.is_none() {
            let e = line
                .split_once(':')
                .filter(|(h, _)| h.trim().eq_ignore_ascii_case("explanation"))
                .map(|(_, r)| r.trim())
                .unwrap_or(line);
            explanation = Some(e.to_string());
        }
    }
    let label = label.ok_or(ParseError::NoVerdictFound)?;
    let conf = confidence_from(confidence);
    Ok(ParsedLabel {
        label,
        explanation,
        confidence: conf.value,
        warnings: conf.warnings,
    })
}

/// Outcome of checking one generated reason against the record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonCheck {
    Consistent,
    Inconsistent,
    Hallucinated,
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .map(str::to_ascii_lowercase)
        .collect()
}

/// Category keywords claimed in free text; `very low`/`very high` bind first.
fn claimed_categories(text: &str) -> Vec<&'static str> {
    let ws = words(text);
    let mut out = Vec::new();
    let mut i = 0;
    while i < ws.len() {
        let w = ws[i].as_str();
        if w == "very" && i + 1 < ws.len() && (ws[i + 1] == "low" || ws[i + 1] == "high") {
            out.push(if ws[i + 1] == "low" {
                Bucket::VeryLow.as_str()
            } else {
                Bucket::VeryHigh.as_str()
            });
            i += 2;
            continue;
        }
        match w {
            "low" => out.push(Bucket::Low.as_str()),
            "medium" => out.push(Bucket::Medium.as_str()),
            "high" => out.push(Bucket::High.as_str()),
            UNKNOWN => out.push(UNKNOWN),
            _ => {}
        }
        i += 1;
    }
    out
}

/// Decimal numbers appearing in free text.
fn claimed_numbers(text: &str) -> Vec<f64> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = if i > 0 && bytes[i - 1] == b'-' { i - 1 } else { i };
            let mut j = i;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            if j + 1 < bytes.len() && bytes[j] == b'.' && bytes[j + 1].is_ascii_digit() {
                j += 1;
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
            }
            if let Ok(v) = text[start..j].parse::<f64>() {
                out.push(v);
            }
            i = j;
        } else {
            i += 1;
        }
    }
    out
}

fn same_number(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1.0)
}

/// Classifies a generated reason as consistent, inconsistent (its claimed
/// category keyword, number or mode contradicts the record) or hallucinated
/// (its signal does not resolve).
pub fn canonicalize_reason(
    reason: &Reason,
    record: &TransactionRecord,
    schema: &FeatureSchema,
    model: &BinningModel,
) -> ReasonCheck {
    let Some(spec) = reason.signal.known_id().and_then(|id| schema.feature(id)) else {
        return ReasonCheck::Hallucinated;
    };
    let value = record.value(&spec.id);
    let categories = claimed_categories(&reason.text);
    let claims_unknown = categories.contains(&UNKNOWN);
    let inconsistent = match (spec.kind, &value) {
        (FeatureKind::Numeric, FeatureValue::Missing) => categories.iter().any(|c| *c != UNKNOWN)
            || !claimed_numbers(&reason.text).is_empty(),
        (FeatureKind::Numeric, FeatureValue::Number(v)) => {
            let actual = model.get(&spec.id).map(|b| b.bucket(*v).as_str());
            let bad_category = categories
                .iter()
                .any(|c| *c == UNKNOWN || actual.is_some_and(|a| a != *c));
            let numbers = claimed_numbers(&reason.text);
            let bad_number = !numbers.is_empty() && !numbers.iter().any(|n| same_number(*n, *v));
            bad_category || bad_number
        }
        (_, FeatureValue::Missing) => false,
        (FeatureKind::Categorical, FeatureValue::Text(actual)) if spec.id == crate::schema::MODE_FEATURE => {
            let ws = words(&reason.text);
            claims_unknown
                || schema
                    .modes()
                    .iter()
                    .any(|m| m != actual && ws.iter().any(|w| w == m))
        }
        _ => claims_unknown,
    };
    if inconsistent {
        ReasonCheck::Inconsistent
    } else {
        ReasonCheck::Consistent
    }
}
