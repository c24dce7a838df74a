//! Classification metrics, segment slicing, reasoning categorization and the
//! report that ties them together.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::evaluation::{canonicalize_reason, parse_evaluation, Evaluation, ReasonCheck, SignalRef, Verdict};
use crate::featurize::{BinningModel, Bucket};
use crate::review::ReasonFeedback;
use crate::schema::{FeatureSchema, Label, LabeledTransaction, ReasonTag, ReviewerReason, TransactionRecord};

/// A metric value, or `undefined` when its denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Value(f64),
    Undefined,
}

impl Metric {
    pub fn ratio(num: u64, den: u64) -> Self {
        if den == 0 {
            Metric::Undefined
        } else {
            Metric::Value(num as f64 / den as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(v),
            Metric::Undefined => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Value(v) => write!(f, "{v:.4}"),
            Metric::Undefined => f.write_str("undefined"),
        }
    }
}

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Metric::Value(v) => s.serialize_f64(*v),
            Metric::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Metric::Value(v)),
            Raw::Text(t) if t == "undefined" => Ok(Metric::Undefined),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("unexpected metric {t:?}"))),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction set is empty")]
    EmptyPredictionSet,
    #[error("threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("confidence {confidence} of {id:?} is outside [0, 1]")]
    ConfidenceOutOfRange { id: String, confidence: f64 },
    #[error("AUC needs both classes; only {0} present")]
    SingleClassDataset(&'static str),
    #[error("reason category counts are all zero")]
    EmptyCounts,
    #[error("no quality ratings")]
    EmptyRatings,
    #[error("threshold grid must contain {0}")]
    GridMissingThreshold(f64),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("ids do not align: {missing_gold} prediction ids without gold, {missing_predictions} gold ids without prediction, {unknown_annotations} annotation ids without gold (first: {example:?})")]
    IdMismatch {
        missing_gold: usize,
        missing_predictions: usize,
        unknown_annotations: usize,
        example: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPrediction {
    pub id: String,
    pub confidence: f64,
    pub gold: Label,
    pub segments: BTreeSet<String>,
}

impl ScoredPrediction {
    pub fn new(id: &str, confidence: f64, gold: Label) -> Self {
        Self {
            id: id.to_string(),
            confidence,
            gold,
            segments: BTreeSet::new(),
        }
    }

    pub fn predicted_scam(&self, threshold: f64) -> bool {
        self.confidence >= threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: Metric,
    pub recall: Metric,
    pub f1: Metric,
}

impl Confusion {
    fn from_counts(threshold: f64, tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        let precision = Metric::ratio(tp, tp + fp);
        let recall = Metric::ratio(tp, tp + fn_);
        let f1 = match (precision, recall) {
            (Metric::Value(p), Metric::Value(r)) if p + r > 0.0 => Metric::Value(2.0 * p * r / (p + r)),
            _ => Metric::Undefined,
        };
        Self {
            threshold,
            tp,
            fp,
            tn,
            fn_,
            precision,
            recall,
            f1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_threshold(t: f64) -> Result<(), MetricsError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(MetricsError::InvalidThreshold(t))
    }
}

fn check_confidences(predictions: &[ScoredPrediction]) -> Result<(), MetricsError> {
    match predictions.iter().find(|p| !(0.0..=1.0).contains(&p.confidence)) {
        Some(p) => Err(MetricsError::ConfidenceOutOfRange {
            id: p.id.clone(),
            confidence: p.confidence,
        }),
        None => Ok(()),
    }
}

/// Positive iff confidence ≥ τ.
pub fn confusion_and_prf(predictions: &[ScoredPrediction], threshold: f64) -> Result<Confusion, MetricsError> {
    check_threshold(threshold)?;
    if predictions.is_empty() {
        return Err(MetricsError::EmptyPredictionSet);
    }
    check_confidences(predictions)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for p in predictions {
        match (p.predicted_scam(threshold), p.gold.is_scam()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(Confusion::from_counts(threshold, tp, fp, tn, fn_))
}

/// Mann–Whitney AUC with average ranks for tied scores.
pub fn auc_roc(predictions: &[ScoredPrediction]) -> Result<f64, MetricsError> {
    check_confidences(predictions)?;
    let pos = predictions.iter().filter(|p| p.gold.is_scam()).count();
    let neg = predictions.len() - pos;
    if pos == 0 {
        return Err(MetricsError::SingleClassDataset("not_scam"));
    }
    if neg == 0 {
        return Err(MetricsError::SingleClassDataset("scam"));
    }
    let mut order: Vec<&ScoredPrediction> = predictions.iter().collect();
    order.sort_by(|a, b| a.confidence.total_cmp(&b.confidence));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && order[j + 1].confidence == order[i].confidence {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|p| p.gold.is_scam()).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Membership rule for a sub-segment of the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SegmentRule {
    /// Every listed boolean feature is true.
    AllTrue { features: Vec<String> },
    /// The feature's bucket is one of `buckets`.
    BucketIn { feature: String, buckets: Vec<Bucket> },
    ModeIs { mode: String },
    NonEmptyText { feature: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentDefinition {
    pub id: String,
    #[serde(flatten)]
    pub rule: SegmentRule,
}

impl SegmentDefinition {
    pub fn contains(&self, record: &TransactionRecord, model: &BinningModel) -> bool {
        match &self.rule {
            SegmentRule::AllTrue { features } => features
                .iter()
                .all(|f| record.value(f).as_bool() == Some(true)),
            SegmentRule::BucketIn { feature, buckets } => record
                .number(feature)
                .and_then(|v| model.bucket(feature, v).ok())
                .is_some_and(|b| buckets.contains(&b)),
            SegmentRule::ModeIs { mode } => &record.mode == mode,
            SegmentRule::NonEmptyText { feature } => record
                .value(feature)
                .as_text()
                .is_some_and(|t| !t.trim().is_empty()),
        }
    }
}

pub fn default_segments() -> Vec<SegmentDefinition> {
    vec![
        SegmentDefinition {
            id: "external_merchant".into(),
            rule: SegmentRule::AllTrue {
                features: vec!["is_merchant".into(), "is_external_merchant".into()],
            },
        },
        SegmentDefinition {
            id: "high_value".into(),
            rule: SegmentRule::BucketIn {
                feature: "amount".into(),
                buckets: vec![Bucket::VeryHigh],
            },
        },
        SegmentDefinition {
            id: "app_intent".into(),
            rule: SegmentRule::ModeIs {
                mode: "app_intent".into(),
            },
        },
        SegmentDefinition {
            id: "has_order_text".into(),
            rule: SegmentRule::NonEmptyText {
                feature: "memo".into(),
            },
        },
    ]
}

pub fn assign_segments(
    record: &TransactionRecord,
    segments: &[SegmentDefinition],
    model: &BinningModel,
) -> BTreeSet<String> {
    segments
        .iter()
        .filter(|s| s.contains(record, model))
        .map(|s| s.id.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub members: u64,
    pub positives: u64,
    pub by_threshold: Vec<Confusion>,
    pub auc_roc: Metric,
}

/// Metrics per segment over each segment's members only. Empty segments
/// produce all-`undefined` rows.
pub fn segment_metrics(
    predictions: &[ScoredPrediction],
    segments: &[SegmentDefinition],
    thresholds: &[f64],
) -> Result<BTreeMap<String, SegmentReport>, MetricsError> {
    let mut out = BTreeMap::new();
    for seg in segments {
        let members: Vec<ScoredPrediction> = predictions
            .iter()
            .filter(|p| p.segments.contains(&seg.id))
            .cloned()
            .collect();
        let mut by_threshold = Vec::new();
        for &t in thresholds {
            by_threshold.push(match confusion_and_prf(&members, t) {
                Ok(c) => c,
                Err(MetricsError::EmptyPredictionSet) => Confusion::from_counts(t, 0, 0, 0, 0),
                Err(e) => return Err(e),
            });
        }
        out.insert(
            seg.id.clone(),
            SegmentReport {
                members: members.len() as u64,
                positives: members.iter().filter(|p| p.gold.is_scam()).count() as u64,
                by_threshold,
                auc_roc: auc_roc(&members).map_or(Metric::Undefined, Metric::Value),
            },
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonCategoryCounts {
    #[serde(rename = "C")]
    pub c: u64,
    #[serde(rename = "I")]
    pub i: u64,
    #[serde(rename = "H")]
    pub h: u64,
    #[serde(rename = "M")]
    pub m: u64,
    #[serde(rename = "N")]
    pub n: u64,
}

impl ReasonCategoryCounts {
    pub fn total(&self) -> u64 {
        self.c + self.i + self.h + self.m + self.n
    }
}

impl std::ops::AddAssign for ReasonCategoryCounts {
    fn add_assign(&mut self, o: Self) {
        self.c += o.c;
        self.i += o.i;
        self.h += o.h;
        self.m += o.m;
        self.n += o.n;
    }
}

/// Compares generated reasons with reviewer reasons by `(signal, polarity)`.
///
/// Each reviewer reason is consumed by the first generated reason with its
/// key. A consumed reason is C when the generated text agrees with the
/// record, otherwise the generated reason is I and the reviewer reason still
/// counts as M. Unmatched generated reasons are N or I; unresolvable ones are
/// H; unconsumed reviewer reasons are M. Hence C+I+H+N equals the generated
/// count and C+M the reviewer count.
pub fn categorize_reasons(
    generated: &Evaluation,
    reviewer: &[ReviewerReason],
    record: &TransactionRecord,
    schema: &FeatureSchema,
    model: &BinningModel,
) -> ReasonCategoryCounts {
    let mut open: HashMap<&ReasonTag, usize> = HashMap::new();
    for r in reviewer {
        *open.entry(&r.tag).or_default() += 1;
    }
    let mut counts = ReasonCategoryCounts::default();
    for (polarity, reason) in generated.tagged_reasons() {
        let SignalRef::Known(id) = &reason.signal else {
            counts.h += 1;
            continue;
        };
        let consistent = match canonicalize_reason(reason, record, schema, model) {
            ReasonCheck::Consistent => true,
            ReasonCheck::Inconsistent => false,
            ReasonCheck::Hallucinated => {
                counts.h += 1;
                continue;
            }
        };
        let key = ReasonTag::new(id.clone(), polarity);
        let matched = match open.get_mut(&key) {
            Some(n) if *n > 0 => {
                *n -= 1;
                true
            }
            _ => false,
        };
        match (matched, consistent) {
            (true, true) => counts.c += 1,
            (true, false) => {
                counts.i += 1;
                counts.m += 1;
            }
            (false, true) => counts.n += 1,
            (false, false) => counts.i += 1,
        }
    }
    counts.m += open.values().map(|&n| n as u64).sum::<u64>();
    counts
}

/// (C+N) / (C+I+H+M+N).
pub fn reasoning_accuracy(counts: &ReasonCategoryCounts) -> Result<f64, MetricsError> {
    match counts.total() {
        0 => Err(MetricsError::EmptyCounts),
        total => Ok((counts.c + counts.n) as f64 / total as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityRating {
    Excellent,
    Acceptable,
    Poor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualitySummary {
    pub positive: f64,
    pub excellent: u64,
    pub acceptable: u64,
    pub poor: u64,
    pub total: u64,
}

pub fn quality_from_counts(excellent: u64, acceptable: u64, poor: u64) -> Result<QualitySummary, MetricsError> {
    let total = excellent + acceptable + poor;
    if total == 0 {
        return Err(MetricsError::EmptyRatings);
    }
    Ok(QualitySummary {
        positive: (excellent + acceptable) as f64 / total as f64,
        excellent,
        acceptable,
        poor,
        total,
    })
}

/// Positive fraction = (excellent + acceptable) / total.
pub fn quality_summary(ratings: &[QualityRating]) -> Result<QualitySummary, MetricsError> {
    let count = |q| ratings.iter().filter(|&&r| r == q).count() as u64;
    quality_from_counts(
        count(QualityRating::Excellent),
        count(QualityRating::Acceptable),
        count(QualityRating::Poor),
    )
}

pub const MANDATORY_THRESHOLDS: [f64; 2] = [0.5, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ThresholdGrid(Vec<f64>);

impl ThresholdGrid {
    pub fn new(mut thresholds: Vec<f64>) -> Result<Self, MetricsError> {
        for &t in &thresholds {
            check_threshold(t)?;
        }
        for m in MANDATORY_THRESHOLDS {
            if !thresholds.contains(&m) {
                return Err(MetricsError::GridMissingThreshold(m));
            }
        }
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        Ok(Self(thresholds))
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.0
    }
}

impl Default for ThresholdGrid {
    /// 0.1, 0.2, …, 0.9.
    fn default() -> Self {
        Self((1..=9).map(|i| i as f64 / 10.0).collect())
    }
}

impl<'de> Deserialize<'de> for ThresholdGrid {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        ThresholdGrid::new(Vec::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub confidence: f64,
    pub verdict: Verdict,
    pub evaluation_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_version: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// One line of an annotations file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    #[serde(default)]
    pub reviewer_reasons: Vec<ReviewerReason>,
    #[serde(default)]
    pub quality_ratings: Vec<QualityRating>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feedback: Vec<ReasonFeedback>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningSection {
    pub cases: u64,
    pub unparsed: u64,
    pub counts: ReasonCategoryCounts,
    pub reasoning_accuracy: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub corpus: String,
    pub template_version: String,
    pub predictions: u64,
    pub positives: u64,
    pub thresholds: Vec<Confusion>,
    pub auc_roc: Metric,
    pub verdict_accuracy: Metric,
    #[serde(default)]
    pub segments: BTreeMap<String, SegmentReport>,
    #[serde(default)]
    pub reasoning: Option<ReasoningSection>,
    #[serde(default)]
    pub quality: Option<QualitySummary>,
    #[serde(default)]
    pub notices: Vec<String>,
}

impl MetricsReport {
    pub fn at(&self, threshold: f64) -> Option<&Confusion> {
        self.thresholds.iter().find(|c| c.threshold == threshold)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Fixed-width table for terminals and text reports.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "corpus: {}  template: {}", self.corpus, self.template_version);
        let _ = writeln!(
            s,
            "predictions: {}  positives: {}  auc_roc: {}  verdict_accuracy: {}",
            self.predictions, self.positives, self.auc_roc, self.verdict_accuracy
        );
        let header = |s: &mut String| {
            let _ = writeln!(
                s,
                "{:>9} {:>6} {:>6} {:>6} {:>6} {:>10} {:>10} {:>10}",
                "threshold", "TP", "FP", "TN", "FN", "precision", "recall", "F1"
            );
        };
        let row = |s: &mut String, c: &Confusion| {
            let _ = writeln!(
                s,
                "{:>9.2} {:>6} {:>6} {:>6} {:>6} {:>10} {:>10} {:>10}",
                c.threshold,
                c.tp,
                c.fp,
                c.tn,
                c.fn_,
                c.precision.to_string(),
                c.recall.to_string(),
                c.f1.to_string()
            );
        };
        s.push('\n');
        header(&mut s);
        for c in &self.thresholds {
            row(&mut s, c);
        }
        for (id, seg) in &self.segments {
            let _ = writeln!(
                s,
                "\nsegment {id}: members {}  positives {}  auc_roc {}",
                seg.members, seg.positives, seg.auc_roc
            );
            header(&mut s);
            for c in &seg.by_threshold {
                row(&mut s, c);
            }
        }
        if let Some(r) = &self.reasoning {
            let c = r.counts;
            let _ = writeln!(
                s,
                "\nreasoning: cases {}  C {}  I {}  H {}  M {}  N {}  accuracy {}",
                r.cases, c.c, c.i, c.h, c.m, c.n, r.reasoning_accuracy
            );
        }
        if let Some(q) = &self.quality {
            let _ = writeln!(
                s,
                "quality: excellent {}  acceptable {}  poor {}  positive {:.4}",
                q.excellent, q.acceptable, q.poor, q.positive
            );
        }
        for n in &self.notices {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }
}

pub struct ReportInputs<'a> {
    pub predictions: &'a [PredictionRow],
    pub gold: &'a [LabeledTransaction],
    pub annotations: Option<&'a [Annotation]>,
    pub schema: &'a FeatureSchema,
    pub model: &'a BinningModel,
    pub segments: &'a [SegmentDefinition],
    pub grid: &'a ThresholdGrid,
    pub corpus: &'a str,
}

fn unique_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Result<BTreeSet<&'a str>, MetricsError> {
    let mut set = BTreeSet::new();
    for id in ids {
        if !set.insert(id) {
            return Err(MetricsError::DuplicateId(id.to_string()));
        }
    }
    Ok(set)
}

pub fn build_report(inputs: &ReportInputs<'_>) -> Result<MetricsReport, MetricsError> {
    let pred_ids = unique_ids(inputs.predictions.iter().map(|p| p.id.as_str()))?;
    let gold_ids = unique_ids(inputs.gold.iter().map(|g| g.id()))?;
    let missing_gold: Vec<&&str> = pred_ids.difference(&gold_ids).collect();
    let missing_predictions: Vec<&&str> = gold_ids.difference(&pred_ids).collect();
    let unknown_annotations: Vec<&str> = inputs
        .annotations
        .unwrap_or_default()
        .iter()
        .map(|a| a.id.as_str())
        .filter(|id| !gold_ids.contains(id))
        .collect();
    if !missing_gold.is_empty() || !missing_predictions.is_empty() || !unknown_annotations.is_empty() {
        let example = missing_gold
            .first()
            .or(missing_predictions.first())
            .map(|s| s.to_string())
            .or(unknown_annotations.first().map(|s| s.to_string()))
            .unwrap_or_default();
        return Err(MetricsError::IdMismatch {
            missing_gold: missing_gold.len(),
            missing_predictions: missing_predictions.len(),
            unknown_annotations: unknown_annotations.len(),
            example,
        });
    }

    let gold: HashMap<&str, &LabeledTransaction> = inputs.gold.iter().map(|g| (g.id(), g)).collect();
    let scored: Vec<ScoredPrediction> = inputs
        .predictions
        .iter()
        .map(|p| {
            let g = gold[p.id.as_str()];
            ScoredPrediction {
                id: p.id.clone(),
                confidence: p.confidence,
                gold: g.label,
                segments: assign_segments(&g.record, inputs.segments, inputs.model),
            }
        })
        .collect();

    let thresholds = inputs
        .grid
        .thresholds()
        .iter()
        .map(|&t| confusion_and_prf(&scored, t))
        .collect::<Result<Vec<_>, _>>()?;
    let correct_verdicts = inputs
        .predictions
        .iter()
        .filter(|p| p.verdict.label() == gold[p.id.as_str()].label)
        .count() as u64;
    let mut notices = Vec::new();
    let auc = match auc_roc(&scored) {
        Ok(v) => Metric::Value(v),
        Err(e @ MetricsError::SingleClassDataset(_)) => {
            notices.push(format!("auc_roc undefined: {e}"));
            Metric::Undefined
        }
        Err(e) => return Err(e),
    };

    let versions: BTreeSet<&str> = inputs
        .predictions
        .iter()
        .filter_map(|p| p.template_version.as_deref())
        .collect();
    let template_version = match versions.len() {
        0 => "unknown".to_string(),
        _ => versions.into_iter().collect::<Vec<_>>().join(","),
    };

    let (reasoning, quality) = match inputs.annotations {
        None => {
            notices.push("no annotations supplied; reasoning and quality sections omitted".into());
            (None, None)
        }
        Some(annotations) => {
            let preds: HashMap<&str, &PredictionRow> =
                inputs.predictions.iter().map(|p| (p.id.as_str(), p)).collect();
            let mut counts = ReasonCategoryCounts::default();
            let mut unparsed = 0;
            let mut ratings = Vec::new();
            for a in annotations {
                ratings.extend_from_slice(&a.quality_ratings);
                let record = &gold[a.id.as_str()].record;
                match parse_evaluation(&preds[a.id.as_str()].evaluation_text, inputs.schema) {
                    Ok(parsed) => {
                        counts += categorize_reasons(
                            &parsed.evaluation,
                            &a.reviewer_reasons,
                            record,
                            inputs.schema,
                            inputs.model,
                        )
                    }
                    Err(_) => {
                        unparsed += 1;
                        counts.m += a.reviewer_reasons.len() as u64;
                    }
                }
            }
            if unparsed > 0 {
                notices.push(format!(
                    "{unparsed} annotated predictions had no parseable evaluation; their reviewer reasons count as missed"
                ));
            }
            let quality = match quality_summary(&ratings) {
                Ok(q) => Some(q),
                Err(_) => {
                    notices.push("annotations carry no quality ratings".into());
                    None
                }
            };
            (
                Some(ReasoningSection {
                    cases: annotations.len() as u64,
                    unparsed,
                    counts,
                    reasoning_accuracy: reasoning_accuracy(&counts).map_or(Metric::Undefined, Metric::Value),
                }),
                quality,
            )
        }
    };

    Ok(MetricsReport {
        corpus: inputs.corpus.to_string(),
        template_version,
        predictions: scored.len() as u64,
        positives: scored.iter().filter(|p| p.gold.is_scam()).count() as u64,
        thresholds,
        auc_roc: auc,
        verdict_accuracy: Metric::ratio(correct_verdicts, scored.len() as u64),
        segments: segment_metrics(&scored, inputs.segments, inputs.grid.thresholds())?,
        reasoning,
        quality,
        notices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::Reason;
    use crate::featurize::FeatureBins;
    use crate::schema::Polarity;
    use proptest::prelude::*;

    fn sp(id: &str, c: f64, scam: bool) -> ScoredPrediction {
        ScoredPrediction::new(id, c, if scam { Label::Scam } else { Label::NotScam })
    }

    #[test]
    fn precision_recall_by_definition() {
        let preds = vec![
            sp("a", 0.9, true),
            sp("b", 0.8, true),
            sp("c", 0.7, true),
            sp("d", 0.6, false),
            sp("e", 0.1, true),
            sp("f", 0.2, false),
        ];
        let c = confusion_and_prf(&preds, 0.5).unwrap();
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (3, 1, 1, 1));
        assert_eq!(c.precision, Metric::Value(0.75));
        assert_eq!(c.recall, Metric::Value(0.75));
        assert_eq!(c.f1, Metric::Value(0.75));
    }

    #[test]
    fn all_negative_precision_is_undefined() {
        let preds = vec![sp("a", 0.9, true), sp("b", 0.3, false)];
        let c = confusion_and_prf(&preds, 1.0).unwrap();
        assert_eq!(c.precision, Metric::Undefined);
        assert_eq!(c.f1, Metric::Undefined);
        assert_eq!(c.recall, Metric::Value(0.0));
    }

    #[test]
    fn confusion_errors() {
        assert_eq!(confusion_and_prf(&[], 0.5), Err(MetricsError::EmptyPredictionSet));
        assert!(matches!(
            confusion_and_prf(&[sp("a", 0.5, true)], 1.5),
            Err(MetricsError::InvalidThreshold(_))
        ));
        assert!(matches!(
            confusion_and_prf(&[sp("a", 1.5, true)], 0.5),
            Err(MetricsError::ConfidenceOutOfRange { .. })
        ));
    }

    #[test]
    fn auc_examples() {
        let perfect = vec![sp("a", 0.9, true), sp("b", 0.8, true), sp("c", 0.1, false), sp("d", 0.2, false)];
        assert_eq!(auc_roc(&perfect).unwrap(), 1.0);
        let ties = vec![sp("a", 0.4, true), sp("b", 0.4, false), sp("c", 0.4, true)];
        assert_eq!(auc_roc(&ties).unwrap(), 0.5);
        assert!(matches!(auc_roc(&[sp("a", 0.4, true)]), Err(MetricsError::SingleClassDataset(_))));
    }

    fn pairwise_auc(preds: &[ScoredPrediction]) -> f64 {
        let pos: Vec<f64> = preds.iter().filter(|p| p.gold.is_scam()).map(|p| p.confidence).collect();
        let neg: Vec<f64> = preds.iter().filter(|p| !p.gold.is_scam()).map(|p| p.confidence).collect();
        let mut wins = 0.0;
        for &p in &pos {
            for &n in &neg {
                wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        wins / (pos.len() * neg.len()) as f64
    }

    fn arb_preds() -> impl Strategy<Value = Vec<ScoredPrediction>> {
        prop::collection::vec((0u8..=20, any::<bool>()), 2..80).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (s, scam))| sp(&i.to_string(), s as f64 / 20.0, scam))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise(preds in arb_preds()) {
            prop_assume!(preds.iter().any(|p| p.gold.is_scam()) && preds.iter().any(|p| !p.gold.is_scam()));
            let a = auc_roc(&preds).unwrap();
            prop_assert!((a - pairwise_auc(&preds)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn recall_is_non_increasing_in_threshold(preds in arb_preds()) {
            let grid = ThresholdGrid::default();
            let mut last_recall = f64::INFINITY;
            let mut actual_pos = None;
            for &t in grid.thresholds() {
                let c = confusion_and_prf(&preds, t).unwrap();
                let pos = c.tp + c.fn_;
                prop_assert_eq!(*actual_pos.get_or_insert(pos), pos);
                if let Metric::Value(r) = c.recall {
                    prop_assert!(r <= last_recall);
                    last_recall = r;
                }
            }
        }
    }

    #[test]
    fn reasoning_accuracy_examples() {
        let counts = ReasonCategoryCounts { c: 57, i: 6, h: 1, m: 4, n: 32 };
        assert_eq!(reasoning_accuracy(&counts).unwrap(), 0.89);
        let small = ReasonCategoryCounts { c: 1, n: 1, m: 1, ..Default::default() };
        assert_eq!(reasoning_accuracy(&small).unwrap(), 2.0 / 3.0);
        assert_eq!(reasoning_accuracy(&Default::default()), Err(MetricsError::EmptyCounts));
    }

    #[test]
    fn quality_examples() {
        assert_eq!(quality_from_counts(38, 41, 21).unwrap().positive, 0.79);
        assert_eq!(quality_summary(&[QualityRating::Excellent; 4]).unwrap().positive, 1.0);
        assert_eq!(quality_summary(&[]), Err(MetricsError::EmptyRatings));
        let mixed = [QualityRating::Poor, QualityRating::Acceptable];
        assert_eq!(quality_summary(&mixed).unwrap().positive, 0.5);
    }

    #[test]
    fn grid_requires_mandatory_thresholds() {
        assert_eq!(
            ThresholdGrid::new(vec![0.1, 0.5]),
            Err(MetricsError::GridMissingThreshold(0.9))
        );
        let g = ThresholdGrid::new(vec![0.9, 0.5, 0.5]).unwrap();
        assert_eq!(g.thresholds(), &[0.5, 0.9]);
        let d = ThresholdGrid::default();
        assert_eq!(d.thresholds().len(), 9);
        assert!(d.thresholds().contains(&0.5) && d.thresholds().contains(&0.9));
        assert!(serde_json::from_str::<ThresholdGrid>("[0.3]").is_err());
    }

    fn model() -> BinningModel {
        let mut m = BTreeMap::new();
        m.insert(
            "amount".to_string(),
            FeatureBins {
                boundaries: [100.0, 500.0, 1000.0, 5000.0],
                n: 20,
            },
        );
        BinningModel::from_bins(m).unwrap()
    }

    fn record() -> TransactionRecord {
        TransactionRecord::new("r", "qr_scan")
            .with("amount", 700.0)
            .with("memo", "groceries")
            .with("payee_spam_reports", 0.0)
            .with("payer_payee_prior_txns", 2.0)
    }

    fn eval(fraud: Vec<Reason>) -> Evaluation {
        Evaluation::new(fraud, vec![], Verdict::Fraudulent, None, 0.8).unwrap()
    }

    #[test]
    fn categorize_set_example() {
        let s = FeatureSchema::bundled();
        let generated = eval(vec![
            Reason::known("memo", "memo looks odd").unwrap(),
            Reason::known("payee_spam_reports", "payee flagged").unwrap(),
        ]);
        let reviewer = vec![
            ReviewerReason::new("memo", Polarity::SupportsFraud, "odd memo"),
            ReviewerReason::new("is_merchant", Polarity::SupportsFraud, "not a merchant"),
        ];
        let c = categorize_reasons(&generated, &reviewer, &record(), &s, &model());
        assert_eq!(c, ReasonCategoryCounts { c: 1, n: 1, m: 1, ..Default::default() });
    }

    #[test]
    fn categorize_identity_hallucination_and_inconsistency() {
        let s = FeatureSchema::bundled();
        let m = model();
        let generated = eval(vec![
            Reason::known("amount", "amount is medium").unwrap(),
            Reason::known("memo", "memo text").unwrap(),
        ]);
        let reviewer = vec![
            ReviewerReason::new("amount", Polarity::SupportsFraud, "a"),
            ReviewerReason::new("memo", Polarity::SupportsFraud, "b"),
        ];
        assert_eq!(
            categorize_reasons(&generated, &reviewer, &record(), &s, &m),
            ReasonCategoryCounts { c: 2, ..Default::default() }
        );

        let ghost = eval(vec![Reason::new(SignalRef::Unresolvable("ghost".into()), "odd").unwrap()]);
        assert_eq!(
            categorize_reasons(&ghost, &[], &record(), &s, &m),
            ReasonCategoryCounts { h: 1, ..Default::default() }
        );

        let wrong = eval(vec![
            Reason::known("amount", "amount is very high").unwrap(),
            Reason::known("amount", "amount is medium").unwrap(),
        ]);
        let c = categorize_reasons(&wrong, &reviewer[..1], &record(), &s, &m);
        assert_eq!(c, ReasonCategoryCounts { i: 1, m: 1, n: 1, ..Default::default() });
    }

    #[test]
    fn segments_follow_definitions() {
        let m = model();
        let segs = default_segments();
        let r = record()
            .with("amount", 9000.0)
            .with("is_merchant", true)
            .with("is_external_merchant", true);
        let got = assign_segments(&r, &segs, &m);
        let want: BTreeSet<String> = ["external_merchant", "high_value", "has_order_text"]
            .into_iter()
            .map(String::from)
            .collect();
        assert_eq!(got, want);
        let plain = TransactionRecord::new("x", "app_intent").with("memo", "  ");
        assert_eq!(
            assign_segments(&plain, &segs, &m),
            BTreeSet::from(["app_intent".to_string()])
        );
    }

    #[test]
    fn empty_segment_is_all_undefined() {
        let segs = default_segments();
        let preds = vec![sp("a", 0.9, true)];
        let out = segment_metrics(&preds, &segs, &[0.5]).unwrap();
        let row = &out["app_intent"];
        assert_eq!(row.members, 0);
        assert_eq!(row.auc_roc, Metric::Undefined);
        let c = &row.by_threshold[0];
        assert_eq!((c.precision, c.recall, c.f1), (Metric::Undefined, Metric::Undefined, Metric::Undefined));
    }

    #[test]
    fn all_app_intent_true_positives_have_full_recall() {
        let segs = default_segments();
        let mut preds = vec![sp("a", 0.9, true), sp("b", 0.95, true), sp("c", 0.2, true)];
        for p in preds.iter_mut().take(2) {
            p.segments.insert("app_intent".into());
        }
        let out = segment_metrics(&preds, &segs, &[0.5]).unwrap();
        assert_eq!(out["app_intent"].by_threshold[0].recall, Metric::Value(1.0));
    }

    fn row(id: &str, c: f64, verdict: Verdict) -> PredictionRow {
        PredictionRow {
            id: id.into(),
            confidence: c,
            verdict,
            evaluation_text: String::new(),
            template_version: Some("v".into()),
            warnings: vec![],
        }
    }

    #[test]
    fn report_checks_ids_and_omits_reasoning_without_annotations() {
        let s = FeatureSchema::bundled();
        let m = model();
        let gold = vec![
            LabeledTransaction::new(record(), Label::Scam),
            LabeledTransaction::new(TransactionRecord::new("q", "qr_scan"), Label::NotScam),
        ];
        let preds = vec![row("r", 0.95, Verdict::Fraudulent), row("q", 0.1, Verdict::Fraudulent)];
        let grid = ThresholdGrid::default();
        let inputs = ReportInputs {
            predictions: &preds,
            gold: &gold,
            annotations: None,
            schema: &s,
            model: &m,
            segments: &[],
            grid: &grid,
            corpus: "unit",
        };
        let report = build_report(&inputs).unwrap();
        assert!(report.reasoning.is_none());
        assert!(report.segments.is_empty());
        assert_eq!(report.auc_roc, Metric::Value(1.0));
        assert_eq!(report.verdict_accuracy, Metric::Value(0.5));
        assert_eq!(report.at(0.9).unwrap().tp, 1);
        assert_eq!(report.template_version, "v");
        let back: MetricsReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
        assert!(report.render_table().contains("threshold"));

        let short = &preds[..1];
        let bad = ReportInputs { predictions: short, ..inputs };
        assert!(matches!(build_report(&bad), Err(MetricsError::IdMismatch { missing_predictions: 1, .. })));
    }

    #[test]
    fn metric_serde() {
        assert_eq!(serde_json::to_string(&Metric::Undefined).unwrap(), "\"undefined\"");
        assert_eq!(serde_json::to_string(&Metric::Value(0.5)).unwrap(), "0.5");
        assert_eq!(serde_json::from_str::<Metric>("\"undefined\"").unwrap(), Metric::Undefined);
        assert!(serde_json::from_str::<Metric>("\"nan\"").is_err());
    }
}
