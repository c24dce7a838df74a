//! Feature schema, transaction records, labels and reviewer annotations.
//!
//! Schemas are data: the pipeline never hard-codes a feature id outside of
//! configurable defaults. A schema document is a JSON object with the keys
//! `features`, `signal_priority`, `mo_types` and `modes`; the last three may
//! be omitted and then take the defaults below.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Initiation modes every schema must declare.
pub const REQUIRED_MODES: [&str; 4] = [
    "payer_initiated_lookup",
    "app_intent",
    "qr_scan",
    "payment_request",
];

/// MO identifiers every schema must declare. `none` is the sentinel for
/// "no modus operandi".
pub const REQUIRED_MO_TYPES: [&str; 3] = ["impersonation", "phishing", MO_NONE];

pub const DEFAULT_MO_TYPES: [&str; 5] = [
    "impersonation",
    "phishing",
    "investment_scam",
    "lottery_scam",
    MO_NONE,
];

pub const MO_NONE: &str = "none";

/// Pseudo-feature id whose value is the record's initiation mode.
pub const MODE_FEATURE: &str = "mode";

const BUNDLED_SCHEMA: &str = include_str!("../data/schema.default.json");

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("schema document does not parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid identifier {0:?}: ids must be non-empty and contain no whitespace or brackets")]
    InvalidId(String),
    #[error("duplicate feature id {0:?} in {1}")]
    DuplicateFeatureId(String, &'static str),
    #[error("signal_priority references unknown feature {0:?}")]
    PriorityReferencesUnknownFeature(String),
    #[error("feature {0:?} has an empty description")]
    EmptyDescription(String),
    #[error("feature {MODE_FEATURE:?} must be categorical")]
    ModeFeatureKind,
    #[error("schema must declare mode {0:?}")]
    MissingMode(String),
    #[error("schema must declare MO type {0:?}")]
    MissingMoType(String),
    #[error("duplicate entry {0:?} in {1}")]
    DuplicateEntry(String, &'static str),
}

#[derive(Debug, Error, PartialEq)]
pub enum RecordError {
    #[error("record id is empty")]
    EmptyId,
    #[error("record {record}: unknown feature {feature:?}")]
    UnknownFeature { record: String, feature: String },
    #[error("record {record}: required feature {feature:?} is absent")]
    MissingRequired { record: String, feature: String },
    #[error("record {record}: feature {feature:?} {reason}")]
    BadValueKind {
        record: String,
        feature: String,
        reason: String,
    },
    #[error("record {record}: mode {mode:?} is not declared by the schema")]
    BadMode { record: String, mode: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    Categorical,
    Text,
    Boolean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub id: String,
    pub kind: FeatureKind,
    /// Short human-readable label, embedded verbatim into prompts.
    pub description: String,
    #[serde(default)]
    pub required: bool,
    /// Amount-like numeric features reject negative values.
    #[serde(default, skip_serializing_if = "is_false")]
    pub non_negative: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureSchema {
    features: Vec<FeatureSpec>,
    signal_priority: Vec<String>,
    mo_types: Vec<String>,
    modes: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaDocument {
    features: Vec<FeatureSpec>,
    #[serde(default)]
    signal_priority: Option<Vec<String>>,
    #[serde(default)]
    mo_types: Option<Vec<String>>,
    #[serde(default)]
    modes: Option<Vec<String>>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && !id.chars().any(|c| c.is_whitespace() || c == '[' || c == ']')
}

fn check_unique(items: &[String], what: &'static str) -> Result<(), SchemaError> {
    let mut seen = HashSet::new();
    for item in items {
        if !valid_id(item) {
            return Err(SchemaError::InvalidId(item.clone()));
        }
        if !seen.insert(item.as_str()) {
            return Err(SchemaError::DuplicateEntry(item.clone(), what));
        }
    }
    Ok(())
}

impl FeatureSchema {
    pub fn new(
        features: Vec<FeatureSpec>,
        signal_priority: Vec<String>,
        mo_types: Vec<String>,
        modes: Vec<String>,
    ) -> Result<Self, SchemaError> {
        let mut ids = HashSet::new();
        for f in &features {
            if !valid_id(&f.id) {
                return Err(SchemaError::InvalidId(f.id.clone()));
            }
            if !ids.insert(f.id.as_str()) {
                return Err(SchemaError::DuplicateFeatureId(f.id.clone(), "features"));
            }
            if f.description.trim().is_empty() {
                return Err(SchemaError::EmptyDescription(f.id.clone()));
            }
            if f.id == MODE_FEATURE && f.kind != FeatureKind::Categorical {
                return Err(SchemaError::ModeFeatureKind);
            }
        }
        let mut seen = HashSet::new();
        for id in &signal_priority {
            if !ids.contains(id.as_str()) {
                return Err(SchemaError::PriorityReferencesUnknownFeature(id.clone()));
            }
            if !seen.insert(id.as_str()) {
                return Err(SchemaError::DuplicateFeatureId(
                    id.clone(),
                    "signal_priority",
                ));
            }
        }
        check_unique(&modes, "modes")?;
        check_unique(&mo_types, "mo_types")?;
        for m in REQUIRED_MODES {
            if !modes.iter().any(|x| x == m) {
                return Err(SchemaError::MissingMode(m.to_string()));
            }
        }
        for m in REQUIRED_MO_TYPES {
            if !mo_types.iter().any(|x| x == m) {
                return Err(SchemaError::MissingMoType(m.to_string()));
            }
        }
        Ok(Self {
            features,
            signal_priority,
            mo_types,
            modes,
        })
    }

    /// The default 12-field schema shipped with the crate.
    pub fn bundled() -> Self {
        load_schema(BUNDLED_SCHEMA).expect("bundled schema is valid")
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn signal_priority(&self) -> &[String] {
        &self.signal_priority
    }

    pub fn mo_types(&self) -> &[String] {
        &self.mo_types
    }

    pub fn modes(&self) -> &[String] {
        &self.modes
    }

    pub fn feature(&self, id: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.id == id)
    }

    pub fn has_feature(&self, id: &str) -> bool {
        self.feature(id).is_some()
    }

    /// Features in rendering order: the prioritized signals first, then the
    /// remaining features in declaration order.
    pub fn ordered_features(&self) -> Vec<&FeatureSpec> {
        let mut out: Vec<&FeatureSpec> = self
            .signal_priority
            .iter()
            .filter_map(|id| self.feature(id))
            .collect();
        for f in &self.features {
            if !self.signal_priority.contains(&f.id) {
                out.push(f);
            }
        }
        out
    }

    pub fn with_signal_priority(&self, priority: Vec<String>) -> Result<Self, SchemaError> {
        Self::new(
            self.features.clone(),
            priority,
            self.mo_types.clone(),
            self.modes.clone(),
        )
    }

    /// Canonical JSON document; `load_schema(&s.render())` reproduces `s`.
    pub fn render(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }
}

impl<'de> Deserialize<'de> for FeatureSchema {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = SchemaDocument::deserialize(d)?;
        from_document(doc).map_err(serde::de::Error::custom)
    }
}

fn from_document(doc: SchemaDocument) -> Result<FeatureSchema, SchemaError> {
    let priority = doc
        .signal_priority
        .unwrap_or_else(|| doc.features.iter().map(|f| f.id.clone()).collect());
    let mo_types = doc
        .mo_types
        .unwrap_or_else(|| DEFAULT_MO_TYPES.iter().map(|s| s.to_string()).collect());
    let modes = doc
        .modes
        .unwrap_or_else(|| REQUIRED_MODES.iter().map(|s| s.to_string()).collect());
    FeatureSchema::new(doc.features, priority, mo_types, modes)
}

pub fn load_schema(document: &str) -> Result<FeatureSchema, SchemaError> {
    let doc: SchemaDocument = serde_json::from_str(document)?;
    from_document(doc)
}

/// A single feature value. JSON `null` is an explicit missing value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Bool(bool),
    Number(f64),
    Text(String),
    Missing,
}

impl FeatureValue {
    pub fn is_missing(&self) -> bool {
        matches!(self, FeatureValue::Missing)
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            FeatureValue::Number(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            FeatureValue::Text(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            FeatureValue::Bool(b) => Some(*b),
            _ => None,
        }
    }
}

impl From<f64> for FeatureValue {
    fn from(v: f64) -> Self {
        FeatureValue::Number(v)
    }
}

impl From<&str> for FeatureValue {
    fn from(v: &str) -> Self {
        FeatureValue::Text(v.to_string())
    }
}

impl From<bool> for FeatureValue {
    fn from(v: bool) -> Self {
        FeatureValue::Bool(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionRecord {
    pub id: String,
    pub mode: String,
    #[serde(default)]
    pub timestamp: i64,
    #[serde(default)]
    pub values: BTreeMap<String, FeatureValue>,
}

impl TransactionRecord {
    pub fn new(id: impl Into<String>, mode: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            mode: mode.into(),
            timestamp: 0,
            values: BTreeMap::new(),
        }
    }

    pub fn with(mut self, feature: &str, value: impl Into<FeatureValue>) -> Self {
        self.values.insert(feature.to_string(), value.into());
        self
    }

    pub fn with_missing(mut self, feature: &str) -> Self {
        self.values.insert(feature.to_string(), FeatureValue::Missing);
        self
    }

    /// Value of a feature; absent entries read as missing and the `mode`
    /// pseudo-feature reads the record's mode.
    pub fn value(&self, feature: &str) -> FeatureValue {
        match self.values.get(feature) {
            Some(v) => v.clone(),
            None if feature == MODE_FEATURE => FeatureValue::Text(self.mode.clone()),
            None => FeatureValue::Missing,
        }
    }

    pub fn number(&self, feature: &str) -> Option<f64> {
        self.values.get(feature).and_then(FeatureValue::as_number)
    }
}

/// Checks `record` against `schema` and hands it back unchanged when valid.
pub fn validate_record(
    record: TransactionRecord,
    schema: &FeatureSchema,
) -> Result<TransactionRecord, RecordError> {
    check_record(&record, schema)?;
    Ok(record)
}

pub fn check_record(record: &TransactionRecord, schema: &FeatureSchema) -> Result<(), RecordError> {
    let rid = || record.id.clone();
    if record.id.trim().is_empty() {
        return Err(RecordError::EmptyId);
    }
    if !schema.modes().iter().any(|m| *m == record.mode) {
        return Err(RecordError::BadMode {
            record: rid(),
            mode: record.mode.clone(),
        });
    }
    for (key, value) in &record.values {
        if key == MODE_FEATURE {
            match value {
                FeatureValue::Text(m) if *m == record.mode => continue,
                _ => {
                    return Err(RecordError::BadMode {
                        record: rid(),
                        mode: format!("{value:?}"),
                    })
                }
            }
        }
        let spec = schema.feature(key).ok_or_else(|| RecordError::UnknownFeature {
            record: rid(),
            feature: key.clone(),
        })?;
        let bad = |reason: &str| RecordError::BadValueKind {
            record: rid(),
            feature: key.clone(),
            reason: reason.to_string(),
        };
        match (spec.kind, value) {
            (_, FeatureValue::Missing) => {}
            (FeatureKind::Numeric, FeatureValue::Number(v)) => {
                if !v.is_finite() {
                    return Err(bad("must be finite"));
                }
                if spec.non_negative && *v < 0.0 {
                    return Err(bad("must be non-negative"));
                }
            }
            (FeatureKind::Numeric, _) => return Err(bad("expects a number")),
            (FeatureKind::Text | FeatureKind::Categorical, FeatureValue::Text(_)) => {}
            (FeatureKind::Text | FeatureKind::Categorical, _) => {
                return Err(bad("expects a string"))
            }
            (FeatureKind::Boolean, FeatureValue::Bool(_)) => {}
            (FeatureKind::Boolean, _) => return Err(bad("expects a boolean")),
        }
    }
    for spec in schema.features() {
        if spec.required && spec.id != MODE_FEATURE && !record.values.contains_key(&spec.id) {
            return Err(RecordError::MissingRequired {
                record: rid(),
                feature: spec.id.clone(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    #[serde(alias = "not scam")]
    NotScam,
    Scam,
}

impl Label {
    pub fn is_scam(self) -> bool {
        self == Label::Scam
    }

    /// Wording used in prompts and completions.
    pub fn as_text(self) -> &'static str {
        match self {
            Label::Scam => "scam",
            Label::NotScam => "not scam",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_text())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    #[serde(alias = "fraud")]
    SupportsFraud,
    #[serde(alias = "legitimacy", alias = "legit")]
    SupportsLegitimacy,
}

/// Canonical key for matching generated reasons against reviewer reasons.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReasonTag {
    pub signal_id: String,
    pub polarity: Polarity,
}

impl ReasonTag {
    pub fn new(signal_id: impl Into<String>, polarity: Polarity) -> Self {
        Self {
            signal_id: signal_id.into(),
            polarity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewerReason {
    #[serde(flatten)]
    pub tag: ReasonTag,
    #[serde(rename = "text", default)]
    pub free_text: String,
}

impl ReviewerReason {
    pub fn new(signal_id: &str, polarity: Polarity, text: &str) -> Self {
        Self {
            tag: ReasonTag::new(signal_id, polarity),
            free_text: text.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTransaction {
    #[serde(flatten)]
    pub record: TransactionRecord,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reviewer_notes: Vec<ReviewerReason>,
    /// Reviewer-assigned modus operandi, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mo: Option<String>,
}

impl LabeledTransaction {
    pub fn new(record: TransactionRecord, label: Label) -> Self {
        Self {
            record,
            label,
            reviewer_notes: Vec::new(),
            mo: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.record.id
    }

    /// Validates the record and that every reviewer note references a schema feature.
    pub fn check(&self, schema: &FeatureSchema) -> Result<(), RecordError> {
        check_record(&self.record, schema)?;
        for note in &self.reviewer_notes {
            if !schema.has_feature(&note.tag.signal_id) {
                return Err(RecordError::UnknownFeature {
                    record: self.record.id.clone(),
                    feature: note.tag.signal_id.clone(),
                });
            }
        }
        Ok(())
    }
}
