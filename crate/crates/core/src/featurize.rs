//! Data preparation: quantile binning of numeric features, record-to-text
//! serialization, stratified splitting and class balancing.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{
    FeatureKind, FeatureSchema, FeatureValue, Label, LabeledTransaction, TransactionRecord,
    MODE_FEATURE,
};

/// Minimum non-missing training values needed to fit a feature's boundaries.
pub const MIN_FIT_SAMPLES: usize = 5;

pub const UNKNOWN: &str = "unknown";

#[derive(Debug, Error, PartialEq)]
pub enum FeaturizeError {
    #[error("feature {feature:?} has {found} non-missing training values, need at least {MIN_FIT_SAMPLES}")]
    TooFewSamples { feature: String, found: usize },
    #[error("feature {0:?} is not binned by the model")]
    UnbinnedFeature(String),
    #[error("invalid binning model: {0}")]
    InvalidModel(String),
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("dataset must contain both labels")]
    SingleClassDataset,
    #[error("target scam fraction must lie strictly between 0 and 1, got {0}")]
    InvalidTarget(f64),
}

/// The five descriptive categories, ordered from lowest to highest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bucket {
    #[serde(rename = "very low")]
    VeryLow,
    #[serde(rename = "low")]
    Low,
    #[serde(rename = "medium")]
    Medium,
    #[serde(rename = "high")]
    High,
    #[serde(rename = "very high")]
    VeryHigh,
}

impl Bucket {
    pub const ALL: [Bucket; 5] = [
        Bucket::VeryLow,
        Bucket::Low,
        Bucket::Medium,
        Bucket::High,
        Bucket::VeryHigh,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::VeryLow => "very low",
            Bucket::Low => "low",
            Bucket::Medium => "medium",
            Bucket::High => "high",
            Bucket::VeryHigh => "very high",
        }
    }

    pub fn parse(s: &str) -> Option<Bucket> {
        Bucket::ALL.into_iter().find(|b| b.as_str() == s)
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBins {
    pub boundaries: [f64; 4],
    pub n: usize,
}

impl FeatureBins {
    pub fn bucket(&self, v: f64) -> Bucket {
        let [b1, b2, b3, b4] = self.boundaries;
        if v <= b1 {
            Bucket::VeryLow
        } else if v <= b2 {
            Bucket::Low
        } else if v <= b3 {
            Bucket::Medium
        } else if v <= b4 {
            Bucket::High
        } else {
            Bucket::VeryHigh
        }
    }
}

/// Per-feature quantile boundaries. Persists as
/// `{feature_id: {"boundaries": [b1, b2, b3, b4], "n": count}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
#[serde(transparent)]
pub struct BinningModel {
    bins: BTreeMap<String, FeatureBins>,
}

impl BinningModel {
    pub fn from_bins(bins: BTreeMap<String, FeatureBins>) -> Result<Self, FeaturizeError> {
        for (id, fb) in &bins {
            if fb.boundaries.iter().any(|b| !b.is_finite()) {
                return Err(FeaturizeError::InvalidModel(format!(
                    "{id}: non-finite boundary"
                )));
            }
            if fb.boundaries.windows(2).any(|w| w[0] > w[1]) {
                return Err(FeaturizeError::InvalidModel(format!(
                    "{id}: boundaries decrease"
                )));
            }
            if fb.n < MIN_FIT_SAMPLES {
                return Err(FeaturizeError::InvalidModel(format!(
                    "{id}: fit count {} below {MIN_FIT_SAMPLES}",
                    fb.n
                )));
            }
        }
        Ok(Self { bins })
    }

    pub fn get(&self, feature: &str) -> Option<&FeatureBins> {
        self.bins.get(feature)
    }

    pub fn features(&self) -> impl Iterator<Item = &str> {
        self.bins.keys().map(String::as_str)
    }

    pub fn bucket(&self, feature: &str, value: f64) -> Result<Bucket, FeaturizeError> {
        self.bins
            .get(feature)
            .map(|b| b.bucket(value))
            .ok_or_else(|| FeaturizeError::UnbinnedFeature(feature.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, FeaturizeError> {
        let bins: BTreeMap<String, FeatureBins> =
            serde_json::from_str(s).map_err(|e| FeaturizeError::InvalidModel(e.to_string()))?;
        Self::from_bins(bins)
    }
}

impl<'de> Deserialize<'de> for BinningModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let bins = BTreeMap::<String, FeatureBins>::deserialize(d)?;
        Self::from_bins(bins).map_err(serde::de::Error::custom)
    }
}

/// Nearest-rank quantile boundaries at p = 0.2, 0.4, 0.6, 0.8 of `values`.
///
/// The k-th boundary is the element at 1-based rank ⌈k·n/5⌉ of the sorted
/// values, computed in integer arithmetic.
pub fn nearest_rank_boundaries(values: &[f64]) -> [f64; 4] {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut out = [0.0; 4];
    for (k, slot) in (1..=4).zip(out.iter_mut()) {
        let rank = (k * n).div_ceil(5);
        *slot = sorted[rank.max(1) - 1];
    }
    out
}

/// Fits boundaries for every numeric schema feature from the training set.
pub fn fit_bins(
    training: &[LabeledTransaction],
    schema: &FeatureSchema,
) -> Result<BinningModel, FeaturizeError> {
    let mut bins = BTreeMap::new();
    for spec in schema.features() {
        if spec.kind != FeatureKind::Numeric || spec.id == MODE_FEATURE {
            continue;
        }
        let values: Vec<f64> = training
            .iter()
            .filter_map(|t| t.record.number(&spec.id))
            .collect();
        if values.len() < MIN_FIT_SAMPLES {
            return Err(FeaturizeError::TooFewSamples {
                feature: spec.id.clone(),
                found: values.len(),
            });
        }
        bins.insert(
            spec.id.clone(),
            FeatureBins {
                boundaries: nearest_rank_boundaries(&values),
                n: values.len(),
            },
        );
    }
    BinningModel::from_bins(bins)
}

/// Category text for a value: `unknown` when missing, else its bucket name.
pub fn bucketize(
    value: Option<f64>,
    feature: &str,
    model: &BinningModel,
) -> Result<&'static str, FeaturizeError> {
    let bins = model
        .get(feature)
        .ok_or_else(|| FeaturizeError::UnbinnedFeature(feature.to_string()))?;
    Ok(match value {
        None => UNKNOWN,
        Some(v) => bins.bucket(v).as_str(),
    })
}

/// Shortest round-trip decimal rendering (`50`, `0.1`, `1250.5`).
pub fn format_number(v: f64) -> String {
    format!("{v}")
}

/// Controls how numeric features appear in serialized text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializeOptions {
    pub include_raw_numeric: bool,
    pub include_categorical: bool,
    /// Keep only the first N signals in priority order.
    pub max_signals: Option<usize>,
}

impl Default for SerializeOptions {
    fn default() -> Self {
        Self {
            include_raw_numeric: true,
            include_categorical: true,
            max_signals: None,
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Renders the display value of one feature, or `None` when the options drop it.
pub fn render_value(
    record: &TransactionRecord,
    feature: &crate::schema::FeatureSpec,
    model: &BinningModel,
    opts: &SerializeOptions,
) -> Result<Option<String>, FeaturizeError> {
    let value = record.value(&feature.id);
    let text = match (feature.kind, &value) {
        (FeatureKind::Numeric, _) if !opts.include_raw_numeric && !opts.include_categorical => {
            return Ok(None)
        }
        (_, FeatureValue::Missing) => UNKNOWN.to_string(),
        (FeatureKind::Numeric, FeatureValue::Number(v)) => {
            match (opts.include_categorical, opts.include_raw_numeric) {
                (true, true) => format!(
                    "{} (raw: {})",
                    bucketize(Some(*v), &feature.id, model)?,
                    format_number(*v)
                ),
                (true, false) => bucketize(Some(*v), &feature.id, model)?.to_string(),
                _ => format_number(*v),
            }
        }
        (_, FeatureValue::Bool(b)) => if *b { "yes" } else { "no" }.to_string(),
        (_, FeatureValue::Text(t)) => {
            let t = one_line(t);
            if t.is_empty() {
                "(empty)".to_string()
            } else {
                t
            }
        }
        (_, FeatureValue::Number(v)) => format_number(*v),
    };
    Ok(Some(text))
}

/// One `<description>: <value>` line per feature, prioritized signals first.
pub fn serialize_record(
    record: &TransactionRecord,
    schema: &FeatureSchema,
    model: &BinningModel,
    opts: &SerializeOptions,
) -> Result<String, FeaturizeError> {
    let features = schema.ordered_features();
    let limit = opts.max_signals.unwrap_or(features.len());
    let mut out = String::new();
    for spec in features.into_iter().take(limit) {
        if let Some(v) = render_value(record, spec, model, opts)? {
            out.push_str(&spec.description);
            out.push_str(": ");
            out.push_str(&v);
            out.push('\n');
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    ratios: [f64; 3],
    seed: u64,
}

impl SplitSpec {
    pub fn new(ratios: [f64; 3], seed: u64) -> Result<Self, FeaturizeError> {
        let sum: f64 = ratios.iter().sum();
        if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(FeaturizeError::InvalidRatios(ratios));
        }
        Ok(Self { ratios, seed })
    }

    pub fn ratios(&self) -> [f64; 3] {
        self.ratios
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<LabeledTransaction>,
    pub validation: Vec<LabeledTransaction>,
    pub test: Vec<LabeledTransaction>,
}

/// Largest-remainder apportionment of `n` items over `ratios`.
fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = ratios
        .iter()
        .map(|r| {
            let q = r * n as f64;
            if (q - q.round()).abs() < 1e-9 {
                q.round()
            } else {
                q
            }
        })
        .collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = q.floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Per-label shuffle then contiguous slicing. Each part keeps input order.
pub fn stratified_split(
    dataset: &[LabeledTransaction],
    spec: &SplitSpec,
) -> Result<Split, FeaturizeError> {
    let mut part_of = vec![0u8; dataset.len()];
    let mut rng = rng(spec.seed);
    let mut seen_labels = 0;
    for label in [Label::Scam, Label::NotScam] {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset[i].label == label)
            .collect();
        if idx.is_empty() {
            continue;
        }
        seen_labels += 1;
        idx.shuffle(&mut rng);
        let [train, val, _] = apportion(idx.len(), spec.ratios);
        for (pos, &i) in idx.iter().enumerate() {
            part_of[i] = if pos < train {
                0
            } else if pos < train + val {
                1
            } else {
                2
            };
        }
    }
    if seen_labels < 2 {
        return Err(FeaturizeError::SingleClassDataset);
    }
    let mut split = Split {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (t, part) in dataset.iter().zip(part_of) {
        match part {
            0 => split.train.push(t.clone()),
            1 => split.validation.push(t.clone()),
            _ => split.test.push(t.clone()),
        }
    }
    Ok(split)
}

/// Downsamples the majority side so the scam fraction approaches `target`.
pub fn balance(
    dataset: &[LabeledTransaction],
    target_scam_fraction: f64,
    seed: u64,
) -> Result<Vec<LabeledTransaction>, FeaturizeError> {
    let t = target_scam_fraction;
    if !(t > 0.0 && t < 1.0) {
        return Err(FeaturizeError::InvalidTarget(t));
    }
    let scam = dataset.iter().filter(|d| d.label.is_scam()).count();
    let legit = dataset.len() - scam;
    if scam == 0 || legit == 0 {
        return Err(FeaturizeError::SingleClassDataset);
    }
    let (drop_label, keep) = if (scam as f64) / (dataset.len() as f64) < t {
        let want = (scam as f64 * (1.0 - t) / t).round() as usize;
        (Label::NotScam, want.clamp(1, legit))
    } else {
        let want = (legit as f64 * t / (1.0 - t)).round() as usize;
        (Label::Scam, want.clamp(1, scam))
    };
    let mut idx: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset[i].label == drop_label)
        .collect();
    idx.shuffle(&mut rng(seed));
    let mut kept = vec![true; dataset.len()];
    for &i in &idx[keep..] {
        kept[i] = false;
    }
    Ok(dataset
        .iter()
        .zip(kept)
        .filter(|(_, k)| *k)
        .map(|(d, _)| d.clone())
        .collect())
}
