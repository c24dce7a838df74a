//! Synthetic labeled corpora with planted outcomes.
//!
//! Every record is assigned a confusion cell before its features are drawn.
//! Records planted as positive carry a suspicious memo keyword and at least
//! one spam report; all others carry a benign memo and none. Under the
//! default rule-oracle settings this fixes which side of τ = 0.5 each record
//! lands on, whatever its amount or payment history.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::schema::{Label, LabeledTransaction, Polarity, ReviewerReason, TransactionRecord, REQUIRED_MODES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantedCell {
    TruePositive,
    FalseNegative,
    FalsePositive,
    TrueNegative,
}

impl PlantedCell {
    pub fn label(self) -> Label {
        match self {
            PlantedCell::TruePositive | PlantedCell::FalseNegative => Label::Scam,
            PlantedCell::FalsePositive | PlantedCell::TrueNegative => Label::NotScam,
        }
    }

    /// Whether the record carries the planted risk signals.
    pub fn flagged(self) -> bool {
        matches!(self, PlantedCell::TruePositive | PlantedCell::FalsePositive)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Planted {
    pub id: String,
    pub cell: PlantedCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub scam_rate: f64,
    /// Fraction of scams planted without risk signals.
    pub false_negative_rate: f64,
    /// Fraction of legitimate records planted with risk signals.
    pub false_positive_rate: f64,
    /// Probability that an optional numeric feature is missing.
    pub missing_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            seed: 7,
            scam_rate: 0.2,
            false_negative_rate: 0.1,
            false_positive_rate: 0.05,
            missing_rate: 0.03,
        }
    }
}

pub const LURE_MEMOS: [&str; 8] = [
    "Claim your lottery prize today",
    "KYC pending, share OTP to avoid block",
    "Refund processing fee",
    "Cashback reward activation",
    "Urgent: account blocked, pay to verify",
    "Investment returns guaranteed double",
    "You are the lucky winner",
    "Pay to receive refund of order",
];

pub const BENIGN_MEMOS: [&str; 10] = [
    "rent for the month",
    "groceries",
    "dinner split",
    "electricity bill",
    "school fees",
    "tea stall",
    "cab fare",
    "book order 1182",
    "birthday gift",
    "",
];

fn counts(cfg: &SynthConfig) -> [usize; 4] {
    let scams = (cfg.n as f64 * cfg.scam_rate).round() as usize;
    let scams = scams.min(cfg.n);
    let legit = cfg.n - scams;
    let fn_ = ((scams as f64 * cfg.false_negative_rate).round() as usize).min(scams);
    let fp = ((legit as f64 * cfg.false_positive_rate).round() as usize).min(legit);
    [scams - fn_, fn_, fp, legit - fp]
}

fn maybe(rng: &mut impl Rng, cfg: &SynthConfig, v: f64) -> Option<f64> {
    (rng.random::<f64>() >= cfg.missing_rate).then_some(v)
}

fn record(id: String, cell: PlantedCell, rng: &mut impl Rng, cfg: &SynthConfig) -> LabeledTransaction {
    let mode = REQUIRED_MODES[rng.random_range(0..REQUIRED_MODES.len())];
    let amount = (10f64.powf(rng.random_range(1.0..5.3)) * 100.0).round() / 100.0;
    let memo = if cell.flagged() {
        LURE_MEMOS[rng.random_range(0..LURE_MEMOS.len())]
    } else {
        BENIGN_MEMOS[rng.random_range(0..BENIGN_MEMOS.len())]
    };
    let spam = if cell.flagged() { rng.random_range(1..=6) } else { 0 } as f64;
    let prior = if rng.random_bool(0.3) { 0.0 } else { rng.random_range(1..40) as f64 };
    let merchant = rng.random_bool(0.35);
    let mut r = TransactionRecord::new(id, mode)
        .with("amount", amount)
        .with("memo", memo)
        .with("payee_spam_reports", spam)
        .with("payer_payee_prior_txns", prior)
        .with("is_merchant", merchant)
        .with("is_external_merchant", merchant && rng.random_bool(0.5))
        .with("is_payment_request", rng.random_bool(0.25));
    for (feature, v) in [
        ("payer_account_age_days", rng.random_range(1..3650) as f64),
        ("payer_txn_count", rng.random_range(0..2000) as f64),
        ("payee_account_age_days", rng.random_range(1..3650) as f64),
        ("payee_txn_count", rng.random_range(0..5000) as f64),
    ] {
        r = match maybe(rng, cfg, v) {
            Some(v) => r.with(feature, v),
            None => r.with_missing(feature),
        };
    }
    r.timestamp = 1_700_000_000 + rng.random_range(0..31_536_000);

    let mut t = LabeledTransaction::new(r, cell.label());
    let note = |id: &str, p, text: &str| ReviewerReason::new(id, p, text);
    match cell {
        PlantedCell::TruePositive => {
            t.reviewer_notes = vec![
                note("memo", Polarity::SupportsFraud, "memo uses a typical scam lure"),
                note("payee_spam_reports", Polarity::SupportsFraud, "payee has been reported by other users"),
            ];
            t.mo = Some("phishing".into());
        }
        PlantedCell::FalseNegative => {
            t.reviewer_notes = vec![note(
                "payee_account_age_days",
                Polarity::SupportsFraud,
                "payee identity later confirmed as an impostor",
            )];
            t.mo = Some("impersonation".into());
        }
        PlantedCell::FalsePositive => {
            t.reviewer_notes = vec![note(
                "payer_payee_prior_txns",
                Polarity::SupportsLegitimacy,
                "payer confirmed the promotion was genuine",
            )];
        }
        PlantedCell::TrueNegative => {
            t.reviewer_notes = vec![note(
                "payee_spam_reports",
                Polarity::SupportsLegitimacy,
                "payee has a clean report history",
            )];
        }
    }
    t
}

/// Generates `cfg.n` labeled records in shuffled order, plus the planted
/// cell of each.
pub fn generate(cfg: &SynthConfig) -> (Vec<LabeledTransaction>, Vec<Planted>) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let [tp, fn_, fp, tn] = counts(cfg);
    let mut cells: Vec<PlantedCell> = [
        (PlantedCell::TruePositive, tp),
        (PlantedCell::FalseNegative, fn_),
        (PlantedCell::FalsePositive, fp),
        (PlantedCell::TrueNegative, tn),
    ]
    .into_iter()
    .flat_map(|(c, k)| std::iter::repeat_n(c, k))
    .collect();
    cells.shuffle(&mut rng);
    let width = cfg.n.max(1).to_string().len();
    let mut data = Vec::with_capacity(cfg.n);
    let mut planted = Vec::with_capacity(cfg.n);
    for (i, cell) in cells.into_iter().enumerate() {
        let id = format!("txn-{i:0width$}");
        planted.push(Planted { id: id.clone(), cell });
        data.push(record(id, cell, &mut rng, cfg));
    }
    (data, planted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{rule_oracle_evaluate, RuleOracleConfig};
    use crate::featurize::fit_bins;
    use crate::schema::FeatureSchema;

    #[test]
    fn cell_counts_and_validity() {
        let cfg = SynthConfig::default();
        let (data, planted) = generate(&cfg);
        assert_eq!(data.len(), 1000);
        let count = |c| planted.iter().filter(|p| p.cell == c).count();
        assert_eq!(count(PlantedCell::TruePositive), 180);
        assert_eq!(count(PlantedCell::FalseNegative), 20);
        assert_eq!(count(PlantedCell::FalsePositive), 40);
        assert_eq!(count(PlantedCell::TrueNegative), 760);
        let s = FeatureSchema::bundled();
        for t in &data {
            t.check(&s).unwrap();
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig { n: 50, ..Default::default() };
        assert_eq!(generate(&cfg), generate(&cfg));
        let other = SynthConfig { seed: 8, ..cfg.clone() };
        assert_ne!(generate(&cfg).0, generate(&other).0);
    }

    #[test]
    fn planted_side_of_threshold_holds_under_default_oracle() {
        let (data, planted) = generate(&SynthConfig::default());
        let s = FeatureSchema::bundled();
        let model = fit_bins(&data, &s).unwrap();
        let cfg = RuleOracleConfig::default();
        for (t, p) in data.iter().zip(&planted) {
            let out = rule_oracle_evaluate(&t.record, &s, &model, &cfg);
            assert_eq!(out.confidence >= 0.5, p.cell.flagged(), "{}", p.id);
        }
    }
}
