//! Sorts generated reasons into correct, incorrect, hallucinated, missed and
//! new against reviewer notes, then computes reasoning accuracy.

use scamlens::evaluation::{Evaluation, Reason, SignalRef, Verdict};
use scamlens::featurize::fit_bins;
use scamlens::metrics::{categorize_reasons, quality_from_counts, reasoning_accuracy, ReasonCategoryCounts};
use scamlens::schema::{FeatureSchema, Polarity, ReviewerReason};
use scamlens::synth::{generate, SynthConfig};

fn main() {
    let schema = FeatureSchema::bundled();
    let (data, _) = generate(&SynthConfig { n: 100, ..SynthConfig::default() });
    let model = fit_bins(&data, &schema).unwrap();
    let txn = data.iter().find(|t| t.label.is_scam() && t.record.number("payee_spam_reports").unwrap_or(0.0) > 0.0).unwrap();
    let spam = txn.record.number("payee_spam_reports").unwrap();

    let generated = Evaluation::new(
        vec![
            Reason::known("memo", "the memo reads like a lure").unwrap(),
            Reason::known("payee_spam_reports", &format!("payee has {spam} spam reports")).unwrap(),
            Reason::new(SignalRef::Unresolvable("device_risk".into()), "device looks risky").unwrap(),
        ],
        vec![Reason::known("amount", "the amount is unknown").unwrap()],
        Verdict::Fraudulent,
        Some("phishing".into()),
        0.9,
    )
    .unwrap();
    let reviewer = vec![
        ReviewerReason::new("memo", Polarity::SupportsFraud, "lure"),
        ReviewerReason::new("payee_account_age_days", Polarity::SupportsFraud, "new payee"),
    ];

    let counts = categorize_reasons(&generated, &reviewer, &txn.record, &schema, &model);
    println!("{}: {counts:?}", txn.id());
    println!("accuracy on this case: {:.2}", reasoning_accuracy(&counts).unwrap());

    let published = ReasonCategoryCounts { c: 57, i: 6, h: 1, m: 4, n: 32 };
    println!("accuracy for C57 I6 H1 M4 N32: {}", reasoning_accuracy(&published).unwrap());
    println!("quality positive for 38/41/21: {}", quality_from_counts(38, 41, 21).unwrap().positive);
}
