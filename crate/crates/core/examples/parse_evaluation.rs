//! Parses well-formed and messy assistant output with the tolerant parser.

use scamlens::evaluation::{parse_evaluation, parse_label, render_evaluation};
use scamlens::schema::FeatureSchema;

const MESSY: &str = "\
Sure! Here is my assessment.

**FRAUD_REASONS:**
* [memo] mentions a lottery prize
- [payee_risk_score] risky payee
- spam reports are high
**LEGIT_REASONS:**
- [payer_payee_prior_txns] the payer has paid before
**VERDICT:** Fraudulent
**MO:** Phishing.
**CONFIDENCE:** 87%
";

fn main() {
    let schema = FeatureSchema::bundled();
    let parsed = parse_evaluation(MESSY, &schema).unwrap();
    println!("verdict {}, mo {:?}, confidence {}", parsed.evaluation.verdict(), parsed.evaluation.mo(), parsed.evaluation.confidence());
    for w in &parsed.warnings {
        println!("warning: {w}");
    }
    println!("\ncanonical form:\n{}", render_evaluation(&parsed.evaluation));

    for bad in ["no verdict here", "VERDICT: fraudulent\nVERDICT: legitimate"] {
        println!("{bad:?} -> {}", parse_evaluation(bad, &schema).unwrap_err());
    }

    let label = parse_label("Not scam\nregular rent payment\nCONFIDENCE: 0.05").unwrap();
    println!("\nclassifier: {:?} ({}) {:?}", label.label, label.confidence, label.explanation);
}
