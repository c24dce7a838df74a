//! Checks transaction records against the bundled feature schema.

use scamlens::schema::{check_record, FeatureSchema, TransactionRecord};

fn main() {
    let schema = FeatureSchema::bundled();
    println!("{} features, modes: {}", schema.features().len(), schema.modes().join(", "));

    let good = TransactionRecord::new("t-1", "qr_scan")
        .with("amount", 499.0)
        .with("memo", "cab fare")
        .with("payee_spam_reports", 0.0)
        .with("payer_payee_prior_txns", 3.0);
    let bad_mode = TransactionRecord::new("t-2", "carrier_pigeon").with("amount", 10.0);
    let negative = good.clone().with("amount", -5.0);
    let stray = good.clone().with("device_id", "abc");

    for r in [&good, &bad_mode, &negative, &stray] {
        match check_record(r, &schema) {
            Ok(()) => println!("{}: ok", r.id),
            Err(e) => println!("{}: {e}", r.id),
        }
    }
}
