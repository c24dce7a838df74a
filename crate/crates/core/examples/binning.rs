//! Fits nearest-rank quantile bins on a synthetic training split and renders
//! one record as text, with and without raw numbers.

use scamlens::featurize::{fit_bins, serialize_record, stratified_split, SerializeOptions, SplitSpec};
use scamlens::schema::FeatureSchema;
use scamlens::synth::{generate, SynthConfig};

fn main() {
    let schema = FeatureSchema::bundled();
    let (data, _) = generate(&SynthConfig::default());
    let split = stratified_split(&data, &SplitSpec::new([0.7, 0.15, 0.15], 42).unwrap()).unwrap();
    println!(
        "train {} / validation {} / test {}",
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );

    let model = fit_bins(&split.train, &schema).unwrap();
    for id in ["amount", "payee_spam_reports", "payer_payee_prior_txns"] {
        let b = model.get(id).unwrap();
        println!("{id:>24}: edges {:?} (n = {})", b.boundaries, b.n);
    }

    let record = &split.test[0].record;
    println!("\n{}", serialize_record(record, &schema, &model, &SerializeOptions::default()).unwrap());
    let bare = SerializeOptions {
        include_raw_numeric: false,
        max_signals: Some(4),
        ..SerializeOptions::default()
    };
    println!("\n{}", serialize_record(record, &schema, &model, &bare).unwrap());
}
