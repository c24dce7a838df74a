//! Drives the review store directly: enqueue, lease, decide, give feedback,
//! export, then replay the event log.

use std::sync::Arc;
use std::time::Duration;

use scamlens::pipeline::AssistantOutput;
use scamlens::prompt::PromptKind;
use scamlens::review::{annotations_jsonl, ReasonFeedback, ReviewStore, SystemClock, Vote};
use scamlens::schema::{FeatureSchema, Label, Polarity, TransactionRecord};

fn main() {
    let schema = FeatureSchema::bundled();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    let store = ReviewStore::open(&log, Arc::new(SystemClock), Duration::from_secs(1800)).unwrap();

    let answer = "FRAUD_REASONS:\n- [memo] asks for an OTP\nLEGIT_REASONS:\nVERDICT: fraudulent\nMO: phishing\nCONFIDENCE: 0.81\n";
    let items = (0..3)
        .map(|i| {
            (
                TransactionRecord::new(format!("r{i}"), "qr_scan").with("amount", 100.0 * i as f64),
                AssistantOutput::from_completion(PromptKind::Reasoning, answer, &schema, "v1"),
            )
        })
        .collect();
    for o in store.enqueue(items).unwrap() {
        println!("{} -> {} (created {})", o.record_id, o.case_id, o.created);
    }

    let case = store.next_case("alice").unwrap().unwrap();
    println!("alice leased {}", case.case_id);
    store.submit_verdict(&case.case_id, "alice", Label::Scam).unwrap();
    store
        .submit_feedback(ReasonFeedback {
            case_id: case.case_id.clone(),
            polarity: Polarity::SupportsFraud,
            reason_index: 0,
            rating: Vote::Up,
            note: None,
            reviewer: Some("alice".into()),
        })
        .unwrap();
    println!("queue: {:?}", store.snapshot().counts());
    print!("export:\n{}", annotations_jsonl(&store.export_decisions()));

    drop(store);
    let replayed = ReviewStore::open(&log, Arc::new(SystemClock), Duration::from_secs(1800)).unwrap();
    println!("after replay: {:?}", replayed.snapshot().counts());
}
