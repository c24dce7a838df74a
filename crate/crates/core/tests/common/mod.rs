#![allow(dead_code)]

use std::path::{Path, PathBuf};

use scamlens::featurize::BinningModel;
use scamlens::pipeline::select_exemplars;
use scamlens::prompt::{build_prompt, PromptConfig, PromptKind};
use scamlens::schema::{FeatureSchema, LabeledTransaction, TransactionRecord};

pub fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn fixture(name: &str) -> PathBuf {
    manifest_dir().join("tests/fixtures").join(name)
}

pub fn golden_path(record_id: &str, kind: PromptKind) -> PathBuf {
    let suffix = match kind {
        PromptKind::Classifier => "classifier",
        PromptKind::Reasoning => "reasoning",
    };
    manifest_dir().join("tests/golden").join(format!("{record_id}.{suffix}.txt"))
}

fn lines<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

pub fn fixture_records() -> Vec<TransactionRecord> {
    lines(&fixture("prompt_records.jsonl"))
}

/// Prompt text for every fixture record and both prompt kinds, with the
/// bundled schema and templates.
pub fn fixture_prompts() -> Vec<(String, PromptKind, String)> {
    let schema = FeatureSchema::bundled();
    let model = BinningModel::from_json(&std::fs::read_to_string(fixture("bins.json")).unwrap()).unwrap();
    let train: Vec<LabeledTransaction> = lines(&fixture("exemplars.jsonl"));
    let cfg = PromptConfig::default();
    let mut out = Vec::new();
    for kind in [PromptKind::Classifier, PromptKind::Reasoning] {
        let exemplars = select_exemplars(&train, kind, &schema, &model, &cfg).unwrap();
        for r in fixture_records() {
            let p = build_prompt(kind, &r, &schema, &model, &exemplars, &cfg).unwrap();
            out.push((r.id.clone(), kind, p.text));
        }
    }
    out
}

/// Writes missing goldens when `SCAMLENS_BLESS=1`, otherwise reads them.
pub fn golden(record_id: &str, kind: PromptKind, actual: &str) -> String {
    let path = golden_path(record_id, kind);
    if std::env::var("SCAMLENS_BLESS").as_deref() == Ok("1") {
        std::fs::write(&path, actual).unwrap();
    }
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
