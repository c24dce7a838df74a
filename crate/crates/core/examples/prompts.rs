//! Builds a classifier prompt and a reasoning prompt for the same record.

use scamlens::featurize::fit_bins;
use scamlens::pipeline::select_exemplars;
use scamlens::prompt::{build_prompt, PromptConfig, PromptKind};
use scamlens::schema::FeatureSchema;
use scamlens::synth::{generate, SynthConfig};

fn main() {
    let schema = FeatureSchema::bundled();
    let (data, _) = generate(&SynthConfig { n: 200, ..SynthConfig::default() });
    let model = fit_bins(&data, &schema).unwrap();
    let cfg = PromptConfig::default();
    let target = &data.last().unwrap().record;

    for kind in [PromptKind::Classifier, PromptKind::Reasoning] {
        let exemplars = select_exemplars(&data, kind, &schema, &model, &cfg).unwrap();
        let p = build_prompt(kind, target, &schema, &model, &exemplars, &cfg).unwrap();
        println!("===== {kind:?} ({} chars, exemplars {:?}) =====", p.text.len(), p.exemplar_ids);
        println!("{}", p.text);
    }
}
