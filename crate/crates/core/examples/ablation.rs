//! Compares serialization settings by the prompt length they produce for
//! the same record.

use scamlens::featurize::{fit_bins, SerializeOptions};
use scamlens::pipeline::select_exemplars;
use scamlens::prompt::{build_prompt, PromptConfig, PromptKind};
use scamlens::schema::FeatureSchema;
use scamlens::synth::{generate, SynthConfig};

fn main() {
    let schema = FeatureSchema::bundled();
    let (data, _) = generate(&SynthConfig { n: 200, ..SynthConfig::default() });
    let model = fit_bins(&data, &schema).unwrap();
    let record = &data[10].record;

    for raw in [true, false] {
        for categorical in [true, false] {
            for context in [true, false] {
                let cfg = PromptConfig {
                    serialize: SerializeOptions {
                        include_raw_numeric: raw,
                        include_categorical: categorical,
                        max_signals: None,
                    },
                    include_text_context: context,
                    ..PromptConfig::default()
                };
                let ex = select_exemplars(&data, PromptKind::Reasoning, &schema, &model, &cfg).unwrap();
                let p = build_prompt(PromptKind::Reasoning, record, &schema, &model, &ex, &cfg).unwrap();
                println!("raw={raw:<5} categorical={categorical:<5} context={context:<5} -> {:>5} chars", p.text.len());
            }
        }
    }
}
