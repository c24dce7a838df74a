//! Assistive scam detection for UPI-style payment transactions.
//!
//! Records are validated against a [`schema::FeatureSchema`], discretized and
//! serialized into prompts, sent through a [`backend::Gateway`], parsed back
//! into structured [`evaluation::Evaluation`]s and scored against reviewer
//! labels. A review queue with an HTTP API sits on top.

pub mod backend;
pub mod evaluation;
pub mod featurize;
pub mod prompt;
pub mod schema;
pub mod metrics;
pub mod pipeline;
pub mod review;
pub mod synth;
pub mod cli;
