//! Examination-style question generation over RACE passages: corpus
//! construction, keyword tagging, answer-guided dependency graphs, the
//! neural generator and its evaluation metrics.

pub mod corpus;
pub mod depgraph;
pub mod jsonl;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tagging;
pub mod textmetrics;
