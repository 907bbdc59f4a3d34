//! Synthetic web-server log corpora, reference annotation of known formats,
//! neural log-to-annotation translators and their evaluation.

pub mod corpus;
pub mod field_forge;
pub mod metrics;
pub mod neural;
pub mod truth;
