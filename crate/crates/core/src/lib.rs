//! Two-step chest X-ray findings pipeline.
//!
//! Detected abnormalities are serialized into a prompt, a generation
//! backend writes the Findings text, and the result is scored with ROUGE-L
//! against ground-truth Findings from which negated and device sentences
//! have been removed.
//!
//! Modules follow the data flow: [`corpus`] (records, report sections,
//! sentences, splits), [`filter`], [`detect`], [`prompt`], [`generate`],
//! [`rouge`] and [`pipeline`], which wires them together.

pub mod corpus;
pub mod detect;
pub mod filter;
pub mod generate;
pub mod pipeline;
pub mod prompt;
pub mod records;
pub mod rouge;
