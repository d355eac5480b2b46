//! Pre-print screening of FFF machine programs.
//!
//! The pipeline turns a G-code file plus a printer and material identifier
//! into one of five labels (ND, UE, OE, WP, ST) through a sequence of
//! auditable stages: lossless parsing and deterministic shortening
//! ([`gcode`]), schema-constrained parameter extraction with unit
//! normalization ([`schema`]), manual-grounded reference ranges
//! ([`reference`]), a deterministic deviation table ([`deviation`]), and an
//! evidence-integrating judge ([`agents`]). Model calls go through a
//! provider-agnostic gateway ([`gateway`]) with deterministic offline stubs
//! for every role; artifacts and run metadata are persisted by [`store`];
//! [`eval`] reproduces the benchmark protocol (extraction scoring, the
//! reference×judge grid, baseline comparison) and [`corpus`] generates the
//! synthetic test corpus everything runs against offline.

pub mod agents;
pub mod corpus;
pub mod deviation;
pub mod eval;
pub mod gateway;
pub mod gcode;
pub mod label;
pub mod prompts;
pub mod reference;
pub mod schema;
pub mod store;
