//! Review-grounded task-oriented dialogue engine.
//!
//! The pipeline runs four stages over a dialogue context whose last turn is a
//! user request:
//!
//! 1. [`detect`]: does the request need subjective knowledge (customer reviews)?
//! 2. [`track`]: which entities is the user talking about?
//! 3. [`select`]: which review sentences of those entities are relevant?
//! 4. [`generate`]: turn the selected sentences into a two-sided answer,
//!    using per-sentence sentiment from [`absa`].
//!
//! [`metrics`] holds every evaluation measure and [`runtime`] wires the stages
//! into batch runs and interactive sessions. Neural scorers, taggers and
//! generators are reached through the JSON protocols in [`external`].

pub mod absa;
pub mod corpus;
pub mod detect;
pub mod error;
pub mod external;
pub mod generate;
pub mod metrics;
pub mod runtime;
pub mod select;
pub mod track;

pub use error::{Error, Result};
