//! Occupational-association bias auditing for generative language models.
//!
//! The pipeline plans demographic prompt templates, collects completions from a
//! generation backend, extracts job titles into a frequency matrix, and then
//! measures inequality, fits per-job logistic regressions and compares
//! predictions against labor-market statistics.

pub mod benchmark;
pub mod demography;
pub mod error;
pub mod extract;
pub mod genclient;
pub mod inequality;
pub mod pipeline;
pub mod regress;

pub use error::{Error, Result};
