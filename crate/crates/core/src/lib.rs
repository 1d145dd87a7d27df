//! Context-aware abstention for multimodal question answering over video
//! clips: synthetic data, temporal context pipeline, task models with a
//! learned context selector, a context-blind sufficiency detector and
//! risk/coverage evaluation.

pub mod cara;
pub mod checkpoint;
pub mod cli;
pub mod contextpipe;
pub mod datamodel;
pub mod error;
pub mod evalmetrics;
pub mod numerics;
pub mod pseudolabel;
pub mod selector;
pub mod taskmodel;
pub mod training;

pub use error::{Error, Result};
