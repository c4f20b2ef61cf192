//! Prototype-based interpretable text classification.
//!
//! Text is split into n-gram parts, each part is embedded with a hashed
//! encoder, and a bank of prototypes scores the text through learned spans.

pub mod alignment;
pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod report;
pub mod span;
pub mod trainer;

pub use config::TrainConfig;
pub use data::Instance;
pub use error::{Error, Result};
pub use model::{Architecture, Model};
pub use report::ExplanationReport;
