//! Online cost-aware routing between a paid teacher classifier and cheap local
//! students trained on the teacher's cached answers.

pub mod cache;
pub mod domain;
pub mod embedder;
pub mod error;
pub mod experiment;
pub mod gate;
pub mod ingest;
pub mod metrics;
pub mod router;
pub mod students;
pub mod synthetic;
pub mod teachers;
pub mod tuner;

pub use error::{Error, Result};
