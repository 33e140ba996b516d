//! Persona linking engine for persona-grounded dialogue corpora.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod linalg;
pub mod linkdata;
pub mod metrics;
pub mod oracles;
pub mod pipeline;
pub mod retrieval;
pub mod service;
pub mod training;
pub mod util;

pub use error::{Error, Result};
