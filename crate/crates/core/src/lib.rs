pub mod answer;
pub mod autodiff;
pub mod baseline;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod provenance;
pub mod tuning;
pub mod vlm;

pub use error::{Error, Result};
