pub mod base_lm;
pub mod baselines;
pub mod bench;
mod binio;
pub mod corpus;
pub mod embedder;
pub mod error;
pub mod experiments;
pub mod hypernet;
pub mod lora;
pub mod metrics;
pub mod optim;
pub mod profile;
pub mod splits;
pub mod sweep;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
