pub mod decode;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pretrain;
pub mod tokenizer;

pub use error::{Error, Result};
