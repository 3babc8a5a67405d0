pub mod cli;
pub mod container;
pub mod datasets;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod report;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
