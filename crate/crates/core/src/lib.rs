mod binfmt;
pub mod checkpoint;
pub mod control;
pub mod datakit;
pub mod entropy_lab;
pub mod error;
pub mod index;
pub mod model;
pub mod numerics;
pub mod orchestrator;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
