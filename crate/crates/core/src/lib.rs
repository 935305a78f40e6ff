pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod hashing;
pub mod objectives;
pub mod seqdata;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
