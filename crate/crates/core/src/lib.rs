pub mod bertscore;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod labels;
pub mod numerics;
pub mod prompts;
pub mod qgen;
pub mod seed;
pub mod student;
pub mod synth;
pub mod teacher;

pub use error::{Error, Result};
