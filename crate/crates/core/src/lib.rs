pub mod autograd;
pub mod capability;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod llm;
pub mod model;
pub mod nn;
pub mod params;
pub mod service;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
