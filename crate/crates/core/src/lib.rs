//! End-to-end aspect extraction and sentiment tagging over a transformer
//! encoder, with a hand-written reverse-mode autodiff tape.

pub mod checkpoint;
pub mod corpus;
pub mod crf;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod evaluation;
pub mod heads;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tagging;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
