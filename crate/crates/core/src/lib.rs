pub mod error;
pub mod nn;

pub use error::{Error, Result};
pub mod hmm;
pub mod datagen;
pub mod gm;
pub mod hybrid;
pub mod seed;
pub mod training;
