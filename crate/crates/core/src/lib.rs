pub mod datagen;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod interactor;
pub mod lm;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod textio;

pub use error::{Error, Result};
