//! Image-to-sentence asymmetric embedding for zero-shot composed retrieval
//! on a synthetic concept-grid world.

pub mod config;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod retrieval;
pub mod rng;
pub mod token_learner;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
