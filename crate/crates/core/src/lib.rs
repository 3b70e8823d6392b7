//! Decoupled spatial/temporal contrastive pretraining for video encoders,
//! built on a small reverse-mode tensor engine.

pub mod augmentation;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod loss;
pub mod report;
pub mod seeding;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{HdcError, Result};
