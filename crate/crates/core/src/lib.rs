//! Prompt learning with a contrastive self-supervised task, gradient
//! matching and text-only test-time adaptation, on a synthetic class world.

pub mod encoders;
pub mod error;
pub mod experiment;
pub mod io;
pub mod losses;
pub mod pipeline;
pub mod prompts;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
