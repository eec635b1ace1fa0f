#![cfg_attr(feature = "f64", allow(clippy::unnecessary_cast))]

//! Domain prompt learning for small vision transformers.
//!
//! Each source domain owns a set of learnable prompt tokens appended to the
//! transformer input. A prompt adapter maps the prompt-free class feature of
//! an image to convex weights over the source domains, and the weighted
//! prompts drive prediction on unseen domains.

pub mod analysis;
pub mod datagen;
pub mod error;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod prompting;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
