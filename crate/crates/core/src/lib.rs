//! Weakly supervised class-incremental semantic segmentation with a
//! relation-aware semantic prior.
//!
//! New classes arrive with image-level labels only. The previous model's
//! dense predictions are turned into per-class similarity maps through the
//! embeddings of class names, and those maps regularize a localizer whose
//! pseudo-labels train the main segmentation head.

pub mod class_semantics;
pub mod config;
pub mod engine;
pub mod error;
pub mod evalkit;
pub mod memory;
pub mod objectives;
pub mod pipeline;
pub mod pnm;
pub mod protocol;
pub mod simprior;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
