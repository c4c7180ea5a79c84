//! The segmentation network, previous-step snapshots, and the base and
//! incremental training loops.

pub mod checkpoint;
mod model;
pub mod nn;
mod train;

pub use model::{
    extend_head, images_to_act, snapshot, ArchConfig, ConvSpec, FrozenModel, Localizer, SegModel,
};
pub use train::*;
