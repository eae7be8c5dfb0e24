//! Self-supervised cycle-consistent Siamese tracking.
//!
//! A target is tracked forward through a few frames and back to where it
//! started; the disagreement with the starting box (and mask) supervises a
//! Siamese region-proposal network without per-frame annotations.

pub mod config;
pub mod cycle;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod mask;
pub mod model;
pub mod patch;
pub mod tracker;
pub mod trainer;

pub use cycle::{CropSpec, CycleResult};
pub use data::{Annotation, Sequence, SynthConfig};
pub use error::{Error, Result};
pub use eval::{BoxTracker, DavisResult, VotConfig, VotResult};
pub use geometry::{AnchorConfig, AnchorGrid, AnchorLabels, BBox, BoxDelta, BoxMode, RotatedBox};
pub use mask::{BinaryMask, LabelMap};
pub use model::{ModelConfig, ModelParams, ResponseMap};
pub use patch::{CropMapping, Patch};
pub use tracker::{TrackState, Tracker};
pub use trainer::{InitMode, TrainConfig};
