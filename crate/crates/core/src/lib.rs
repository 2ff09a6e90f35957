//! Parallel and auto-regressive transformer decoders for predicting
//! collections of points, lines, gates and polygons from synthetic images.
//!
//! Modules, bottom-up:
//! - [`geometry`]: planar geometry on normalized, y-down coordinates.
//! - [`datagen`]: seeded scene generators and rasterization.
//! - [`seqcodec`]: scene ↔ token sentence codec for the AR decoder.
//! - [`matching`]: Hungarian assignment and the set-prediction loss.
//! - [`grad`]: tensors, reverse-mode differentiation, AdamW, checkpoints.
//! - [`model`]: backbone, encoder and both decoder families.
//! - [`eval`]: AP/mAP over IoU or L1 thresholds and PR-curve emission.
//! - [`experiment`]: run configuration, training and evaluation drivers.

pub mod datagen;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod grad;
pub mod matching;
pub mod model;
pub mod seqcodec;
mod task;

pub use datagen::{GenConfig, Labels, Scene};
pub use geometry::{Point2, Polygon};
pub use seqcodec::{OrderPolicy, Token, TokenClass, TokenSequence};
pub use task::{ParseTaskError, Task};
