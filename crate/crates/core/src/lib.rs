//! Region-level vision-language pipeline at desk scale.
//!
//! The crate wires a frozen promptable-segmentation backbone into a trainable
//! semantic perceiver, pixel-shuffle token projector, and byte-level causal
//! decoder, plus the machinery around them: a streaming clip scheduler, a
//! three-stage training curriculum, a storyboard annotation pipeline with
//! pluggable model clients, and caption/recognition metrics.

pub mod backbone;
pub mod config;
pub mod curriculum;
pub mod datapipe;
pub mod decoder;
pub mod error;
pub mod model;
pub mod numcore;
pub mod params;
pub mod perceiver;
pub mod projector;
pub mod streamer;

pub use error::{Error, Result};
