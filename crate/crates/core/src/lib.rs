//! Desk-scale 3D scene question answering.
//!
//! Point clouds are encoded into scene tokens and object queries, condensed by
//! a learnable-query compressor, and handed to a small prefix language model
//! that generates the answer. Everything is trained from scratch on a
//! reverse-mode differentiation engine in [`tensor`].

pub mod attention;
pub mod compressor;
pub mod datakit;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pointcloud;
pub mod sweep;
pub mod tensor;
pub mod training;
pub mod text;

pub use error::{Error, Result};
