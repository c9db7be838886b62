//! Counting built structures in overhead RGB imagery.
//!
//! The pipeline has three parts:
//!
//! - a fully convolutional built-up-area segmenter ([`ssnet`]) producing a
//!   per-pixel built probability map,
//! - a frozen feature extractor ([`backbone`]) producing a `C×h×w` feature
//!   volume and its pooled vector,
//! - four regression heads ([`heads`]): plain deep regression on pooled
//!   features (DRC), global weighted average pooling of the
//!   probability-weighted volume (GWAP), cross-channel parametric pooling via a
//!   learnable `1×1` convolution (CCPP), and a fusion of the three streams.
//!
//! Around them sit dataset tooling ([`dataset`], [`synthgen`]), evaluation
//! ([`metrics`]), large-tile grid counting and heat-map rendering
//! ([`grid`], [`heatmap`]), and a versioned tensor container
//! ([`checkpoint`]).

pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod heads;
pub mod heatmap;
pub mod metrics;
pub mod nn;
pub mod ssnet;
pub mod synthgen;

pub use error::{Error, Result};
