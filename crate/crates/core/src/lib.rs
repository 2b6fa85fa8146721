//! Egocentric human segmentation.
//!
//! The crate covers the whole pipeline: chroma-key extraction and alpha matting of
//! foreground captures ([`imgproc`], [`matting`]), semi-synthetic dataset assembly
//! ([`synth`]), a small deterministic tensor engine ([`nn`]), the encoder / pyramid
//! pooling / decoder segmentation network ([`thundernet`]), the training loop
//! ([`train`]) and IoU / latency evaluation ([`eval`]).

pub mod error;
pub mod eval;
pub mod imgproc;
pub mod matting;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod thundernet;
pub mod train;

pub use error::{Error, Result};
