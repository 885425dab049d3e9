//! Speaker and posture classification from multichannel breath recordings.
//!
//! The processing chain is: high-pass filtering, level-threshold segmentation and
//! channel alignment ([`preprocess`]), Hilbert-Huang instantaneous magnitudes
//! ([`hht`]), channel-configuration embeddings ([`features`]) and CNN-GRU
//! classifiers with an averaging ensemble ([`neuralnet`]). [`pipeline`] wires the
//! stages together and provides the synthetic dataset used for desk-scale checks.

pub mod audio_io;
pub mod error;
pub mod features;
mod fft;
pub mod hht;
pub mod labels;
pub mod neuralnet;
pub mod pipeline;
pub mod preprocess;
pub mod stationarity;

pub use error::{Error, Result};
