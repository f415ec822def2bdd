//! Manatee call detection: audio ingestion, log-Mel features, windowed
//! datasets, a spectrogram transformer classifier, training and evaluation,
//! and the review loop that feeds confirmed detections back into the labels.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio_io;
pub mod dataset;
pub mod dsp;
mod error;
pub mod feedback;
mod fsutil;
pub mod model;
pub mod seed;
pub mod synth;
pub mod traineval;

pub use audio_io::{AudioClip, Annotation, RecordingSession, SAMPLE_RATE_HZ};
pub use dataset::{DatasetManifest, Label, LabeledSample, Origin, Registry, Split};
pub use dsp::{FilterbankFeature, NormStats};
pub use error::{Error, Result};
pub use fsutil::write_atomic;
pub use model::{Checkpoint, ModelConfig, Parameters};
