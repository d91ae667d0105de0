//! Two-stage object-wise anomaly screening.
//!
//! Stage one localises objects of six known classes in cluttered scenes with
//! an anchor-based detector; stage two crops every detection and classifies
//! it as anomalous or benign. Around the two stages sit:
//!
//! - [`data`]: scene records, manifest I/O, stratified splits, augmentation, crops.
//! - [`synth`]: a procedural generator of false-colour cluttered scenes with ground truth.
//! - [`detector`]: anchors, target assignment, box coding, focal loss, ROI-Align, NMS,
//!   and trainable single- and two-stage detectors.
//! - [`classifier`]: crop classifiers, the discriminative filter-bank head and the
//!   full-image baseline.
//! - [`eval`]: IoU, greedy matching, PR accumulation, AP/mAP and the
//!   two-class screening metrics, plus report rendering.
//! - [`cli`]: configuration and the subcommands behind the `dualscreen` binary.

pub mod classifier;
pub mod cli;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod synth;

pub use error::{Error, Result};
