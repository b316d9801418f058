//! Frequency-domain focus analysis for 1D convolutional time series classifiers.
//!
//! The crate is organised bottom-up:
//!
//! * [`spectral`] — one-sided amplitude spectra, peak-to-RMS focus indicators,
//!   focus scales, frequency centroids and centroid-based band filtering.
//! * [`net`] — a small deterministic 1D-CNN engine (FCN and ResNet backbones)
//!   with hand-written reverse-mode gradients, gated unit skipping, Adam and
//!   checkpoints.
//! * [`focus`] — turns captured feature maps into focus reports, finds units
//!   that narrow the frequency focus, and drives two-stage regulated training.
//! * [`gradcam`] — 1D Grad-CAM over the last preserved convolutional unit.
//! * [`data`] — `.ts` / CSV loading, z-normalisation, splits and synthetic
//!   low-frequency datasets.
//! * [`harness`] — experiment configs, runners and report emission used by
//!   the command line tool.

pub mod data;
mod error;
pub mod focus;
pub mod gradcam;
pub mod harness;
pub mod net;
pub mod spectral;

pub use error::{Error, Result};

pub use data::TimeSeriesDataset;
pub use focus::{FocusReport, RegulatorConfig};
pub use gradcam::GradCamResult;
pub use net::{ActivationMap, GatePlan, Network, NetworkSpec, TrainConfig};
pub use spectral::{BandFilterSpec, Spectrum};
