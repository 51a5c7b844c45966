//! Source-free multi-domain updating of face anti-spoofing (FAS) models.
//!
//! The crate is organised around the training pipeline:
//!
//! * [`data`]: synthetic paired live/spoof benchmarks, manifests and stores.
//! * [`model`]: the generic FAS formulation, a multi-scale feature extractor
//!   `f` followed by spoof-cue-estimate layers `g`, plus a binary head.
//! * [`sre`]: the spoof region estimator, preliminary masks and stage-1
//!   fine-tuning.
//! * [`wrapper`]: chained multi-scale discriminators, the dual-teacher
//!   adversarial objective, stage-2 training and inference export.
//! * [`protocols`]: five-subset benchmark construction with K-means
//!   illumination clustering.
//! * [`metrics`]: APCER/BPCER/ACER, ROC, AUC, TPR@FPR, EER and HTER.
//! * [`baselines`]: naive fine-tuning, joint training and LwF distillation.

pub mod autograd;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod params;
pub mod protocols;
pub mod sre;
pub mod train;
pub mod wrapper;

pub use error::{Error, Result};
