//! Preprocessing pipeline that annotates visual imitation-learning
//! demonstrations with VLM-filtered, temporally smoothed saliency maps, plus
//! a reference implementation of the saliency-regularization penalty that
//! downstream trainers can validate against.
//!
//! The pipeline runs per trajectory: a vision-language model summarizes the
//! task and proposes a detection vocabulary ([`supervise`], [`vlm`]); an
//! open-vocabulary detector finds candidate objects ([`detect`]); IoU-cost
//! Hungarian association links them into tracks ([`assignment`], [`track`]);
//! the trajectory splits into spans with constant active tracks; the VLM
//! keeps only the objects that explain the expert's action, retrying with an
//! augmented vocabulary when it names something the detector missed; and the
//! key-object centers become per-frame multi-peak Gaussian saliency maps
//! with exponential history decay and kernel broadening ([`saliency`]).
//! [`regularizer`] computes the reference penalty over feature-map fixtures,
//! [`confound`] builds icon-confounded dataset copies for causal-confusion
//! experiments, and [`pipeline`] orchestrates datasets end to end behind the
//! `autofocus` CLI.
//!
//! With the `parallel` feature (default) kernel rendering and dataset
//! processing use a work-stealing pool; without it everything runs
//! sequentially with identical outputs.

pub mod assignment;
pub mod config;
pub mod confound;
pub mod detect;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod regularizer;
pub mod saliency;
pub mod supervise;
pub mod synthetic;
pub mod track;
pub mod vlm;

pub use config::PipelineConfig;
pub use error::{Error, Result};
