//! L0-regularized gating at representation interfaces, desk scale.
//!
//! A small reverse-mode autodiff tape over dense f64 tensors carries
//! everything: hard-concrete gates, a compressed-interaction backbone for
//! tabular data, graph and text baselines, calibration/robustness metrics,
//! and the training loop the experiment CLI drives.

pub mod backbones;
pub mod config;
pub mod datasets;
pub mod error;
pub mod gate;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod report;
pub mod rng;
pub mod robustness;
pub mod runner;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{CoreError, ErrorClass, Result};
pub use params::{ParamId, ParamStore};
pub use rng::RngStream;
pub use tape::{finite_diff_check, Tape, Var};
pub use tensor::Tensor;
