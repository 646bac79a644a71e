//! Constrained learning-to-optimize benchmark for QoS-aware weighted-sum-rate
//! MU-MISO downlink beamforming.
//!
//! Modules, bottom-up: [`autodiff`] (reverse-mode tape), [`channel`]
//! (Nakagami-m scenarios and datasets), [`problem`] (SINR, WSR, normalized
//! constraints), [`wmmse`] (classical baseline), [`models`] (MLP and
//! deep-unfolded WMMSE), [`feasibility`] (penalty, DC3, HoP), [`trainer`],
//! [`experiment`] (sweeps) and [`report`] (SVG plots).

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
pub mod autodiff;
pub mod channel;
pub mod error;
pub mod experiment;
pub mod feasibility;
pub mod linalg;
pub mod models;
pub mod problem;
pub mod report;
pub mod trainer;
pub mod wmmse;

pub use channel::{ChannelSample, Dataset, DatasetHeader, GenConfig};
pub use error::{Error, Result};
pub use experiment::{Axis, ResultRow, SweepConfig};
pub use feasibility::{Dc3Config, HopContext};
pub use models::{Arch, Checkpoint, Model, ModelSpec};
pub use problem::{Beamformer, ProblemInstance, ViolationReport, FEASIBILITY_TOL};
pub use trainer::{Method, Metrics, TrainConfig, TrainHistory};
