//! Relation-aware pyramid network for temporal action proposal generation.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: f64 tensors with a reverse-mode autodiff tape and the
//!   binary checkpoint format.
//! - [`ram`]: the relation-aware module (masked bidirectional affinity,
//!   temporal squeeze, residual excitation).
//! - [`network`]: global context extractor, temporal pyramid, actionness
//!   head, per-level proposal generators and anchor decoding.
//! - [`anchors`] and [`labels`]: k-means anchor widths and label assignment.
//! - [`losses`]: proposal, actionness and regularization terms.
//! - [`optim`]: SGD with momentum and the learning-rate schedule.
//! - [`postprocess`]: actionness grouping, boundary adjustment, ranking, Soft-NMS.
//! - [`eval`]: AR@AN and AUC.
//! - [`data`], [`train`], [`pipeline`]: datasets, file formats, training and
//!   proposal generation.
//!
//! Batch-level work (per-video forward passes, evaluation grids) goes through
//! [`exec`], which uses rayon when the `parallel` feature is enabled and runs
//! sequentially otherwise. Results are always collected in input order, so
//! both paths produce bit-identical output.

pub mod anchors;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod interval;
pub mod labels;
pub mod layers;
pub mod losses;
pub mod network;
pub mod optim;
pub mod pipeline;
pub mod postprocess;
pub mod ram;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use interval::{iou, Interval, ProposalSource, ScoredInterval};
