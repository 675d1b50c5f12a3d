//! Embedding-based instance segmentation and tracking in videos.
//!
//! The crate bundles everything needed to train and run the pipeline on a
//! single CPU:
//!
//! - [`tensor`] / [`tape`]: a small dense-tensor engine with reverse-mode
//!   automatic differentiation covering exactly the operations the network
//!   needs.
//! - [`optim`]: ADAM with L2 regularization and He initialization.
//! - [`net`]: the recurrent stacked hourglass network with ConvGRU units
//!   carrying state between video frames.
//! - [`loss`]: the cosine embedding loss with neighborhood relaxation, plus
//!   masked softmax cross-entropy for semantic segmentation.
//! - [`cluster`]: from-scratch HDBSCAN over embedding ⊕ coordinate points,
//!   applied to overlapping pairs of consecutive frames.
//! - [`track`]: IoU-based identity merging, parent assignment for cell
//!   splits, and family-tree consistency postprocessing.
//! - [`data`]: intensity normalization, augmentation, resizing, and a
//!   synthetic video generator with exact ground-truth lineages.
//! - [`metrics`]: symmetric best Dice, label IoU, count differences and
//!   lineage accuracy.
//! - [`config`] / [`pipeline`]: run configuration, training loop and the
//!   full inference pipeline.
//!
//! See the `examples/` directory for runnable entry points per capability,
//! and the `embtrack` binary for a thin command line around the same
//! functions.

pub mod checkpoint;
pub mod cluster;
pub mod data;
pub mod gradcheck;
pub mod loss;
pub mod net;
pub mod optim;
pub mod tape;
pub mod track;
pub mod tensor;

mod error;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
