//! Dual-view (frontal/lateral) fusion classifier trained with
//! knowledge-guided curriculum sampling and homogeneous transfer from
//! single-view models.
//!
//! Module map:
//! - [`curriculum`]: difficulty scores, the decaying sampling schedule and
//!   per-epoch permutations
//! - [`dataset`]: samples, manifests, stratified folds, synthetic data
//! - [`model`]: the three-branch network, prediction dispatch and losses
//! - [`transfer`]: single-view pretraining and weight transplant
//! - [`training`]: the epoch loop with Adam and validation-based selection
//! - [`evaluation`]: accuracy, AUC, balanced accuracy and the binary task
//! - [`experiment`]: cross-validation runs, run directories and reports

pub mod checkpoint;
pub mod curriculum;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod optim;
pub mod seed;
pub mod training;
pub mod transfer;
pub mod view;

pub use error::{Error, Result};
pub use view::{SourceBranch, View, ViewMode};

/// 0 non-fracture, 1 ulnar fracture, 2 radial fracture.
pub const N_CLASSES: usize = 3;
