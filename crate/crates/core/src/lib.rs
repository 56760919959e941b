//! Self-supervised speaker-representation laboratory.
//!
//! Stage I trains a student/teacher encoder pair without labels (DINO with
//! cluster-aware positive sampling). Stage II repeatedly clusters the learned
//! embeddings into pseudo labels and trains a fresh encoder on them, filtering
//! noisy labels with a GMM-fitted dynamic loss gate and correcting unreliable
//! ones from the model's own confident predictions. Everything runs on a
//! synthetic identity world whose hidden ground truth makes each mechanism
//! measurable.

pub mod clusterlab;
pub mod dino;
pub mod error;
pub mod evalkit;
pub mod lossgate;
pub mod numkit;
pub mod pipeline;
pub mod synthworld;

pub use error::{Error, Result};
