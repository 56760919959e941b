//! Dynamic loss gate with label correction: AAM-softmax, per-epoch GMM
//! thresholds on log-losses, and the gated training step.

pub mod aam;
pub mod gate;
pub mod gmm;
pub mod step;

pub use aam::{aam_loss, AamConfig, AamHead};
pub use gate::{lc_loss, mm_gate, refresh_threshold, select_branch, sharpen, Branch, GateState, GateWarning, MmDecision, Refresh, SelectionMode};
pub use gmm::{fit_gmm2, fit_gmm2_log, gaussian_pdf, solve_threshold, Gmm2, GmmFit, Threshold};
pub use step::{dlg_lc_step, mm_dlg_lc_step, AuditRecord, Classifier, StepBatch, StepContext, StepOutput};
