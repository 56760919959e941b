//! Stage I: negative-pair-free self-distillation with cluster-aware positive
//! sampling.

pub mod loss;
pub mod model;
pub mod train;

pub use loss::{
    consistency_loss, dino_ce_loss, ema_update, repeat_probability, teacher_probs, total_dino_loss, update_center, ModelState,
};
pub use model::{forward, DinoNet, Encoder, EncoderConfig};
pub use train::{train_stage1, DinoHyper, Stage1Epoch};
