//! Numeric substrate: tensors, dense kernels, a reverse-mode tape, schedules,
//! seeded randomness and the optimizer.

pub mod gradcheck;
pub mod kernels;
pub mod lenient_f64;
pub mod ops;
pub mod param;
pub mod rng;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use kernels::Exec;
pub use ops::{cosine_similarity, l2_normalize, softmax_temp};
pub use param::{Param, Sgd};
pub use rng::Rng;
pub use schedule::{cosine_schedule, ScheduleSpec};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
