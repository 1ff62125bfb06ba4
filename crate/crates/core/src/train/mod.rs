//! Joint-label objectives, inference rules and the training loop.

mod infer;
mod labels;
mod loss;
mod trainer;

pub use infer::{
    infer_ag, infer_ag_heads, infer_sd, infer_si, predict_rows, softmax_row, softmax_rows, Combine, InferMode,
    InferenceResult,
};
pub use labels::{expand_labels, JointLabel};
pub use loss::{cross_entropy, joint_loss, kl_divergence, sd_loss, LossBreakdown, KL_EPS};
pub use trainer::{epoch_seed, evaluate, train_epoch, train_loop, Method, MetricsRow, Split, TrainOptions, TrainState};
