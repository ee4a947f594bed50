//! Cosine similarity, the symmetric contrastive loss and its gradients,
//! ranking metrics, and a small training loop over the adapters.

mod grad;
mod metrics;
mod similarity;
mod train;

pub use grad::{
    param_grad, param_grad_parallel, Batch, GradMode, GradOutput, FD_MAX_BATCH, FD_MAX_LAYERS, FD_MAX_TOKENS,
    FD_MAX_WIDTH,
};
pub use metrics::{match_ranks, metrics_from_ranks, retrieval_metrics, Direction, RetrievalMetrics};
pub use similarity::{contrastive_loss, loss_grad, ContrastiveLoss, SimilarityMatrix, DEFAULT_TEMPERATURE};
pub use train::{evaluate, train_toy, TrainLogEntry, TrainOutcome, TrainSettings};
