//! Fused output projection + cross-entropy.
//!
//! Computes the language-model loss and its gradients straight from hidden
//! states `H (N x d)`, output weights `W (V x d)` and targets, streaming the
//! logits through an online safe softmax instead of materializing the
//! `N x V` logits matrix. A two-stage reference pipeline, simulated
//! tensor/sequence/data-parallel sharding and a benchmark harness sit on top.

pub mod backward;
pub mod bench;
pub mod error;
pub mod forward;
pub mod gen;
pub mod kernel;
pub mod ledger;
pub mod loss;
pub mod parallel_sim;
pub mod reference;
pub mod stats;
mod sweep;
pub mod types;
pub mod verify;

pub use backward::{
    effective_gamma, fused_backward_recompute, fused_forward_with_partial_grads,
    scalar_gamma_eff, scale_partial_grads, PartialForward, PartialGradients, UpstreamGradient,
};
pub use error::{Error, Result};
pub use forward::{fused_forward, fused_forward_windowed, FusedOutput, WindowConfig};
pub use kernel::{ExecConfig, TileConfig};
pub use ledger::{MemoryLedger, Reservation, Tracked};
pub use loss::{LossValue, Reduction};
pub use reference::{ce_loss_from_logits, project_logits, reference_backward, reference_forward};
pub use stats::{merge_stats, stream_stats, SoftmaxStats};
pub use types::{
    round_bf16, validate_problem, DenseMatrix, Precision, ProblemDims, Real, Storage, TargetVector,
};
