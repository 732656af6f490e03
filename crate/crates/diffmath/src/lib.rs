//! Dense tensors, tape-based reverse-mode gradients, small MLP/attention
//! networks, the losses they train with, and an AdamW optimizer.

mod gradcheck;
mod loss;
mod network;
mod optim;
mod record;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_check_at, finite_difference_check_with};
pub use loss::{contrastive_on_tape, loss_contrastive, loss_mse, softmax};
pub use network::{
    build_network, gradients, Activation, AttentionSpec, Gradients, Network, NetworkSpec,
};
pub use optim::{optimizer_step, OptConfig, OptState};
pub use record::{read_network, write_network, MAGIC};
pub use tape::{Tape, TapeGrads, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid network spec at {layer}: {reason}")]
    InvalidSpec { layer: String, reason: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("malformed network record: {0}")]
    Record(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
