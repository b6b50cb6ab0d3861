//! Dense tensors, a define-by-run reverse-mode graph, AdamW and the named
//! tensor checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod optim;
mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{BoolMask, Gradients, Graph, Var};
pub use optim::{warmup_lr, AdamW, AdamWConfig, Moments};
pub use tensor::{Scalar, Tensor};
