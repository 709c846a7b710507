//! Minimal reverse-mode automatic differentiation over dense vectors and
//! matrices, a fixed-mask sparse linear layer, and an Adam optimizer.
//!
//! All arithmetic is 64-bit. Graphs are single-threaded; distinct graphs may
//! live on distinct threads.

mod optim;
mod sparse;
mod tape;

pub use optim::{clip_global_norm, Adam, AdamState, GRAD_CLIP_NORM};
pub use sparse::{SparseLinear, SparseMask};
pub use tape::{sigmoid, sigmoid_xent, NodeId, Shape, Tape};
