//! Tensor arithmetic, 3D convolution and reverse-mode differentiation.

pub mod conv;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod pool;
pub mod tensor;

pub use conv::{conv3d, output_extent};
pub use graph::{Graph, Var};
pub use optim::sgd_step;
pub use pool::{avg_pool3d, channel_norm, global_avg_pool};
pub use tensor::Tensor;
