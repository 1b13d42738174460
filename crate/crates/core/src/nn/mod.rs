//! Minimal tensor library with reverse-mode autodiff, layers, optimizers and
//! checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint_config, save_checkpoint};
pub use graph::{AttnGeom, Graph, Var};
pub use layers::{causal_mask, BatchNorm, Conv2d, FeedForward, LayerNorm, Linear, MultiHeadAttention};
pub use optim::{clip_grad_norm, OptimizerConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};
