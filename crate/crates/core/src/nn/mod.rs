//! Minimal CPU tensor engine: dense NCHW tensors, a recording graph with
//! reverse-mode gradients, the layers the denoiser is assembled from, and Adam.

mod adam;
mod graph;
mod layers;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{Gradients, Graph, Var};
pub use layers::{norm_groups, AttentionBlock, Conv2d, GroupNorm, Linear, ResBlock};
pub use params::{ParamBuilder, ParamId, ParamStore};
pub use tensor::{Element, Tensor};
