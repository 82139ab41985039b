//! Differentiable numerics: tensors, layers, reverse-mode gradients, Adam and
//! checkpoints.

mod adam;
mod checkpoint;
mod graph;
mod layers;
mod params;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, ParamRecord, CHECKPOINT_VERSION};
pub use graph::{Gradients, Graph, Var};
pub use layers::{gru_forward, linear_forward, mlp2_forward, zero_linear, Activation, GruCell, Linear, Mlp2};
pub use params::{ParamId, ParamStore};

/// Dense row-major matrix of doubles. Vectors are `[1 x n]` rows.
pub type Tensor = ndarray::Array2<f64>;
