//! Rectangular occlusion attacks, mask-constrained physical-attack
//! simulations, and robust training against them, on top of a small
//! reverse-mode differentiation engine for CPU convolutional networks.

pub mod attacks;
pub mod data;
pub mod defenses;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod mask;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use data::{Dataset, Split};
pub use error::{Error, Result};
pub use mask::Mask;
pub use model::{build_cnn, predict_logits, ConvNetSpec, ModelParams};
pub use optim::{OptimState, OptimizerConfig, OptimizerKind};
pub use tape::{Gradients, Reduction, Tape, Var};
pub use tensor::Tensor;
