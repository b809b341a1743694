//! A small reverse-mode differentiable tensor engine.
//!
//! Values are `f64` throughout, which keeps central-difference checks meaningful.
//! Ops are single-threaded with fixed reduction order, so a seeded run is
//! bit-reproducible.

pub mod attention;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod norm;
pub mod ops;
pub mod optim;
pub mod params;
pub mod spectral;
pub mod tensor;

pub use attention::{AttentionVars, QK_REDUCTION};
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Grads, Graph, Var};
pub use norm::{BatchStats, NORM_EPS};
pub use ops::{Activation, LEAKY_SLOPE};
pub use optim::{AdamConfig, AdamState};
pub use params::{Binder, Mode, ParamSet, Parameter};
pub use spectral::SpectralState;
pub use tensor::Tensor;
