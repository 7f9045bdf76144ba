//! Dense real arithmetic, reverse-mode differentiation and the probability
//! primitives used throughout the crate. Everything is `f64`.

pub mod gradcheck;
pub mod matrix;
pub mod optim;
pub mod params;
pub mod prob;
pub mod tape;

pub use gradcheck::{grad_check, GradientReport};
pub use matrix::Matrix;
pub use optim::{warmup_linear_decay, Adam, AdamConfig};
pub use params::{ParamGrads, ParamId, ParamStore, ParamVars};
pub use prob::{
    auroc, cosine_similarity, cross_entropy_to_target, entropy, floored_ln, log_softmax, pearson, softmax,
    ProbabilityVector,
};
pub use tape::{Gradients, Tape, Var};
