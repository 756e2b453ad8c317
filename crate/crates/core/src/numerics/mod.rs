//! Matrix arithmetic and reverse-mode differentiation for training LoRA
//! factors and the classifier while base weights stay frozen.

pub mod matrix;
pub mod params;
pub mod tape;

pub use matrix::{matmul, softmax_cross_entropy, Matrix, LOG_FLOOR};
pub use params::{
    eval_loss, finite_difference, gradients, sgd_step, Adam, LossFn, ParamSet, ParamVars,
};
pub use tape::{Gradients, Tape, Var};
