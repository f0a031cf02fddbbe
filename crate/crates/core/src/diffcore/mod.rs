//! Dense `f64` tensors, a per-pass reverse-mode tape, the MLP model with its
//! EMA teacher, and SGD.

mod model;
mod optim;
mod tape;
mod tensor;

pub use model::{
    classifier_forward, encoder_forward, init_classifier, init_encoder, Architecture,
    ModelState, Param, ParamSet, Which,
};
pub use optim::{ema_update, sgd_step, SgdConfig};
pub use tape::{Gradients, Tape, Var, NORM_EPS, PROB_EPS};
pub use tensor::Tensor;
