//! Minimal f32 tensor/autodiff core and the network building blocks used by
//! the navigation policies.

mod layers;
mod params;
mod tape;
mod tensor;

pub use layers::{
    gaussian_entropy, gaussian_log_prob, gaussian_log_prob_f64, grad_check, grad_check_tensors, sample_gaussian,
    scaled_dot_attention,
    Conv, GaussianHead, GroupNorm, GruCell, Linear, SIGMA_FLOOR,
};
pub use params::{load_checkpoint, save_checkpoint, ParamId, ParamStore};
pub use tape::{ConvGeom, Gradients, Tape, Unary, Var};
pub use tensor::{NnError, Tensor};
