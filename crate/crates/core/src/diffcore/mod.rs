//! Minimal differentiable core: arrays, parameter storage, the handful of
//! operations the models need (each with an analytic backward pass), an
//! SGD optimizer and the checkpoint container.

mod array;
pub mod checkpoint;
pub mod layers;
pub mod ops;
mod optim;
mod params;

pub use array::Array;
pub use checkpoint::Checkpoint;
pub use ops::{
    affine, affine_backward, log_sum_exp, masked_self_attention, recurrent_step, softmax_backward,
    softmax_last_dim, Mask,
};
pub use optim::Sgd;
pub use params::{group_of, Grads, ParamId, ParamStore};
