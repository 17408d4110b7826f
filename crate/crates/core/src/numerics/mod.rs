//! Dense tensors, reverse-mode autodiff, random streams and optimization.

#[cfg(feature = "oracle")]
mod dd;
mod gradcheck;
mod ops;
mod optim;
mod real;
mod rng;
mod tensor;

#[cfg(feature = "oracle")]
pub use dd::F64x2;
pub use gradcheck::{
    compare_gradients, grad_check, grad_check_against, numeric_gradient, GradCheckReport,
};
pub use ops::{embedding, masked_cross_entropy, RMSNORM_EPS};
pub use optim::{adamw_step, clip_grad_norm, AdamWConfig, OptimState};
pub use real::{DType, Real};
pub use rng::{RandomStream, RNG_ALGORITHM};
pub use tensor::{backward, is_grad_enabled, no_grad, BackwardFn, Tensor};
