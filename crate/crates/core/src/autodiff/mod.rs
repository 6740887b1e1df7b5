//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! The engine records a tape implicitly: each operation's output holds the
//! operation kind, references to its parents, and whatever the backward rule
//! needs. [`Tensor::backward`] walks nodes in reverse creation order exactly
//! once, accumulating gradients into `requires_grad` leaves. A tape and its
//! tensors belong to a single thread; distinct threads have independent
//! tapes.
//!
//! Training runs the engine at `f32`; [`grad_check`] instantiates the same
//! code at `f64` so the finite-difference oracle is not drowned by single
//! precision rounding.

mod gradcheck;
mod ops;
mod tensor;


pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::BnMode;
pub use tensor::{no_grad, Real, Tensor};
