//! Higher-order derivatives of value functions, estimated by differentiating
//! off-policy evaluation estimates.
//!
//! Every estimator in [`estimators`] is an ordinary function of a behavior
//! trajectory and the policy logits, written in second-order forward-mode
//! arithmetic ([`taylor2::Taylor2`]). Its gradient and Hessian are therefore
//! estimates of the gradient and Hessian of the value function. The
//! [`oracle`] module provides exact finite-horizon ground truth, both by
//! dynamic programming and by brute-force trajectory enumeration.

pub mod error;
pub mod estimators;
pub mod exec;
pub mod harness;
pub mod mdp;
pub mod metagrad;
pub mod oracle;
pub mod rng;
pub mod taylor2;
pub mod tmaml;

pub use error::{Error, Result};
pub use exec::Exec;
pub use taylor2::{Dim, Taylor2};
