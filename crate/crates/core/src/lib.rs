//! Two-phase SGD schedule that alternates gradient descent and ascent once a
//! session of training is close to convergence, steering the optimizer toward
//! flat minima. The crate bundles the optimizer itself, analytic benchmark
//! losses, a small reverse-mode MLP with synthetic class-incremental datasets,
//! an anchor-regularized continual-learning runner, and loss-landscape
//! diagnostics (gradient-norm flatness, Hessian spectrum, perturbation
//! sharpness, and a numerical check of the descent/ascent surrogate).

pub mod continual;
pub mod error;
pub mod landscape;
pub mod losses;
pub mod model;
pub mod optimizer;
pub mod param;

pub use error::{Error, Result};
pub use losses::{BatchRef, DoubleWellLoss, LossEvaluation, LossOracle, QuadraticLoss};
pub use param::ParamVector;
