//! Model-based clustering with mixtures of multivariate power exponential
//! (MPE) distributions.
//!
//! The sixteen-member ePEM family combines eight eigen-decomposed scale
//! structures with equal or variable shape parameters. Fitting uses a
//! generalized EM algorithm whose scale updates are built from
//! minorization-maximization steps and Stiefel-manifold line searches, so
//! the log-likelihood never decreases.

pub mod density;
pub mod error;
pub mod fplab;
pub mod gem;
pub mod io;
pub mod linalg;
pub mod model;
pub mod sampler;
pub mod scale;
pub mod selection;
pub mod special;
pub mod stiefel;

pub use error::{FitError, IoError, ModelError, SelectionError};
pub use gem::{fit, FitConfig, FitReport};
pub use model::{BetaConstraint, Dataset, MixtureParams, ModelName, ModelSpec, ScaleStructure};
