//! Sharp bounds on the value of a contextual-bandit policy evaluated from
//! logged data when an unobserved confounder may have influenced the logged
//! actions.
//!
//! Point estimates such as inverse-propensity weighting are inconsistent the
//! moment the logging policy saw more than the recorded covariates. Instead of
//! a point, this crate computes the exact worst-case range of the policy value
//! over an uncertainty set of inverse weights, specified either as a
//! per-sample odds-ratio box or as an f-divergence budget between the nominal
//! and the true propensities.
//!
//! The range endpoints are convex programs over the n per-sample weights.
//! Everything here goes through their duals, which have only D+1 variables
//! (one per moment constraint plus one per budget):
//!
//! * [`sensitivity`] carries the uncertainty models: odds-ratio boxes and an
//!   f-divergence catalog with Fenchel conjugates, monotone conjugates, and
//!   subgradient selections.
//! * [`constraint`] builds the empirical constraint systems that pin the
//!   weights: per-action normalization, orthogonality against feature
//!   functions, or a quadratic ball from a Gaussian-process posterior.
//! * [`kernel`] supplies the feature machinery: Gram matrices, truncated
//!   spectral decompositions, kernel-PCA features, quadratic forms.
//! * [`solver`] maximizes the concave duals and certifies the result by
//!   recovering primal weights and measuring the duality gap.
//! * [`estimator`] assembles the user-facing bound estimators, and
//!   [`policy`] adds concave learning of mixture policies under the same
//!   worst-case objective.
//! * [`data`] holds logged datasets, a fully parameterized synthetic
//!   generator with ground truth, propensity fitting, and CSV/JSON interchange.
//! * [`oracle`] contains slow reference implementations (brute-force
//!   conjugates, LP vertex enumeration, long-run primal descent, quadrature)
//!   used by the self-check command and the test suite.

pub mod constraint;
pub mod data;
pub mod error;
pub mod estimator;
pub mod kernel;
pub mod num;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod sensitivity;
pub mod solver;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
