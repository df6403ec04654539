//! Shared numerical machinery: special functions, dense symmetric
//! eigendecomposition, Cholesky solves, a quasi-Newton ascent loop, and
//! simplex projection. Everything is deterministic and allocation-light;
//! matrices are `ndarray` throughout.

pub mod bfgs;
pub mod chol;
pub mod eig;
pub mod simplex;
pub mod special;
