//! Sieve M-estimation of entropic optimal transport values.
//!
//! The entropic OT value is recovered from the I-projection of a Gibbs
//! reference measure onto the set of couplings, whose dual is a convex
//! program over exponential moments of CDF-indexed moment functions. The
//! library discretizes the moment functions on a quantile sieve, solves the
//! sample-average approximation of the dual, and reports estimates with
//! multiplier-bootstrap confidence intervals.

pub mod baseline;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod measures;
pub mod numeric;
pub mod reference;
pub mod saa;
pub mod sieve;

pub use error::{Error, Result};
pub use estimator::{estimate_eot, symmetric_ci, EotEstimate};
pub use measures::{CostFunction, CostKind, Marginal};
pub use reference::ReferenceMeasure;
pub use saa::{solve_general, solve_reduced, SaaSolution, SolverOptions};
pub use sieve::{build_partition, optimal_sample_size, SieveDictionary, SievePartition};
