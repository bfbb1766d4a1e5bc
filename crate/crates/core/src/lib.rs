//! Wasserstein barycenters computed as gradient flows.
//!
//! The crate covers two barycenter representations:
//!
//! - empirical measures (weighted particle clouds, optionally carrying label
//!   logits), flowed by mini-batch block-coordinate descent in [`flow_empirical`];
//! - Gaussian mixtures parametrized by means and Cholesky factors, flowed under
//!   the mixture-Wasserstein distance in [`flow_gmm`].
//!
//! Both flows descend `F = B + G + V + U`, where `B` is the barycenter
//! objective and the remaining terms are the regularizing energies in
//! [`functionals`]. Discrete optimal transport lives in [`ot`], Gaussian and
//! mixture machinery in [`gaussian`], data generators and CSV I/O in
//! [`datasets`], and the domain-adaptation evaluation in [`pipeline`].

pub mod datasets;
pub mod error;
pub mod flow_empirical;
pub mod flow_gmm;
pub mod functionals;
pub mod gaussian;
pub mod measures;
pub mod ot;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
pub use measures::{BarycentricCoordinates, EmpiricalMeasure, LabeledEmpiricalMeasure, MiniBatch};
