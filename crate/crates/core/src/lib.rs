//! Robust Bayesian bounds on posterior expectations.
//!
//! This crate estimates lower and upper bounds on the posterior expectation of
//! the overall effect in a random-effects meta-analysis, where the prior is
//! only known to lie in a compact set of hyperparameters. The bound is found
//! by iterative importance sampling: an adaptive Metropolis sampler draws from
//! the posterior at the current hyperparameters, the draws are reweighted to
//! every candidate prior in the set, and simulated annealing moves the
//! candidate towards the extremal prior. The stopping rule uses an effective
//! sample size that corrects the usual importance-sampling ESS for the
//! autocorrelation of the MCMC draws.
//!
//! Modules:
//! - [`model`]: the Bayesian linear random-effects model (marginal form).
//! - [`oracle`]: deterministic posterior means via analytic inner integrals
//!   and tensor Gauss-Legendre quadrature, for verification.
//! - [`mcmc`]: adaptive random-walk Metropolis and autocorrelation-based ESS.
//! - [`isampling`]: importance weights, the self-normalized estimator, and
//!   the combined ESS for correlated samples.
//! - [`prior_set`]: prior-predictive elicitation of the hyperparameter set.
//! - [`optimize`]: simulated annealing over the set, plus a grid baseline.
//! - [`iis`]: the iterative importance sampling driver.
//! - [`simulate`]: synthetic dataset generation.
//! - [`io`]: CSV/JSON readers and writers for all artifacts.

pub mod iis;
pub mod io;
pub mod isampling;
pub mod mcmc;
pub mod model;
pub mod optimize;
pub mod oracle;
pub mod prior_set;
pub mod simulate;

pub use iis::{BoundDirection, IisConfig, IisReport, IterationRow};
pub use isampling::{CombinedEss, WeightedSample};
pub use mcmc::{Chain, McmcConfig};
pub use model::{Dataset, Hyperparameters, ModelConstants, ParameterState, Study};
pub use optimize::{AnnealingConfig, OptimizationResult};
pub use oracle::{PosteriorMean, QuadratureSpec};
pub use prior_set::{ElicitationSpec, PriorSet};
