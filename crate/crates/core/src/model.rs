//! Bayesian linear random-effects meta-analysis model.
//!
//! The model is used in its marginal form: per-study effects are integrated
//! out and a state is `(mu, tau_mu, k)`. Study `i` contributes a Gaussian
//! likelihood with variance `sigma_i^2 + k^2 tau_mu^2`, `mu` has a Gaussian
//! prior `N(mu0, tau_mu^2)`, and `tau_mu`, `k` have uniform priors on
//! `(tau_l, tau0)` and `(k_l, k_u)`.
//!
//! The uniform normalizing constants are kept in the "unnormalized" log
//! posterior: `tau0` varies across targets, so the `1/(tau0 - tau_l)` factor
//! changes importance-weight ratios and cannot be dropped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dataset needs at least two studies, got {0}")]
    TooFewStudies(usize),
    #[error("study {index}: {reason}")]
    BadStudy { index: usize, reason: String },
    #[error("non-finite input in {0}")]
    NonFinite(&'static str),
    #[error("invalid model constants: {0}")]
    BadConstants(String),
    #[error("hyperparameters (mu0={mu0}, tau0={tau0}) invalid: {reason}")]
    BadHyperparameters { mu0: f64, tau0: f64, reason: String },
    #[error("sample count must be at least 1")]
    EmptySample,
}

/// One study: observed effect and its known standard error, both in ug/l.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub effect: f64,
    pub std_error: f64,
}

/// Study-level effects with known standard errors.
///
/// Construction validates the invariants (at least two studies, finite
/// effects, strictly positive finite standard errors), so a `Dataset` held by
/// value is always usable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    studies: Vec<Study>,
    label: String,
}

impl Dataset {
    pub fn new(studies: Vec<Study>, label: impl Into<String>) -> Result<Self, ModelError> {
        if studies.len() < 2 {
            return Err(ModelError::TooFewStudies(studies.len()));
        }
        for (index, s) in studies.iter().enumerate() {
            if !s.effect.is_finite() {
                return Err(ModelError::BadStudy {
                    index,
                    reason: format!("effect {} is not finite", s.effect),
                });
            }
            if !(s.std_error.is_finite() && s.std_error > 0.0) {
                return Err(ModelError::BadStudy {
                    index,
                    reason: format!("std_error {} must be finite and > 0", s.std_error),
                });
            }
        }
        Ok(Self {
            studies,
            label: label.into(),
        })
    }

    pub fn studies(&self) -> &[Study] {
        &self.studies
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn len(&self) -> usize {
        self.studies.len()
    }

    pub fn is_empty(&self) -> bool {
        false // at least two studies by construction
    }
}

/// Fixed bounds of the uniform priors on `tau_mu` and `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConstants {
    pub tau_l: f64,
    pub k_l: f64,
    pub k_u: f64,
}

impl Default for ModelConstants {
    fn default() -> Self {
        Self {
            tau_l: 1.0,
            k_l: 1.0,
            k_u: 5.0,
        }
    }
}

impl ModelConstants {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.tau_l.is_finite() && self.k_l.is_finite() && self.k_u.is_finite()) {
            return Err(ModelError::NonFinite("model constants"));
        }
        if !(self.tau_l > 0.0 && self.k_l > 0.0 && self.k_u > self.k_l) {
            return Err(ModelError::BadConstants(format!(
                "need tau_l > 0, k_l > 0, k_u > k_l; got tau_l={}, k_l={}, k_u={}",
                self.tau_l, self.k_l, self.k_u
            )));
        }
        Ok(())
    }
}

/// A point `t = (mu0, tau0)` indexing one prior in the set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub mu0: f64,
    pub tau0: f64,
}

impl Hyperparameters {
    pub fn new(mu0: f64, tau0: f64) -> Self {
        Self { mu0, tau0 }
    }

    pub fn validate(&self, c: &ModelConstants) -> Result<(), ModelError> {
        if !(self.mu0.is_finite() && self.tau0.is_finite()) {
            return Err(ModelError::NonFinite("hyperparameters"));
        }
        if self.tau0 <= c.tau_l {
            return Err(ModelError::BadHyperparameters {
                mu0: self.mu0,
                tau0: self.tau0,
                reason: format!("tau0 must exceed tau_l = {}", c.tau_l),
            });
        }
        Ok(())
    }
}

/// One posterior draw `x = (mu, tau_mu, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterState {
    pub mu: f64,
    pub tau_mu: f64,
    pub k: f64,
}

impl ParameterState {
    pub fn new(mu: f64, tau_mu: f64, k: f64) -> Self {
        Self { mu, tau_mu, k }
    }

    pub fn is_finite(&self) -> bool {
        self.mu.is_finite() && self.tau_mu.is_finite() && self.k.is_finite()
    }

    /// Support check for the uniform priors under hyperparameters `t`.
    pub fn in_support(&self, t: Hyperparameters, c: &ModelConstants) -> bool {
        self.tau_mu > c.tau_l && self.tau_mu < t.tau0 && self.k > c.k_l && self.k < c.k_u
    }
}

/// Log density of `N(mean, var)` at `x`.
pub(crate) fn ln_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * ((std::f64::consts::TAU * var).ln() + d * d / var)
}

/// Unnormalized log posterior density of `x` under hyperparameters `t`.
///
/// Returns `-inf` (log of zero) when `tau_mu` or `k` falls outside its
/// uniform support, so MCMC rejection and zero importance weights fall out
/// naturally. The uniform normalizers are included; see the module docs.
pub fn log_unnormalized_posterior(
    x: ParameterState,
    t: Hyperparameters,
    d: &Dataset,
    c: &ModelConstants,
) -> Result<f64, ModelError> {
    if !x.is_finite() {
        return Err(ModelError::NonFinite("parameter state"));
    }
    c.validate()?;
    t.validate(c)?;
    if !x.in_support(t, c) {
        return Ok(f64::NEG_INFINITY);
    }
    let het = x.k * x.k * x.tau_mu * x.tau_mu;
    let mut lp = 0.0;
    for s in d.studies() {
        lp += ln_normal_pdf(s.effect, x.mu, s.std_error * s.std_error + het);
    }
    lp += ln_normal_pdf(x.mu, t.mu0, x.tau_mu * x.tau_mu);
    lp -= (t.tau0 - c.tau_l).ln();
    lp -= (c.k_u - c.k_l).ln();
    Ok(lp)
}

/// Uniform draw in the open interval `(lo, hi)`.
fn open_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    // rng.random::<f64>() lives in [0, 1); reject the single value 0 so the
    // result stays strictly inside the support.
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return lo + (hi - lo) * u;
        }
    }
}

/// Ancestral draws of the prior-predictive study effect.
///
/// Each draw follows `tau_mu ~ U(tau_l, tau0)`, `k ~ U(k_l, k_u)`,
/// `mu ~ N(mu0, tau_mu^2)`, `delta ~ N(mu, k^2 tau_mu^2)`. Deterministic
/// given the seed.
pub fn prior_predictive_sample(
    t: Hyperparameters,
    c: &ModelConstants,
    m: usize,
    seed: u64,
) -> Result<Vec<f64>, ModelError> {
    if m == 0 {
        return Err(ModelError::EmptySample);
    }
    c.validate()?;
    t.validate(c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let tau_mu = open_uniform(&mut rng, c.tau_l, t.tau0);
        let k = open_uniform(&mut rng, c.k_l, c.k_u);
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let mu = t.mu0 + tau_mu * z1;
        out.push(mu + k * tau_mu * z2);
    }
    Ok(out)
}
