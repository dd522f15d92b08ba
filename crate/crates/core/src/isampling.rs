//! Importance weights between posteriors at different hyperparameters, the
//! self-normalized estimator, and effective sample sizes.
//!
//! Weights are kept in log scale and exponentiated after subtracting the
//! maximum log weight. The estimator and both ESS formulas are invariant to
//! that shift, so the stabilization is exact. Draws excluded by the target's
//! support carry `-inf` log weight and enter every sum as exact zeros.
//!
//! The combined effective sample size for importance sampling over correlated
//! MCMC draws is `(ESS_MCMC / N) * ESS_IS`, where `ESS_MCMC` is computed on
//! the series `g_i = (f_i - estimate) * w_i` with the first-negative
//! autocorrelation truncation.

use crate::mcmc::{ess_mcmc, Chain, McmcError};
use crate::model::{
    ln_normal_pdf, log_unnormalized_posterior, Dataset, Hyperparameters, ModelConstants,
    ModelError,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("chain has no draws")]
    EmptyChain,
    #[error("no draw carries positive weight under the target (empty overlap)")]
    EmptyOverlap,
    #[error("f_values length {f} does not match draw count {n}")]
    Misaligned { f: usize, n: usize },
    #[error("degenerate g series ({reason}); combined ESS is undefined. {guidance}")]
    DegenerateG { reason: String, guidance: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Log importance weights of one chain against a target prior, aligned
/// index-by-index with the chain's draws.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    proposal: Hyperparameters,
    target: Hyperparameters,
    log_weights: Vec<f64>,
    uncovered_fraction: f64,
    /// `target.tau0 - proposal.tau0` when positive: the proposal posterior
    /// has no mass on `tau_mu in (proposal.tau0, target.tau0)`, so the
    /// estimator is restricted to the covered region.
    support_deficiency: Option<f64>,
}

impl WeightedSample {
    pub fn proposal(&self) -> Hyperparameters {
        self.proposal
    }

    pub fn target(&self) -> Hyperparameters {
        self.target
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    /// Fraction of draws whose weight was forced to zero by the target's
    /// support.
    pub fn uncovered_fraction(&self) -> f64 {
        self.uncovered_fraction
    }

    pub fn support_deficiency(&self) -> Option<f64> {
        self.support_deficiency
    }

    pub(crate) fn from_parts(
        proposal: Hyperparameters,
        target: Hyperparameters,
        log_weights: Vec<f64>,
    ) -> Self {
        let uncovered = log_weights
            .iter()
            .filter(|w| **w == f64::NEG_INFINITY)
            .count();
        let uncovered_fraction = uncovered as f64 / log_weights.len().max(1) as f64;
        Self {
            proposal,
            target,
            log_weights,
            uncovered_fraction,
            support_deficiency: (target.tau0 > proposal.tau0).then(|| target.tau0 - proposal.tau0),
        }
    }

    /// Weights in shifted-exponent space: `exp(lw - max lw)`, with `-inf`
    /// mapped to exactly zero. Errors when no weight is finite.
    fn shifted_weights(&self) -> Result<Vec<f64>, WeightError> {
        let max = self
            .log_weights
            .iter()
            .copied()
            .filter(|w| w.is_finite())
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(WeightError::EmptyOverlap);
        }
        Ok(self
            .log_weights
            .iter()
            .map(|&lw| {
                if lw == f64::NEG_INFINITY {
                    0.0
                } else {
                    (lw - max).exp()
                }
            })
            .collect())
    }
}

/// Log weights of `chain`'s draws against `target`.
///
/// The likelihood and the `k` prior cancel between the two posteriors, so
/// each weight reduces to a ratio of the `mu` priors plus the log ratio of
/// the `tau_mu` uniform normalizers; [`importance_log_weights_full`] keeps
/// the full posterior ratio for cross-checking. Draws with
/// `tau_mu >= target.tau0` fall outside the target support and get `-inf`.
pub fn importance_log_weights(
    chain: &Chain,
    target: Hyperparameters,
    _d: &Dataset,
    c: &ModelConstants,
) -> Result<WeightedSample, WeightError> {
    if chain.is_empty() {
        return Err(WeightError::EmptyChain);
    }
    target.validate(c)?;
    let proposal = chain.hyperparameters_used();
    let log_norm_ratio = (proposal.tau0 - c.tau_l).ln() - (target.tau0 - c.tau_l).ln();
    let log_weights: Vec<f64> = chain
        .draws()
        .iter()
        .map(|x| {
            if x.tau_mu < target.tau0 {
                let var = x.tau_mu * x.tau_mu;
                ln_normal_pdf(x.mu, target.mu0, var) - ln_normal_pdf(x.mu, proposal.mu0, var)
                    + log_norm_ratio
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let ws = WeightedSample::from_parts(proposal, target, log_weights);
    if ws.log_weights.iter().all(|w| *w == f64::NEG_INFINITY) {
        return Err(WeightError::EmptyOverlap);
    }
    Ok(ws)
}

/// Reference path: log weights as the full difference of unnormalized log
/// posteriors. Agrees with [`importance_log_weights`] up to rounding; the
/// simplified path is the one used everywhere else.
pub fn importance_log_weights_full(
    chain: &Chain,
    target: Hyperparameters,
    d: &Dataset,
    c: &ModelConstants,
) -> Result<WeightedSample, WeightError> {
    if chain.is_empty() {
        return Err(WeightError::EmptyChain);
    }
    target.validate(c)?;
    let proposal = chain.hyperparameters_used();
    let mut log_weights = Vec::with_capacity(chain.len());
    for &x in chain.draws() {
        let lp_target = log_unnormalized_posterior(x, target, d, c)?;
        let lp_proposal = log_unnormalized_posterior(x, proposal, d, c)?;
        log_weights.push(lp_target - lp_proposal);
    }
    Ok(WeightedSample::from_parts(proposal, target, log_weights))
}

/// Self-normalized estimate `sum f_i w_i / sum w_i`.
pub fn self_normalized_estimate(ws: &WeightedSample, f_values: &[f64]) -> Result<f64, WeightError> {
    if f_values.len() != ws.len() {
        return Err(WeightError::Misaligned {
            f: f_values.len(),
            n: ws.len(),
        });
    }
    let w = ws.shifted_weights()?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (wi, fi) in w.iter().zip(f_values) {
        num += wi * fi;
        den += wi;
    }
    Ok(num / den)
}

/// Independent-sample effective size `(sum w)^2 / sum w^2`.
pub fn ess_is(ws: &WeightedSample) -> Result<f64, WeightError> {
    let w = ws.shifted_weights()?;
    let sum: f64 = w.iter().sum();
    let sum_sq: f64 = w.iter().map(|v| v * v).sum();
    Ok(sum * sum / sum_sq)
}

/// The plug-in series `g_i = (f_i - estimate) * w_i`, with weights in
/// shifted-exponent space. A constant shift rescales the series, which every
/// downstream use (autocorrelation, ESS) is invariant to.
pub fn g_tilde_series(ws: &WeightedSample, f_values: &[f64]) -> Result<Vec<f64>, WeightError> {
    let estimate = self_normalized_estimate(ws, f_values)?;
    let w = ws.shifted_weights()?;
    Ok(w.iter()
        .zip(f_values)
        .map(|(wi, fi)| (fi - estimate) * wi)
        .collect())
}

/// All three effective sample sizes of one weighted sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinedEss {
    /// `(ess_mcmc / N) * ess_is`, the quantity driving the stopping rule.
    pub ess: f64,
    pub ess_is: f64,
    /// MCMC effective size of the `g` series.
    pub ess_mcmc: f64,
}

/// Combined effective sample size for importance sampling over correlated
/// draws. The MCMC factor is clamped to at most one so the combined value
/// never exceeds `ess_is`.
pub fn combined_ess(ws: &WeightedSample, f_values: &[f64]) -> Result<CombinedEss, WeightError> {
    let g = g_tilde_series(ws, f_values)?;
    let n = g.len() as f64;
    let ess_mcmc_g = match ess_mcmc(&g) {
        Ok(v) => v,
        Err(McmcError::DegenerateSeries) => {
            return Err(WeightError::DegenerateG {
                reason: "the weighted, centered f series is constant".into(),
                guidance: "this happens when f is constant over the draws or a single draw \
                           carries all weight; the plain estimate is still valid but no \
                           sample-size statement can be made"
                    .into(),
            })
        }
        Err(McmcError::TooShort(n)) => {
            return Err(WeightError::DegenerateG {
                reason: format!("only {n} draws"),
                guidance: "extend the chain before asking for a combined ESS".into(),
            })
        }
        Err(e) => {
            return Err(WeightError::DegenerateG {
                reason: e.to_string(),
                guidance: "inspect the weight series".into(),
            })
        }
    };
    let ess_is_v = ess_is(ws)?;
    let factor = (ess_mcmc_g / n).min(1.0);
    Ok(CombinedEss {
        ess: factor * ess_is_v,
        ess_is: ess_is_v,
        ess_mcmc: ess_mcmc_g,
    })
}
