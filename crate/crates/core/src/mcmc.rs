//! Adaptive random-walk Metropolis sampling of the posterior, and
//! autocorrelation-based effective sample size.
//!
//! The walk runs on an unconstrained parameterization: `mu` is untouched
//! while `tau_mu` and `k` are mapped to their boxes by a scaled logit, with
//! the log-Jacobian added to the target. Proposal covariance and a global
//! scale are adapted from the burn-in history only and frozen afterwards, so
//! the recorded draws form a time-homogeneous Markov chain.
//!
//! Chains are never thinned: dropping draws costs precision without buying
//! anything the ESS correction does not already account for.

use crate::model::{
    log_unnormalized_posterior, Dataset, Hyperparameters, ModelConstants, ModelError,
    ParameterState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum McmcError {
    #[error("invalid MCMC config: {0}")]
    BadConfig(String),
    #[error("no proposal accepted during burn-in at t=({mu0}, {tau0}); start mu={start_mu}, scale={scale}")]
    InitFailure {
        mu0: f64,
        tau0: f64,
        start_mu: f64,
        scale: f64,
    },
    #[error("series too short for autocorrelation: {0} < 10")]
    TooShort(usize),
    #[error("series contains non-finite values")]
    NonFinite,
    #[error("degenerate series: variance is zero")]
    DegenerateSeries,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Sampler settings. `max_draws` is the number of recorded (post burn-in)
/// draws produced by [`run_chain`]; callers that extend a [`Sampler`] in
/// batches treat it as the per-run budget instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub burn_in: usize,
    pub batch_size: usize,
    pub max_draws: usize,
    pub target_accept: f64,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            burn_in: 2_000,
            batch_size: 5_000,
            max_draws: 20_000,
            target_accept: 0.3,
            seed: 0,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<(), McmcError> {
        if self.burn_in < 500 {
            return Err(McmcError::BadConfig(format!(
                "burn_in must be at least 500, got {}",
                self.burn_in
            )));
        }
        if self.batch_size < 1_000 {
            return Err(McmcError::BadConfig(format!(
                "batch_size must be at least 1000, got {}",
                self.batch_size
            )));
        }
        if self.max_draws < self.batch_size {
            return Err(McmcError::BadConfig(format!(
                "max_draws {} must be at least batch_size {}",
                self.max_draws, self.batch_size
            )));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(McmcError::BadConfig(format!(
                "target_accept must lie in (0,1), got {}",
                self.target_accept
            )));
        }
        Ok(())
    }
}

/// Ordered post burn-in draws from one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    draws: Vec<ParameterState>,
    accepted: usize,
    steps: usize,
    hyperparameters_used: Hyperparameters,
    seed: u64,
}

impl Chain {
    pub fn draws(&self) -> &[ParameterState] {
        &self.draws
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Post burn-in acceptance rate.
    pub fn accept_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.accepted as f64 / self.steps as f64
        }
    }

    pub fn hyperparameters_used(&self) -> Hyperparameters {
        self.hyperparameters_used
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mu_series(&self) -> Vec<f64> {
        self.draws.iter().map(|x| x.mu).collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `ln sigmoid(z)`, stable for large |z|.
fn ln_sigmoid(z: f64) -> f64 {
    if z < -30.0 {
        z
    } else {
        -(-z).exp().ln_1p()
    }
}

/// Lower Cholesky factor of a symmetric positive-definite 3x3 matrix,
/// with a diagonal jitter retry for near-singular inputs.
fn cholesky3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut jitter = 0.0;
    loop {
        let mut l = [[0.0; 3]; 3];
        let mut ok = true;
        'outer: for i in 0..3 {
            for j in 0..=i {
                let mut sum = m[i][j] + if i == j { jitter } else { 0.0 };
                for k in 0..j {
                    sum -= l[i][k] * l[j][k];
                }
                if i == j {
                    if sum <= 0.0 {
                        ok = false;
                        break 'outer;
                    }
                    l[i][j] = sum.sqrt();
                } else {
                    l[i][j] = sum / l[j][j];
                }
            }
        }
        if ok {
            return l;
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 100.0 };
        assert!(jitter < 1.0, "covariance irrecoverably singular");
    }
}

/// Running mean and covariance (Welford) in the transformed space.
struct RunningCov {
    n: usize,
    mean: [f64; 3],
    m2: [[f64; 3]; 3],
}

impl RunningCov {
    fn new() -> Self {
        Self {
            n: 0,
            mean: [0.0; 3],
            m2: [[0.0; 3]; 3],
        }
    }

    fn push(&mut self, x: [f64; 3]) {
        self.n += 1;
        let nf = self.n as f64;
        let mut delta = [0.0; 3];
        for i in 0..3 {
            delta[i] = x[i] - self.mean[i];
            self.mean[i] += delta[i] / nf;
        }
        for i in 0..3 {
            for j in 0..3 {
                self.m2[i][j] += delta[i] * (x[j] - self.mean[j]);
            }
        }
    }

    fn cov(&self) -> [[f64; 3]; 3] {
        let nf = (self.n.max(2) - 1) as f64;
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] = self.m2[i][j] / nf;
            }
        }
        c
    }
}

/// A Metropolis chain with frozen proposal, extendable in batches.
pub struct Sampler {
    target: Hyperparameters,
    dataset: Dataset,
    constants: ModelConstants,
    rng: ChaCha8Rng,
    z: [f64; 3],
    log_post: f64,
    chol: [[f64; 3]; 3],
    scale: f64,
    chain: Chain,
}

impl Sampler {
    /// Runs burn-in with covariance and scale adaptation, then freezes the
    /// proposal. Fails when no proposal was accepted during burn-in.
    pub fn new(
        t: Hyperparameters,
        d: &Dataset,
        c: &ModelConstants,
        cfg: McmcConfig,
    ) -> Result<Self, McmcError> {
        cfg.validate()?;
        c.validate()?;
        t.validate(c)?;

        let tau_mid = 0.5 * (c.tau_l + t.tau0);
        let k_mid = 0.5 * (c.k_l + c.k_u);
        // Start mu at its conditional posterior mean given midpoint scales.
        let het = k_mid * k_mid * tau_mid * tau_mid;
        let mut a = 1.0 / (tau_mid * tau_mid);
        let mut b = t.mu0 / (tau_mid * tau_mid);
        for s in d.studies() {
            let prec = 1.0 / (s.std_error * s.std_error + het);
            a += prec;
            b += s.effect * prec;
        }
        let start_mu = b / a;
        let mu_scale = a.sqrt().recip();

        let mut sampler = Self {
            target: t,
            dataset: d.clone(),
            constants: *c,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            z: [start_mu, 0.0, 0.0],
            log_post: 0.0,
            chol: [
                [mu_scale, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
            ],
            scale: 2.38 / (3.0f64).sqrt(),
            chain: Chain {
                draws: Vec::new(),
                accepted: 0,
                steps: 0,
                hyperparameters_used: t,
                seed: cfg.seed,
            },
        };
        sampler.log_post = sampler.log_target(sampler.z)?;

        let mut cov = RunningCov::new();
        let mut accepted_total = 0usize;
        let mut window_accepted = 0usize;
        let mut window = 0usize;
        const ADAPT_EVERY: usize = 100;
        for step in 0..cfg.burn_in {
            if sampler.step()? {
                accepted_total += 1;
                window_accepted += 1;
            }
            cov.push(sampler.z);
            if (step + 1) % ADAPT_EVERY == 0 {
                window += 1;
                let rate = window_accepted as f64 / ADAPT_EVERY as f64;
                // Robbins-Monro on the log scale, damped over windows.
                let gamma = (window as f64).powf(-0.6);
                sampler.scale *= ((rate - cfg.target_accept) * gamma).exp();
                sampler.scale = sampler.scale.clamp(1e-4, 1e4);
                window_accepted = 0;
                if cov.n >= 200 {
                    let mut m = cov.cov();
                    for (i, row) in m.iter_mut().enumerate() {
                        row[i] += 1e-9;
                    }
                    sampler.chol = cholesky3(m);
                }
            }
        }
        if accepted_total == 0 {
            return Err(McmcError::InitFailure {
                mu0: t.mu0,
                tau0: t.tau0,
                start_mu,
                scale: sampler.scale,
            });
        }
        Ok(sampler)
    }

    fn to_state(&self, z: [f64; 3]) -> ParameterState {
        let c = &self.constants;
        ParameterState {
            mu: z[0],
            tau_mu: c.tau_l + (self.target.tau0 - c.tau_l) * sigmoid(z[1]),
            k: c.k_l + (c.k_u - c.k_l) * sigmoid(z[2]),
        }
    }

    /// Log target in z-space: log posterior plus the log-Jacobian of the
    /// scaled-logit map, `ln(width) + ln sig(z) + ln sig(-z)` per bounded
    /// coordinate.
    fn log_target(&self, z: [f64; 3]) -> Result<f64, McmcError> {
        let x = self.to_state(z);
        let lp = log_unnormalized_posterior(x, self.target, &self.dataset, &self.constants)?;
        let jac = (self.target.tau0 - self.constants.tau_l).ln()
            + ln_sigmoid(z[1])
            + ln_sigmoid(-z[1])
            + (self.constants.k_u - self.constants.k_l).ln()
            + ln_sigmoid(z[2])
            + ln_sigmoid(-z[2]);
        Ok(lp + jac)
    }

    /// One Metropolis step; returns whether the proposal was accepted.
    fn step(&mut self) -> Result<bool, McmcError> {
        let mut zeta = [0.0; 3];
        for v in &mut zeta {
            *v = self.rng.sample(StandardNormal);
        }
        let mut prop = self.z;
        for i in 0..3 {
            let mut d = 0.0;
            for (j, &zj) in zeta.iter().enumerate().take(i + 1) {
                d += self.chol[i][j] * zj;
            }
            prop[i] += self.scale * d;
        }
        let lp = self.log_target(prop)?;
        let u: f64 = self.rng.random();
        if u.ln() < lp - self.log_post {
            self.z = prop;
            self.log_post = lp;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Appends `n` recorded draws with the frozen proposal.
    pub fn extend(&mut self, n: usize) -> Result<(), McmcError> {
        self.chain.draws.reserve(n);
        for _ in 0..n {
            if self.step()? {
                self.chain.accepted += 1;
            }
            self.chain.steps += 1;
            self.chain.draws.push(self.to_state(self.z));
        }
        Ok(())
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn into_chain(self) -> Chain {
        self.chain
    }
}

/// Burn in, record `cfg.max_draws` draws, and return the chain.
pub fn run_chain(
    t: Hyperparameters,
    d: &Dataset,
    c: &ModelConstants,
    cfg: McmcConfig,
) -> Result<Chain, McmcError> {
    let mut sampler = Sampler::new(t, d, c, cfg)?;
    sampler.extend(cfg.max_draws)?;
    Ok(sampler.into_chain())
}

fn check_series(series: &[f64]) -> Result<(), McmcError> {
    if series.len() < 10 {
        return Err(McmcError::TooShort(series.len()));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(McmcError::NonFinite);
    }
    Ok(())
}

/// Autocovariance at `lag` of a centered series, biased normalization
/// (divide by N).
fn autocov(centered: &[f64], lag: usize) -> f64 {
    let n = centered.len();
    centered[..n - lag]
        .iter()
        .zip(&centered[lag..])
        .map(|(a, b)| a * b)
        .sum::<f64>()
        / n as f64
}

/// Empirical autocorrelation `rho(0..=max_lag)`, with `rho(0) = 1` and the
/// biased (divide by N) estimator. `max_lag` is capped at `N - 1`.
pub fn autocorrelation(series: &[f64], max_lag: usize) -> Result<Vec<f64>, McmcError> {
    check_series(series)?;
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let c0 = autocov(&centered, 0);
    if c0 <= 0.0 {
        return Err(McmcError::DegenerateSeries);
    }
    let cap = max_lag.min(n - 1);
    let mut rho = Vec::with_capacity(cap + 1);
    rho.push(1.0);
    for lag in 1..=cap {
        rho.push(autocov(&centered, lag) / c0);
    }
    Ok(rho)
}

/// Default lag cap for [`ess_mcmc`]; the first-negative truncation makes
/// larger lags irrelevant.
pub const DEFAULT_MAX_LAG: usize = 10_000;

/// MCMC effective sample size `N / (1 + 2 sum rho(k))`, truncating the sum at
/// the first negative empirical autocorrelation. Clamped to `(0, N]`.
pub fn ess_mcmc(series: &[f64]) -> Result<f64, McmcError> {
    check_series(series)?;
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let c0 = autocov(&centered, 0);
    if c0 <= 0.0 {
        return Err(McmcError::DegenerateSeries);
    }
    let cap = DEFAULT_MAX_LAG.min(n - 1);
    let mut sum = 0.0;
    for lag in 1..=cap {
        let rho = autocov(&centered, lag) / c0;
        if rho < 0.0 {
            break;
        }
        sum += rho;
    }
    let ess = n as f64 / (1.0 + 2.0 * sum);
    Ok(ess.min(n as f64).max(f64::MIN_POSITIVE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Study;
    use crate::oracle::{posterior_mean_mu, QuadratureSpec};

    pub(crate) fn synthetic_dataset() -> Dataset {
        let effects = [12.0, -3.0, 25.0, 8.0, 40.0, 1.5, 19.0, -7.0, 33.0, 15.0];
        let ses = [5.0, 8.0, 10.0, 4.0, 12.0, 6.0, 9.0, 7.0, 11.0, 5.5];
        Dataset::new(
            effects
                .iter()
                .zip(&ses)
                .map(|(&effect, &std_error)| Study { effect, std_error })
                .collect(),
            "synthetic-10",
        )
        .unwrap()
    }

    fn white_noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn ar1(phi: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = 0.0;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            x = phi * x + z;
            out.push(x);
        }
        out
    }

    #[test]
    fn autocorrelation_of_white_noise_is_small() {
        let n = 10_000;
        let series = white_noise(n, 1);
        let rho = autocorrelation(&series, 100).unwrap();
        assert_eq!(rho[0], 1.0);
        let bound = 4.0 / (n as f64).sqrt();
        let within = rho[1..].iter().filter(|r| r.abs() < bound).count();
        assert!(
            within as f64 >= 0.95 * 100.0,
            "only {within}/100 lags inside the 4/sqrt(N) band"
        );
    }

    #[test]
    fn autocorrelation_of_alternating_series() {
        let series: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let rho = autocorrelation(&series, 2).unwrap();
        assert!((rho[1] + 1.0).abs() < 2e-3, "rho(1) = {}", rho[1]);
    }

    #[test]
    fn autocorrelation_of_ar1_matches_theory() {
        let series = ar1(0.5, 100_000, 2);
        let rho = autocorrelation(&series, 5).unwrap();
        assert!((rho[1] - 0.5).abs() < 0.02, "rho(1) = {}", rho[1]);
    }

    #[test]
    fn autocorrelation_rejects_degenerate_input() {
        assert!(matches!(
            autocorrelation(&[1.0; 100], 10),
            Err(McmcError::DegenerateSeries)
        ));
        assert!(matches!(
            autocorrelation(&[1.0; 5], 2),
            Err(McmcError::TooShort(5))
        ));
        let mut bad = white_noise(100, 3);
        bad[50] = f64::NAN;
        assert!(matches!(
            autocorrelation(&bad, 10),
            Err(McmcError::NonFinite)
        ));
    }

    #[test]
    fn ess_of_iid_noise_is_near_n() {
        let n = 10_000;
        let ess = ess_mcmc(&white_noise(n, 4)).unwrap();
        assert!(
            ess >= 0.8 * n as f64 && ess <= 1.2 * n as f64,
            "ess {ess} for N {n}"
        );
    }

    #[test]
    fn ess_of_ar1_matches_theory() {
        let n = 100_000;
        let ess = ess_mcmc(&ar1(0.5, n, 5)).unwrap();
        let expect = n as f64 * (1.0 - 0.5) / (1.0 + 0.5);
        assert!(
            (ess - expect).abs() < 0.15 * expect,
            "ess {ess}, expected {expect}"
        );
    }

    #[test]
    fn ess_with_negative_first_lag_is_exactly_n() {
        let series: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(ess_mcmc(&series).unwrap(), 1000.0);
    }

    #[test]
    fn chains_are_deterministic_given_seed() {
        let d = synthetic_dataset();
        let c = ModelConstants::default();
        let cfg = McmcConfig {
            burn_in: 500,
            batch_size: 1_000,
            max_draws: 2_000,
            ..Default::default()
        };
        let t = Hyperparameters::new(2.0, 7.0);
        let a = run_chain(t, &d, &c, cfg).unwrap();
        let b = run_chain(t, &d, &c, cfg).unwrap();
        assert_eq!(a.draws().len(), b.draws().len());
        for (x, y) in a.draws().iter().zip(b.draws()) {
            assert_eq!(x.mu.to_bits(), y.mu.to_bits());
            assert_eq!(x.tau_mu.to_bits(), y.tau_mu.to_bits());
            assert_eq!(x.k.to_bits(), y.k.to_bits());
        }
    }

    #[test]
    fn draws_respect_support_and_acceptance_band() {
        let d = synthetic_dataset();
        let c = ModelConstants::default();
        let cfg = McmcConfig {
            burn_in: 2_000,
            batch_size: 1_000,
            max_draws: 10_000,
            seed: 11,
            ..Default::default()
        };
        let t = Hyperparameters::new(5.0, 8.0);
        let chain = run_chain(t, &d, &c, cfg).unwrap();
        for x in chain.draws() {
            assert!(x.in_support(t, &c), "draw out of support: {x:?}");
        }
        let rate = chain.accept_rate();
        assert!(rate > 0.1 && rate < 0.6, "accept rate {rate}");
    }

    #[test]
    fn split_half_means_agree() {
        let d = synthetic_dataset();
        let c = ModelConstants::default();
        let cfg = McmcConfig {
            max_draws: 100_000,
            seed: 13,
            ..Default::default()
        };
        let chain = run_chain(Hyperparameters::new(0.0, 6.0), &d, &c, cfg).unwrap();
        let mu = chain.mu_series();
        let half = mu.len() / 2;
        let (a, b) = mu.split_at(half);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let var = |s: &[f64], m: f64| {
            s.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (s.len() - 1) as f64
        };
        let (ma, mb) = (mean(a), mean(b));
        let se_a = (var(a, ma) / ess_mcmc(a).unwrap()).sqrt();
        let se_b = (var(b, mb) / ess_mcmc(b).unwrap()).sqrt();
        let joint = (se_a * se_a + se_b * se_b).sqrt();
        assert!(
            (ma - mb).abs() < 5.0 * joint,
            "halves {ma} vs {mb}, joint se {joint}"
        );
    }

    #[test]
    fn posterior_mean_matches_quadrature() {
        let d = synthetic_dataset();
        let c = ModelConstants::default();
        let t = Hyperparameters::new(0.0, 5.0);
        let cfg = McmcConfig {
            max_draws: 100_000,
            seed: 17,
            ..Default::default()
        };
        let chain = run_chain(t, &d, &c, cfg).unwrap();
        let mu = chain.mu_series();
        let mean = mu.iter().sum::<f64>() / mu.len() as f64;
        let var = mu.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (mu.len() - 1) as f64;
        let se = (var / ess_mcmc(&mu).unwrap()).sqrt();
        let oracle = posterior_mean_mu(t, &d, &c, QuadratureSpec::default()).unwrap();
        assert!(
            (mean - oracle.mean).abs() < 3.0 * se,
            "mcmc {mean} vs oracle {} (se {se})",
            oracle.mean
        );
    }
}
