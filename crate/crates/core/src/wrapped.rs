//! Wrapped normal distributions on the ball.
//!
//! A sample is `exp_μ(P₀→μ(σ ⊙ ε))` with `ε ~ N(0, I)`. Randomness is always
//! supplied by the caller, either as the noise vector itself or as an RNG.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{self, BallConfig, BallPoint};
use crate::math;

/// Location and diagonal scale of `N_B(μ, diag(σ²))`.
#[derive(Clone, Debug, PartialEq)]
pub struct WrappedNormalParams {
    mu: BallPoint,
    sigma: Vec<f64>,
}

impl WrappedNormalParams {
    pub fn new(mu: BallPoint, sigma: Vec<f64>) -> Result<Self> {
        if sigma.len() != mu.dim() {
            return Err(invalid("sigma length does not match the dimension of mu"));
        }
        if !sigma.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(invalid("sigma entries must be positive and finite"));
        }
        Ok(WrappedNormalParams { mu, sigma })
    }

    /// `N_B(0, I)`.
    pub fn standard(dim: usize) -> Self {
        WrappedNormalParams { mu: BallPoint::origin(dim), sigma: alloc::vec![1.0; dim] }
    }

    pub fn mu(&self) -> &BallPoint {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Deterministic map from a standard-normal draw to a ball point.
    pub fn sample_with_noise(&self, noise: &[f64], cfg: &BallConfig) -> Result<BallPoint> {
        if noise.len() != self.sigma.len() || cfg.dim() != self.sigma.len() {
            return Err(invalid("noise dimension does not match the distribution"));
        }
        if !noise.iter().all(|x| x.is_finite()) {
            return Err(invalid("non-finite noise"));
        }
        let c = cfg.c();
        let mu = self.mu.coords();
        let k = 2.0 / geometry::lambda(c, mu);
        let u: Vec<f64> = self.sigma.iter().zip(noise).map(|(s, e)| k * s * e).collect();
        cfg.project(&geometry::exp_map_raw(c, mu, &u))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, cfg: &BallConfig) -> Result<BallPoint> {
        let noise: Vec<f64> = (0..self.sigma.len()).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_with_noise(&noise, cfg)
    }

    /// Recovers the tangent-space draw `v` that produces `z`.
    pub fn tangent_of(&self, z: &BallPoint, cfg: &BallConfig) -> Vec<f64> {
        let c = cfg.c();
        let mu = self.mu.coords();
        let k = geometry::lambda(c, mu) / 2.0;
        geometry::log_map_raw(c, mu, z.coords()).into_iter().map(|x| k * x).collect()
    }

    /// `ln |det ∂z/∂v|` of the sampling chain at the point `z`.
    pub fn log_det_jacobian(&self, z: &BallPoint, cfg: &BallConfig) -> f64 {
        let c = cfg.c();
        let n = self.sigma.len() as f64;
        let mu = self.mu.coords();
        let z = cfg.project_raw(z.coords().to_vec());
        let r = geometry::lambda(c, mu) * math::norm(&geometry::log_map_raw(c, mu, &z));
        n * math::log(2.0 / geometry::lambda(c, &z)) + (n - 1.0) * math::log_sinhc(math::sqrt(c) * r)
    }

    /// Log density of `z` with respect to Lebesgue measure on the ball.
    pub fn log_prob(&self, z: &BallPoint, cfg: &BallConfig) -> Result<f64> {
        if z.dim() != self.sigma.len() {
            return Err(invalid("point dimension does not match the distribution"));
        }
        let z = cfg.project(z.coords())?;
        let v = self.tangent_of(&z, cfg);
        let n = v.len() as f64;
        let mut log_n = -0.5 * n * math::log(2.0 * core::f64::consts::PI);
        for (vi, si) in v.iter().zip(&self.sigma) {
            log_n -= 0.5 * (vi / si) * (vi / si) + math::log(*si);
        }
        Ok(log_n - self.log_det_jacobian(&z, cfg))
    }
}

/// Which prior the model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// `N_B(0, I)`.
    Standard,
    /// Uniform mixture of the posteriors of `K` pseudo-inputs.
    Vamp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorSpec {
    Standard,
    Vamp { k: usize },
}

impl PriorSpec {
    pub fn vamp(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(invalid("a VampPrior needs at least one pseudo-input"));
        }
        Ok(PriorSpec::Vamp { k })
    }
}

/// Draws from the prior. For a VampPrior, `bank` holds the posterior of each
/// pseudo-input; a component is picked uniformly and sampled.
pub fn sample_prior<R: Rng + ?Sized>(
    spec: PriorSpec,
    bank: &[WrappedNormalParams],
    rng: &mut R,
    cfg: &BallConfig,
) -> Result<BallPoint> {
    match spec {
        PriorSpec::Standard => WrappedNormalParams::standard(cfg.dim()).sample(rng, cfg),
        PriorSpec::Vamp { k } => {
            if bank.is_empty() || bank.len() != k {
                return Err(invalid("VampPrior bank must hold exactly K posteriors"));
            }
            let i = rng.random_range(0..bank.len());
            bank[i].sample(rng, cfg)
        }
    }
}

/// Log density of a VampPrior bank at `z`.
pub fn vamp_log_prob(bank: &[WrappedNormalParams], z: &BallPoint, cfg: &BallConfig) -> Result<f64> {
    if bank.is_empty() {
        return Err(invalid("empty VampPrior bank"));
    }
    let lps = bank.iter().map(|q| q.log_prob(z, cfg)).collect::<Result<Vec<_>>>()?;
    Ok(math::log_sum_exp(&lps) - math::log(bank.len() as f64))
}
