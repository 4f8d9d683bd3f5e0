//! Exact sampling from Gibbs/softmax distributions given only coin-flip
//! access to distributions whose means are the energies.
//!
//! The race backend never evaluates a mean: it samples from
//! `z_k ∝ exp((w_k - α_k)/δ)` exactly, using the uniform-proposal Bernoulli
//! race over `exp(λ(Ω_k - 1))`-coins, where `Ω_k = (w_k - α_k + h + 2)/(h+4)`
//! and `λ = (h+4)/δ`. The exact-mean backend evaluates the softmax directly
//! when every candidate exposes its mean; both backends sample the same
//! distribution.

use crate::error::{Error, Result};
use crate::numeric::{ln_gamma, softmax};
use crate::rng::RngStream;

/// A bounded random source. `flip` returns a value in `[-1, 1]`;
/// `exact_mean` is available for sources whose mean is computable.
pub trait Coin {
    fn flip(&self, rng: &mut RngStream) -> f64;
    fn exact_mean(&self) -> Option<f64> {
        None
    }
}

/// Coin that is `1` with probability `p`, else `0`.
#[derive(Debug, Clone, Copy)]
pub struct BernoulliCoin {
    pub p: f64,
}

impl Coin for BernoulliCoin {
    fn flip(&self, rng: &mut RngStream) -> f64 {
        if rng.bernoulli(self.p) {
            1.0
        } else {
            0.0
        }
    }
    fn exact_mean(&self) -> Option<f64> {
        Some(self.p)
    }
}

/// Deterministic coin.
#[derive(Debug, Clone, Copy)]
pub struct ConstCoin {
    pub value: f64,
}

impl Coin for ConstCoin {
    fn flip(&self, _rng: &mut RngStream) -> f64 {
        self.value
    }
    fn exact_mean(&self) -> Option<f64> {
        Some(self.value)
    }
}

/// Coin taking `hi` with probability `p_hi`, else `lo`.
#[derive(Debug, Clone, Copy)]
pub struct TwoPointCoin {
    pub hi: f64,
    pub lo: f64,
    pub p_hi: f64,
}

impl Coin for TwoPointCoin {
    fn flip(&self, rng: &mut RngStream) -> f64 {
        if rng.bernoulli(self.p_hi) {
            self.hi
        } else {
            self.lo
        }
    }
    fn exact_mean(&self) -> Option<f64> {
        Some(self.p_hi * self.hi + (1.0 - self.p_hi) * self.lo)
    }
}

/// Closure-backed coin; `mean` may be supplied when known.
pub struct FnCoin<F: Fn(&mut RngStream) -> f64> {
    pub f: F,
    pub mean: Option<f64>,
}

impl<F: Fn(&mut RngStream) -> f64> Coin for FnCoin<F> {
    fn flip(&self, rng: &mut RngStream) -> f64 {
        (self.f)(rng)
    }
    fn exact_mean(&self) -> Option<f64> {
        self.mean
    }
}

const POISSON_INVERSION_CUTOFF: f64 = 30.0;

/// Poisson sample. Inversion by sequential search for `lambda <= 30`,
/// Atkinson's logistic-envelope rejection above.
pub fn poisson(lambda: f64, rng: &mut RngStream) -> u64 {
    debug_assert!(lambda >= 0.0);
    if lambda == 0.0 {
        return 0;
    }
    if lambda <= POISSON_INVERSION_CUTOFF {
        let l = (-lambda).exp();
        let mut k = 0u64;
        let mut p = 1.0;
        loop {
            p *= rng.f64();
            if p <= l {
                return k;
            }
            k += 1;
        }
    }
    // Atkinson (1979)
    let c = 0.767 - 3.36 / lambda;
    let beta = std::f64::consts::PI / (3.0 * lambda).sqrt();
    let alpha = beta * lambda;
    let k = c.ln() - lambda - beta.ln();
    loop {
        let u = rng.f64();
        if u <= 0.0 {
            continue;
        }
        let x = (alpha - ((1.0 - u) / u).ln()) / beta;
        let n = (x + 0.5).floor();
        if n < 0.0 {
            continue;
        }
        let v = rng.f64();
        let y = alpha - beta * x;
        let t = 1.0 + y.exp();
        let lhs = y + (v / (t * t)).ln();
        let rhs = k + n * lambda.ln() - ln_gamma(n + 1.0);
        if lhs <= rhs {
            return n as u64;
        }
    }
}

/// Flip a coin that is `1` with probability exactly `exp(lambda * (p - 1))`,
/// where `p` is the (unknown) mean of the given `{0,1}`-valued coin.
///
/// Construction: draw `K ~ Poisson(lambda)` and return `1` iff `K` flips of
/// the coin all come up heads; `E[p^K] = exp(lambda (p - 1))` by the Poisson
/// moment generating identity.
pub fn exp_coin(coin: &dyn Coin, lambda: f64, rng: &mut RngStream) -> Result<bool> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::invalid(format!("exp_coin needs finite lambda >= 0, got {}", lambda)));
    }
    let k = poisson(lambda, rng);
    for _ in 0..k {
        let v = coin.flip(rng);
        if v != 0.0 && v != 1.0 {
            return Err(Error::invalid(format!(
                "exp_coin requires a {{0,1}}-valued coin, saw {}",
                v
            )));
        }
        if v == 0.0 {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GibbsBackend {
    /// Bernoulli race on coin flips alone; exact for unknown means.
    Race,
    /// Direct softmax on exact means; requires `exact_mean` on every coin.
    ExactMean,
}

/// A Gibbs sampling request: `m` candidate sources with means in `[-1, 1]`,
/// offsets `α_k ∈ [0, h]`, temperature `δ > 0`. The sampled index follows
/// `z_k ∝ exp((w_k - α_k)/δ)`.
pub struct GibbsRequest<'a> {
    pub coins: &'a [&'a dyn Coin],
    pub offsets: &'a [f64],
    pub delta: f64,
    pub h: f64,
}

impl<'a> GibbsRequest<'a> {
    fn validate(&self) -> Result<()> {
        if self.coins.is_empty() {
            return Err(Error::invalid("gibbs request needs at least one candidate"));
        }
        if self.coins.len() != self.offsets.len() {
            return Err(Error::invalid("one offset per candidate required"));
        }
        if !(self.delta > 0.0) {
            return Err(Error::invalid(format!("delta must be positive, got {}", self.delta)));
        }
        if self.h < 0.0 {
            return Err(Error::invalid("h must be nonnegative"));
        }
        for &a in self.offsets {
            if a < -1e-12 || a > self.h + 1e-9 {
                return Err(Error::invalid(format!(
                    "offset {} outside [0, h={}]",
                    a, self.h
                )));
            }
        }
        Ok(())
    }
}

/// Result of one Gibbs draw, with flip telemetry for cost accounting.
#[derive(Debug, Clone, Copy, Default)]
pub struct GibbsDraw {
    pub index: usize,
    pub source_flips: u64,
    pub proposals: u64,
}

const RACE_PROPOSAL_CAP: u64 = 200_000_000;

pub fn gibbs_sample(req: &GibbsRequest, backend: GibbsBackend, rng: &mut RngStream) -> Result<GibbsDraw> {
    req.validate()?;
    match backend {
        GibbsBackend::ExactMean => {
            let mut energies = Vec::with_capacity(req.coins.len());
            for (coin, &a) in req.coins.iter().zip(req.offsets) {
                let w = coin.exact_mean().ok_or_else(|| {
                    Error::UnsupportedMode(
                        "exact_mean backend requires every candidate to expose its mean".into(),
                    )
                })?;
                energies.push((w - a) / req.delta);
            }
            let probs = softmax(&energies);
            Ok(GibbsDraw {
                index: rng.categorical(&probs),
                source_flips: 0,
                proposals: 0,
            })
        }
        GibbsBackend::Race => {
            let m = req.coins.len();
            let lambda = (req.h + 4.0) / req.delta;
            let mut flips = 0u64;
            let mut proposals = 0u64;
            loop {
                proposals += 1;
                if proposals > RACE_PROPOSAL_CAP {
                    return Err(Error::ConvergenceFailure {
                        context: "bernoulli race".into(),
                        iterations: proposals as usize,
                        residual: f64::NAN,
                    });
                }
                let k = rng.below(m);
                // exp(lambda (Ω_k - 1))-coin where the Ω_k-coin comes from
                // one bounded flip plus randomized rounding.
                let draws = poisson(lambda, rng);
                let mut all_heads = true;
                for _ in 0..draws {
                    let v = req.coins[k].flip(rng).clamp(-1.0, 1.0);
                    flips += 1;
                    let q = (v - req.offsets[k] + req.h + 2.0) / (req.h + 4.0);
                    if !rng.bernoulli(q) {
                        all_heads = false;
                        break;
                    }
                }
                if all_heads {
                    return Ok(GibbsDraw {
                        index: k,
                        source_flips: flips,
                        proposals,
                    });
                }
            }
        }
    }
}

/// Closed-form Gibbs probabilities for candidates with known means.
pub fn gibbs_probabilities(means: &[f64], offsets: &[f64], delta: f64) -> Vec<f64> {
    let energies: Vec<f64> = means
        .iter()
        .zip(offsets)
        .map(|(&w, &a)| (w - a) / delta)
        .collect();
    softmax(&energies)
}
