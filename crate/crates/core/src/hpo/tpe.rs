//! Tree-structured Parzen Estimator sampling.
//!
//! Completed trials are ranked by objective (higher is better) and split into
//! a good set (the top `max(1, ceil(gamma * n))`) and a bad set. Each
//! parameter gets two independent densities, `l(x)` over the good set and
//! `g(x)` over the bad set; candidates are drawn from `l` and the one with the
//! largest `l(x) / g(x)` wins.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::space::{Domain, ParamSpec, ParamValue};
use super::{HpoError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpeConfig {
    /// Fraction of completed trials forming the good set.
    pub gamma: f64,
    /// Completed trials required before densities replace prior sampling.
    pub n_startup: usize,
    /// Candidates drawn from the good density per suggestion.
    pub n_candidates: usize,
    /// Lower bound on kernel width as a fraction of the (internal) range.
    pub min_bandwidth: f64,
    /// Weight of the wide prior kernel mixed into both densities (0 disables).
    pub prior_weight: f64,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.25,
            n_startup: 10,
            n_candidates: 24,
            min_bandwidth: 0.01,
            prior_weight: 1.0,
        }
    }
}

impl TpeConfig {
    /// Never leaves the startup phase: plain random search.
    pub fn random_search() -> Self {
        Self {
            n_startup: usize::MAX,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(HpoError::InvalidConfig(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.n_candidates == 0 {
            return Err(HpoError::InvalidConfig("n_candidates must be positive".into()));
        }
        if !(self.min_bandwidth > 0.0 && self.min_bandwidth <= 1.0) {
            return Err(HpoError::InvalidConfig(format!(
                "min_bandwidth must lie in (0, 1], got {}",
                self.min_bandwidth
            )));
        }
        if !(self.prior_weight >= 0.0 && self.prior_weight.is_finite()) {
            return Err(HpoError::InvalidConfig(format!(
                "prior_weight must be finite and non-negative, got {}",
                self.prior_weight
            )));
        }
        Ok(())
    }

    /// Size of the good set for `completed` trials.
    pub fn n_good(&self, completed: usize) -> usize {
        ((self.gamma * completed as f64).ceil() as usize).max(1).min(completed)
    }
}

/// Splits `(objective, item)` pairs into good and bad sets. Ties in the
/// objective keep the input order.
pub fn split_good_bad<T: Clone>(config: &TpeConfig, ranked: &[(f64, T)]) -> (Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| ranked[b].0.total_cmp(&ranked[a].0).then(a.cmp(&b)));
    let n_good = config.n_good(ranked.len());
    let good = order[..n_good].iter().map(|&i| ranked[i].1.clone()).collect();
    let bad = order[n_good..].iter().map(|&i| ranked[i].1.clone()).collect();
    (good, bad)
}

/// Mixture of Gaussians truncated to `[low, high]`, one kernel per
/// observation plus an optional prior kernel centred on the range with
/// width equal to the range. With no kernels at all it is the uniform density.
#[derive(Debug, Clone)]
pub struct ParzenEstimator {
    low: f64,
    high: f64,
    kernels: Vec<Kernel>,
    total_weight: f64,
}

#[derive(Debug, Clone)]
struct Kernel {
    dist: Normal,
    mu: f64,
    sigma: f64,
    weight: f64,
    /// Probability mass of the untruncated kernel inside `[low, high]`.
    mass: f64,
    cdf_low: f64,
}

impl ParzenEstimator {
    /// Bandwidth of each kernel is the larger gap to its sorted neighbours.
    /// The bounds act as neighbours only for a lone observation; the two
    /// outermost of several kernels use their inner gap. Widths are clipped to
    /// `[range / min(1 / min_bandwidth, 1 + n_kernels), range]`, a floor that
    /// shrinks toward `min_bandwidth * range` as observations accumulate.
    pub fn fit(points: &[f64], low: f64, high: f64, min_bandwidth: f64, prior_weight: f64) -> Self {
        let range = high - low;
        let mut sorted: Vec<f64> = points.iter().map(|p| p.clamp(low, high)).collect();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let n_kernels = n + usize::from(prior_weight > 0.0);
        let floor = range / (1.0 / min_bandwidth).min(1.0 + n_kernels as f64);
        let mut kernels: Vec<Kernel> = sorted
            .iter()
            .enumerate()
            .map(|(i, &mu)| {
                let spacing = match (i, n) {
                    (_, 1) => (mu - low).max(high - mu),
                    (0, _) => sorted[1] - mu,
                    (i, n) if i + 1 == n => mu - sorted[i - 1],
                    _ => (mu - sorted[i - 1]).max(sorted[i + 1] - mu),
                };
                Kernel::new(mu, spacing.clamp(floor, range), 1.0, low, high)
            })
            .collect();
        if prior_weight > 0.0 {
            kernels.push(Kernel::new(low + range / 2.0, range, prior_weight, low, high));
        }
        let total_weight = kernels.iter().map(|k| k.weight).sum();
        Self {
            low,
            high,
            kernels,
            total_weight,
        }
    }

    pub fn bandwidths(&self) -> Vec<f64> {
        self.kernels.iter().map(|k| k.sigma).collect()
    }

    pub fn centers(&self) -> Vec<f64> {
        self.kernels.iter().map(|k| k.mu).collect()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if x < self.low || x > self.high {
            return 0.0;
        }
        if self.kernels.is_empty() {
            return 1.0 / (self.high - self.low);
        }
        let sum: f64 = self.kernels.iter().map(|k| k.weight * k.dist.pdf(x) / k.mass).sum();
        sum / self.total_weight
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        self.pdf(x).max(f64::MIN_POSITIVE).ln()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.kernels.is_empty() {
            return self.low + (self.high - self.low) * rng.random::<f64>();
        }
        let mut pick = self.total_weight * rng.random::<f64>();
        let k = self
            .kernels
            .iter()
            .find(|k| {
                pick -= k.weight;
                pick < 0.0
            })
            .unwrap_or(&self.kernels[self.kernels.len() - 1]);
        // inverse-CDF draw restricted to the truncation window
        let u = k.cdf_low + k.mass * rng.random::<f64>();
        let x = k.dist.inverse_cdf(u.clamp(1e-300, 1.0 - 1e-16));
        if x.is_finite() {
            x.clamp(self.low, self.high)
        } else {
            k.mu
        }
    }
}

impl Kernel {
    fn new(mu: f64, sigma: f64, weight: f64, low: f64, high: f64) -> Self {
        let dist = Normal::new(mu, sigma).expect("positive bandwidth");
        let cdf_low = dist.cdf(low);
        let mass = (dist.cdf(high) - cdf_low).max(f64::MIN_POSITIVE);
        Kernel {
            dist,
            mu,
            sigma,
            weight,
            mass,
            cdf_low,
        }
    }
}

/// Categorical density: observation counts with add-one smoothing.
#[derive(Debug, Clone)]
pub struct CategoricalEstimator {
    probs: Vec<f64>,
}

impl CategoricalEstimator {
    pub fn fit(indices: &[usize], n_choices: usize) -> Self {
        let mut counts = vec![1.0; n_choices];
        for &i in indices {
            counts[i] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        Self {
            probs: counts.into_iter().map(|c| c / total).collect(),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_pmf(&self, idx: usize) -> f64 {
        self.probs[idx].ln()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = rng.random::<f64>();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }
}

/// Numeric domains are modelled in an internal coordinate: the raw value for
/// uniform floats and integers, the natural log for log-uniform floats.
fn internal_bounds(domain: &Domain) -> Option<(f64, f64)> {
    match *domain {
        Domain::FloatUniform { low, high } => Some((low, high)),
        Domain::FloatLogUniform { low, high } => Some((low.ln(), high.ln())),
        Domain::IntUniform { low, high } => Some((low as f64, high as f64)),
        Domain::Categorical { .. } => None,
    }
}

fn to_internal(domain: &Domain, value: &ParamValue) -> Option<f64> {
    match domain {
        Domain::FloatLogUniform { .. } => value.as_f64().filter(|v| *v > 0.0).map(f64::ln),
        Domain::FloatUniform { .. } | Domain::IntUniform { .. } => value.as_f64(),
        Domain::Categorical { choices } => choices.iter().position(|c| c == value).map(|i| i as f64),
    }
}

fn from_internal(domain: &Domain, x: f64) -> ParamValue {
    match *domain {
        Domain::FloatUniform { low, high } => ParamValue::Float(x.clamp(low, high)),
        Domain::FloatLogUniform { low, high } => ParamValue::Float(x.exp().clamp(low, high)),
        Domain::IntUniform { low, high } => ParamValue::Int((x.round() as i64).clamp(low, high)),
        Domain::Categorical { ref choices } => choices[(x as usize).min(choices.len() - 1)].clone(),
    }
}

/// Draws from the prior: uniform, log-uniform, uniform integer or uniform
/// category.
pub fn sample_prior<R: Rng + ?Sized>(spec: &ParamSpec, rng: &mut R) -> ParamValue {
    match &spec.domain {
        Domain::Categorical { choices } => choices[rng.random_range(0..choices.len())].clone(),
        Domain::IntUniform { low, high } => ParamValue::Int(rng.random_range(*low..=*high)),
        domain => {
            let (lo, hi) = internal_bounds(domain).expect("numeric domain");
            from_internal(domain, lo + (hi - lo) * rng.random::<f64>())
        }
    }
}

/// One TPE draw for a single parameter given its good and bad observations.
pub fn sample_tpe<R: Rng + ?Sized>(
    spec: &ParamSpec,
    good: &[ParamValue],
    bad: &[ParamValue],
    config: &TpeConfig,
    rng: &mut R,
) -> ParamValue {
    let good_x: Vec<f64> = good.iter().filter_map(|v| to_internal(&spec.domain, v)).collect();
    let bad_x: Vec<f64> = bad.iter().filter_map(|v| to_internal(&spec.domain, v)).collect();
    match &spec.domain {
        Domain::Categorical { choices } => {
            let idx = |xs: &[f64]| xs.iter().map(|&x| x as usize).collect::<Vec<_>>();
            let l = CategoricalEstimator::fit(&idx(&good_x), choices.len());
            let g = CategoricalEstimator::fit(&idx(&bad_x), choices.len());
            let best = (0..config.n_candidates)
                .map(|_| l.sample(rng))
                .map(|c| (l.log_pmf(c) - g.log_pmf(c), c))
                .fold(None, |acc: Option<(f64, usize)>, cand| match acc {
                    Some(a) if a.0 >= cand.0 => Some(a),
                    _ => Some(cand),
                })
                .expect("at least one candidate");
            choices[best.1].clone()
        }
        domain => {
            let (lo, hi) = internal_bounds(domain).expect("numeric domain");
            let l = ParzenEstimator::fit(&good_x, lo, hi, config.min_bandwidth, config.prior_weight);
            let g = ParzenEstimator::fit(&bad_x, lo, hi, config.min_bandwidth, config.prior_weight);
            let best = (0..config.n_candidates)
                .map(|_| l.sample(rng))
                .map(|x| (l.log_pdf(x) - g.log_pdf(x), x))
                .fold(None, |acc: Option<(f64, f64)>, cand| match acc {
                    Some(a) if a.0 >= cand.0 => Some(a),
                    _ => Some(cand),
                })
                .expect("at least one candidate");
            from_internal(domain, best.1)
        }
    }
}
