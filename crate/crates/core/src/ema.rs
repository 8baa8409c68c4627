//! Timescale calculus for AdamW viewed as an exponential moving average.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ParamGroup;
use crate::tensor::Tensor;

/// EMA timescale of a run, in iterations and in epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timescale {
    pub tau_iter: f64,
    pub tau_epoch: f64,
    /// Iterations per epoch, `N/B`.
    pub iters_per_epoch: usize,
    pub n: usize,
    pub batch: usize,
}

pub fn timescale_of(eta: f64, lambda: f64, n: usize, batch: usize) -> Result<Timescale> {
    if !(eta > 0.0 && lambda > 0.0) || n == 0 || batch == 0 {
        return Err(Error::InvalidArgument(format!(
            "timescale needs positive eta, lambda, N and B (got {eta}, {lambda}, {n}, {batch})"
        )));
    }
    let rate = eta * lambda;
    if rate >= 1.0 {
        return Err(Error::TimescaleTooShort { rate });
    }
    if !n.is_multiple_of(batch) {
        return Err(Error::BatchDoesNotDivide { n, batch });
    }
    let tau_iter = 1.0 / rate;
    let iters_per_epoch = n / batch;
    Ok(Timescale {
        tau_iter,
        tau_epoch: tau_iter / iters_per_epoch as f64,
        iters_per_epoch,
        n,
        batch,
    })
}

/// A scalar EMA with a fixed timescale, `ema_t = (1 − 1/τ)·ema_{t−1} + q_t/τ`.
#[derive(Clone, Copy, Debug)]
pub struct Ema {
    pub tau: f64,
    pub value: f64,
}

impl Ema {
    pub fn new(tau: f64) -> Self {
        Self { tau, value: 0.0 }
    }

    pub fn update(&mut self, q: f64) -> f64 {
        let rate = 1.0 / self.tau;
        self.value = (1.0 - rate) * self.value + rate * q;
        self.value
    }
}

/// Weights placed on updates `q_1 … q_t` by an EMA started at zero.
/// Index `k` holds the weight of `q_{k+1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaWeights {
    pub horizon: usize,
    pub tau: f64,
    /// `(1 − 1/τ)^{t−t′}/τ`
    pub exact: Vec<f64>,
    /// `e^{−(t−t′)/τ}/τ`
    pub approx: Vec<f64>,
}

pub fn ema_weights(t: usize, tau: f64) -> Result<EmaWeights> {
    if t < 1 {
        return Err(Error::InvalidArgument("EMA horizon must be at least 1".into()));
    }
    if !(tau > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "EMA timescale must exceed 1, got {tau}"
        )));
    }
    let keep = 1.0 - 1.0 / tau;
    let (exact, approx) = (1..=t)
        .map(|tp| {
            let lag = (t - tp) as f64;
            (keep.powf(lag) / tau, (-lag / tau).exp() / tau)
        })
        .unzip();
    Ok(EmaWeights {
        horizon: t,
        tau,
        exact,
        approx,
    })
}

impl EmaWeights {
    pub fn exact_sum(&self) -> f64 {
        self.exact.iter().sum()
    }

    /// `max_{t′} |exact − approx| / exact`.
    pub fn max_relative_approx_error(&self) -> f64 {
        self.exact
            .iter()
            .zip(&self.approx)
            .map(|(e, a)| ((e - a) / e).abs())
            .fold(0.0, f64::max)
    }

    /// `max_{t′} |exact − approx| · τ`, i.e. relative to the largest weight `1/τ`.
    pub fn max_scaled_approx_error(&self) -> f64 {
        self.exact
            .iter()
            .zip(&self.approx)
            .map(|(e, a)| (e - a).abs() * self.tau)
            .fold(0.0, f64::max)
    }
}

/// Steady-state relative update size `√(2γ)` of an EMA with rate `γ`.
pub fn relative_update_size_theory(gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    Ok((2.0 * gamma).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub ratio: f64,
    pub std_error: f64,
    /// Post-burn-in steps per chain.
    pub samples: usize,
    pub chains: usize,
}

pub const MIN_MC_SAMPLES: usize = 10_000;
const MC_BATCHES: usize = 32;

/// Burn-in length `⌈20/γ⌉`, enough that `(1−γ)^burn_in < e⁻²⁰`.
pub fn mc_burn_in(gamma: f64) -> usize {
    (20.0 / gamma).ceil() as usize
}

/// Per-batch sums of `(a_{t+1} − a_t)²` and `a_t²` for one chain.
fn simulate_chain(gamma: f64, sigma: f64, samples: usize, seed: u64, stream: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut a = 0.0f64;
    for _ in 0..mc_burn_in(gamma) {
        let b: f64 = StandardNormal.sample(&mut rng);
        a = (1.0 - gamma) * a + gamma * sigma * b;
    }
    let per_batch = samples.div_ceil(MC_BATCHES);
    let mut sums = Vec::with_capacity(MC_BATCHES);
    let mut remaining = samples;
    while remaining > 0 {
        let len = per_batch.min(remaining);
        let (mut d2, mut a2) = (0.0, 0.0);
        for _ in 0..len {
            let b: f64 = StandardNormal.sample(&mut rng);
            let next = (1.0 - gamma) * a + gamma * sigma * b;
            let d = next - a;
            d2 += d * d;
            a2 += a * a;
            a = next;
        }
        sums.push((d2, a2));
        remaining -= len;
    }
    sums
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn check_mc_args(gamma: f64, sigma: f64, samples: usize) -> Result<()> {
    relative_update_size_theory(gamma)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    if samples < MIN_MC_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_MC_SAMPLES} samples, got {samples}"
        )));
    }
    Ok(())
}

/// Monte-Carlo estimate of `√(E[(a_{t+1} − a_t)²] / E[a_t²])` for
/// `a_{t+1} = (1−γ)a_t + γb_t`, `b_t ~ N(0, σ²)`. The standard error comes
/// from batch means over the chain.
pub fn relative_update_size_mc(gamma: f64, sigma: f64, samples: usize, seed: u64) -> Result<McEstimate> {
    check_mc_args(gamma, sigma, samples)?;
    let sums = simulate_chain(gamma, sigma, samples, seed, 0);
    let (d2, a2) = sums.iter().fold((0.0, 0.0), |(x, y), (d, a)| (x + d, y + a));
    let batch_ratios: Vec<f64> = sums.iter().map(|(d, a)| (d / a).sqrt()).collect();
    let (_, se) = mean_and_se(&batch_ratios);
    Ok(McEstimate {
        ratio: (d2 / a2).sqrt(),
        std_error: se,
        samples,
        chains: 1,
    })
}

/// Independent chains (distinct RNG streams of `seed`) run in parallel and
/// pooled; the standard error is taken across chains.
pub fn relative_update_size_mc_chains(
    gamma: f64,
    sigma: f64,
    samples: usize,
    chains: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_mc_args(gamma, sigma, samples)?;
    if chains < 2 {
        return relative_update_size_mc(gamma, sigma, samples, seed);
    }
    let per_chain: Vec<(f64, f64)> = (0..chains as u64)
        .into_par_iter()
        .map(|stream| {
            simulate_chain(gamma, sigma, samples, seed, stream)
                .into_iter()
                .fold((0.0, 0.0), |(x, y), (d, a)| (x + d, y + a))
        })
        .collect();
    let (d2, a2) = per_chain.iter().fold((0.0, 0.0), |(x, y), (d, a)| (x + d, y + a));
    let chain_ratios: Vec<f64> = per_chain.iter().map(|(d, a)| (d / a).sqrt()).collect();
    let (_, se) = mean_and_se(&chain_ratios);
    Ok(McEstimate {
        ratio: (d2 / a2).sqrt(),
        std_error: se,
        samples,
        chains,
    })
}

/// Mean `|W_ij|` per layer and over all selected elements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeRecord {
    pub per_layer: BTreeMap<String, f64>,
    pub global: f64,
}

pub fn mean_abs_weight(
    params: &BTreeMap<String, Tensor>,
    groups: &[ParamGroup],
    decayed_only: bool,
) -> Result<MagnitudeRecord> {
    let selected: Vec<&str> = if decayed_only {
        groups
            .iter()
            .filter(|g| g.apply_decay)
            .flat_map(|g| g.params.iter().map(String::as_str))
            .collect()
    } else {
        params.keys().map(String::as_str).collect()
    };
    let mut per_layer = BTreeMap::new();
    let (mut total, mut count) = (0.0, 0usize);
    for name in selected {
        let w = params.get(name).ok_or_else(|| Error::Unbound(name.to_string()))?;
        if w.numel() == 0 {
            continue;
        }
        total += w.data().iter().map(|x| x.abs()).sum::<f64>();
        count += w.numel();
        per_layer.insert(name.to_string(), w.mean_abs());
    }
    if count == 0 {
        return Err(Error::EmptySelection);
    }
    Ok(MagnitudeRecord {
        per_layer,
        global: total / count as f64,
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("slope needs at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("log-log slope needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}
