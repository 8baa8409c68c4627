//! Hyperparameter transfer across dataset size and model width, and the
//! equivalence map between settings that share a trajectory up to scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::HyperParams;
use crate::si_net::InitSpec;

/// Hyperparameters tuned on a base setting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseRun {
    pub eta_base: f64,
    pub lambda_base: f64,
    pub epsilon_base: f64,
    pub sigma_base: f64,
    pub n_base: usize,
    pub batch: usize,
    pub fan_in_base: usize,
}

impl BaseRun {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.eta_base, self.lambda_base, self.epsilon_base, self.sigma_base]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite());
        if !positive || self.n_base == 0 || self.batch == 0 || self.fan_in_base == 0 {
            return Err(Error::Config(format!("base run fields must be positive: {self:?}")));
        }
        let rate = self.eta_base * self.lambda_base;
        if rate >= 1.0 {
            return Err(Error::TimescaleTooShort { rate });
        }
        Ok(())
    }

    pub fn tau_iter(&self) -> f64 {
        1.0 / (self.eta_base * self.lambda_base)
    }
}

/// Factors relating a target setting to its base.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleMap {
    /// Equivalence constant `c = σ/σ′ = η/η′ = λ′/λ = ε′/ε`.
    pub c: f64,
    /// Width factor `fan_in / fan_in_base`.
    pub s: f64,
    /// Dataset growth `N_new / N_base`.
    pub n_ratio: f64,
}

impl ScaleMap {
    pub fn identity() -> Self {
        Self {
            c: 1.0,
            s: 1.0,
            n_ratio: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.c, self.s, self.n_ratio].iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "scale factors must be positive: {self:?}"
            )))
        }
    }
}

/// Weight decay that keeps `tau_epoch_target` on a dataset of `n_new`
/// samples: `λ = 1/(η·(N/B)·τ_epoch)`.
pub fn scale_for_dataset(base: &BaseRun, n_new: usize, tau_epoch_target: f64) -> Result<f64> {
    if n_new == 0 || !(tau_epoch_target > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need positive N and tau_epoch (got {n_new}, {tau_epoch_target})"
        )));
    }
    if !n_new.is_multiple_of(base.batch) {
        return Err(Error::BatchDoesNotDivide {
            n: n_new,
            batch: base.batch,
        });
    }
    let iters_per_epoch = (n_new / base.batch) as f64;
    let lambda = 1.0 / (base.eta_base * iters_per_epoch * tau_epoch_target);
    let rate = base.eta_base * lambda;
    if rate >= 1.0 {
        return Err(Error::InfeasibleTauEpoch {
            rate,
            min_tau_epoch: 1.0 / iters_per_epoch,
        });
    }
    Ok(lambda)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthTransfer {
    pub eta: f64,
    pub lambda: f64,
    pub tau_iter: f64,
    /// False when the rule changes the iteration timescale.
    pub preserves_timescale: bool,
}

fn check_width(s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "width factor must be positive, got {s}"
        )))
    }
}

/// μP learning-rate scaling with fixed decay: `η = η_base/s`, `λ = λ_base`,
/// which stretches the timescale to `s·τ_iter,base`.
pub fn scale_for_width_direct(base: &BaseRun, s: f64) -> Result<WidthTransfer> {
    check_width(s)?;
    let eta = base.eta_base / s;
    let lambda = base.lambda_base;
    Ok(WidthTransfer {
        eta,
        lambda,
        tau_iter: s / (base.eta_base * base.lambda_base),
        preserves_timescale: s == 1.0,
    })
}

/// μP learning-rate scaling with decay strengthened in proportion:
/// `η = η_base/s`, `λ = s·λ_base`, leaving `τ_iter` unchanged.
pub fn scale_for_width_timescale_fixed(base: &BaseRun, s: f64) -> Result<WidthTransfer> {
    check_width(s)?;
    Ok(WidthTransfer {
        eta: base.eta_base / s,
        lambda: s * base.lambda_base,
        tau_iter: 1.0 / (base.eta_base * base.lambda_base),
        preserves_timescale: true,
    })
}

/// The setting whose trajectory is the base trajectory divided by `c`:
/// `η′ = η/c`, `λ′ = cλ`, `ε′ = cε`, `σ′ = σ/c`.
pub fn theorem1_map(base: &BaseRun, c: f64) -> Result<BaseRun> {
    check_c(c)?;
    Ok(BaseRun {
        eta_base: base.eta_base / c,
        lambda_base: base.lambda_base * c,
        epsilon_base: base.epsilon_base * c,
        sigma_base: base.sigma_base / c,
        ..*base
    })
}

fn check_c(c: f64) -> Result<()> {
    if c > 0.0 && c.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "equivalence constant must be positive, got {c}"
        )))
    }
}

/// [`theorem1_map`] on optimizer hyperparameters. With learning-rate
/// dependent init, `σ′ = σ/c` follows from `η′` and the unchanged `ρ`.
/// `scale_epsilon = false` keeps ε fixed, which breaks exact equivalence.
pub fn theorem1_map_hyperparams(
    hp: &HyperParams,
    init: &InitSpec,
    c: f64,
    scale_epsilon: bool,
) -> Result<(HyperParams, InitSpec)> {
    check_c(c)?;
    let mapped = HyperParams {
        eta0: hp.eta0 / c,
        lambda: hp.lambda * c,
        epsilon: if scale_epsilon { hp.epsilon * c } else { hp.epsilon },
        ..*hp
    };
    Ok((mapped, *init))
}
