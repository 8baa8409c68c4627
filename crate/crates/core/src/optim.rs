//! AdamW in the `torch.optim` parameterization, where the per-step decay
//! factor is the product `η_t·λ`.
//!
//! The same update can be read as an exponential moving average of
//! `q_t = −(1/λ)·m̂_t/(√v̂_t + ε)` with rate `η_t·λ`; [`ema_form_update`]
//! computes it that way so the two routes can be compared.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    CosineToFraction,
    CosineToZero,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub final_fraction: f64,
    pub total_steps: u64,
}

impl ScheduleSpec {
    pub fn constant(total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            final_fraction: 1.0,
            total_steps,
        }
    }

    pub fn cosine_to_fraction(final_fraction: f64, total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::CosineToFraction,
            final_fraction,
            total_steps,
        }
    }

    pub fn cosine_to_zero(total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::CosineToZero,
            final_fraction: 0.0,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps < 1 {
            return Err(Error::InvalidHyperParams(
                "schedule total_steps must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.final_fraction) {
            return Err(Error::InvalidHyperParams(format!(
                "final_fraction {} outside [0, 1]",
                self.final_fraction
            )));
        }
        Ok(())
    }
}

/// Learning rate at schedule position `t`. Positions past the horizon are
/// clamped to the final value.
pub fn schedule_eta(spec: &ScheduleSpec, eta0: f64, t: u64) -> f64 {
    let fraction = match spec.kind {
        ScheduleKind::Constant => return eta0,
        ScheduleKind::CosineToFraction => spec.final_fraction,
        ScheduleKind::CosineToZero => 0.0,
    };
    let t = t.min(spec.total_steps) as f64;
    let progress = t / spec.total_steps as f64;
    eta0 * (fraction + (1.0 - fraction) * 0.5 * (1.0 + (PI * progress).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub eta0: f64,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub schedule: ScheduleSpec,
}

impl HyperParams {
    /// Default betas and ε with the given rate, decay and schedule.
    pub fn new(eta0: f64, lambda: f64, schedule: ScheduleSpec) -> Self {
        Self {
            eta0,
            lambda,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
            schedule,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidHyperParams(msg));
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return bad(format!("eta0 must be positive, got {}", self.eta0));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return bad(format!("{name} must lie in [0, 1), got {beta}"));
            }
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be non-negative, got {}", self.epsilon));
        }
        self.schedule.validate()?;
        // Schedules are nonincreasing, so eta0 bounds every η_t.
        let rate = self.eta0 * self.lambda;
        if rate >= 1.0 {
            return Err(Error::TimescaleTooShort { rate });
        }
        Ok(())
    }

    /// Learning rate used by optimizer step `step` (1-based). Step `t` reads
    /// schedule position `t − 1`, so the first step uses `eta0`.
    pub fn eta_for_step(&self, step: u64) -> f64 {
        schedule_eta(&self.schedule, self.eta0, step.saturating_sub(1))
    }

    /// Initial iteration timescale `1/(η₀λ)`; infinite without decay.
    pub fn tau_iter(&self) -> f64 {
        1.0 / (self.eta0 * self.lambda)
    }
}

/// Weight decay that yields the iteration timescale `tau_iter` at rate `eta0`.
pub fn from_timescale(tau_iter: f64, eta0: f64) -> Result<f64> {
    if !(tau_iter > 0.0 && eta0 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tau_iter and eta0 must be positive (got {tau_iter}, {eta0})"
        )));
    }
    let lambda = 1.0 / (eta0 * tau_iter);
    let rate = eta0 * lambda;
    if tau_iter <= 1.0 || rate >= 1.0 {
        return Err(Error::TimescaleTooShort { rate });
    }
    Ok(lambda)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub m: Tensor,
    pub v: Tensor,
    /// Number of steps taken so far.
    pub t: u64,
}

impl OptState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }

    /// `(m̂_t, v̂_t)` for the current step count.
    pub fn bias_corrected(&self, beta1: f64, beta2: f64) -> (Tensor, Tensor) {
        let t = self.t as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        (self.m.map(|m| m / c1), self.v.map(|v| v / c2))
    }
}

/// One AdamW step on a single parameter, in place.
///
/// `w_t = (1 − η_tλ)·w_{t−1} − η_t·m̂_t/(√v̂_t + ε)`, with decay applied to the
/// pre-update weight.
pub fn adamw_update(name: &str, state: &mut OptState, w: &mut Tensor, g: &Tensor, hp: &HyperParams) -> Result<()> {
    let step = state.t + 1;
    if !g.is_finite() {
        return Err(Error::NonFiniteGradient {
            param: name.to_string(),
            step,
        });
    }
    if w.shape() != g.shape() || w.shape() != state.m.shape() {
        return Err(Error::InvalidArgument(format!(
            "parameter `{name}`: weight {:?}, gradient {:?}, state {:?}",
            w.shape(),
            g.shape(),
            state.m.shape()
        )));
    }
    state.t = step;
    let eta = hp.eta_for_step(step);
    let decay = 1.0 - eta * hp.lambda;
    let c1 = 1.0 - hp.beta1.powi(step as i32);
    let c2 = 1.0 - hp.beta2.powi(step as i32);
    let (b1, b2, eps) = (hp.beta1, hp.beta2, hp.epsilon);

    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((w, g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w = decay * *w - eta * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Functional form of [`adamw_update`].
pub fn adamw_step(
    name: &str,
    state: &OptState,
    w: &Tensor,
    g: &Tensor,
    hp: &HyperParams,
) -> Result<(OptState, Tensor)> {
    let mut state = state.clone();
    let mut w = w.clone();
    adamw_update(name, &mut state, &mut w, g, hp)?;
    Ok((state, w))
}

/// The EMA reading of one AdamW step: rate `1/τ_t = η_tλ` and target
/// `q_t = −(1/λ)·m̂/(√v̂ + ε)`.
#[derive(Clone, Debug)]
pub struct EmaView {
    pub rate: f64,
    pub target: Tensor,
}

impl EmaView {
    pub fn new(m_hat: &Tensor, v_hat: &Tensor, eta: f64, lambda: f64, epsilon: f64) -> Self {
        let target = m_hat
            .data()
            .iter()
            .zip(v_hat.data())
            .map(|(m, v)| -(1.0 / lambda) * m / (v.sqrt() + epsilon))
            .collect();
        Self {
            rate: eta * lambda,
            target: Tensor::new(m_hat.shape().to_vec(), target).expect("shapes agree"),
        }
    }

    pub fn tau(&self) -> f64 {
        1.0 / self.rate
    }
}

/// `ema_t = (1 − 1/τ)·ema_{t−1} + (1/τ)·q_t`.
pub fn ema_form_update(prev: &Tensor, view: &EmaView) -> Tensor {
    let data = prev
        .data()
        .iter()
        .zip(view.target.data())
        .map(|(e, q)| (1.0 - view.rate) * e + view.rate * q)
        .collect();
    Tensor::new(prev.shape().to_vec(), data).expect("shapes agree")
}

/// A set of parameters sharing a decay flag and, optionally, a fixed
/// learning rate and ε that no transfer rule touches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<String>,
    pub apply_decay: bool,
    pub lr_override: Option<f64>,
    pub epsilon_override: Option<f64>,
}

impl ParamGroup {
    /// Hyperparameters this group actually steps with.
    pub fn effective(&self, hp: &HyperParams) -> HyperParams {
        HyperParams {
            eta0: self.lr_override.unwrap_or(hp.eta0),
            lambda: if self.apply_decay { hp.lambda } else { 0.0 },
            epsilon: self.epsilon_override.unwrap_or(hp.epsilon),
            ..*hp
        }
    }
}

/// AdamW over named parameters partitioned into groups.
#[derive(Clone, Debug)]
pub struct AdamW {
    hp: HyperParams,
    groups: Vec<(ParamGroup, HyperParams)>,
    states: BTreeMap<String, OptState>,
}

impl AdamW {
    pub fn new(hp: HyperParams, groups: Vec<ParamGroup>, params: &BTreeMap<String, Tensor>) -> Result<Self> {
        hp.validate()?;
        let mut states = BTreeMap::new();
        let mut resolved = Vec::with_capacity(groups.len());
        for group in groups {
            let eff = group.effective(&hp);
            eff.validate()?;
            for name in &group.params {
                let w = params.get(name).ok_or_else(|| Error::Unbound(name.clone()))?;
                if states.insert(name.clone(), OptState::new(w.shape())).is_some() {
                    return Err(Error::InvalidArgument(format!(
                        "parameter `{name}` appears in more than one group"
                    )));
                }
            }
            resolved.push((group, eff));
        }
        Ok(Self {
            hp,
            groups: resolved,
            states,
        })
    }

    pub fn hyper_params(&self) -> &HyperParams {
        &self.hp
    }

    pub fn state(&self, name: &str) -> Option<&OptState> {
        self.states.get(name)
    }

    pub fn steps_taken(&self) -> u64 {
        self.states.values().map(|s| s.t).max().unwrap_or(0)
    }

    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (group, hp) in &self.groups {
            for name in &group.params {
                let w = params.get_mut(name).ok_or_else(|| Error::Unbound(name.clone()))?;
                let g = grads.get(name).ok_or_else(|| Error::Unbound(name.clone()))?;
                let state = self.states.get_mut(name).expect("state created in new");
                adamw_update(name, state, w, g, hp)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn scalar_hp(eta: f64, lambda: f64, beta1: f64, beta2: f64, epsilon: f64) -> HyperParams {
        HyperParams {
            eta0: eta,
            lambda,
            beta1,
            beta2,
            epsilon,
            schedule: ScheduleSpec::constant(1000),
        }
    }

    #[test]
    fn constant_schedule() {
        let spec = ScheduleSpec::constant(1000);
        assert_eq!(schedule_eta(&spec, 1e-3, 500), 1e-3);
    }

    #[test]
    fn cosine_to_fraction_ends_at_fraction() {
        let spec = ScheduleSpec::cosine_to_fraction(0.1, 1000);
        assert_relative_eq!(schedule_eta(&spec, 1e-3, 1000), 1e-4, max_relative = 1e-12);
        assert_eq!(schedule_eta(&spec, 1e-3, 0), 1e-3);
        // Past the horizon clamps to the final value.
        assert_eq!(schedule_eta(&spec, 1e-3, 5000), schedule_eta(&spec, 1e-3, 1000));
    }

    #[test]
    fn cosine_to_zero_midpoint() {
        let spec = ScheduleSpec::cosine_to_zero(1000);
        assert_relative_eq!(schedule_eta(&spec, 2e-3, 500), 1e-3, max_relative = 1e-12);
        assert!(schedule_eta(&spec, 2e-3, 1000).abs() < 1e-18);
    }

    #[test]
    fn momentum_free_step_is_sign_like() {
        let hp = scalar_hp(0.1, 0.0, 0.0, 0.0, 0.0);
        let (state, w) = adamw_step(
            "w",
            &OptState::new(&[1]),
            &Tensor::from_vec(vec![0.0]),
            &Tensor::from_vec(vec![1.0]),
            &hp,
        )
        .unwrap();
        assert_relative_eq!(w.data()[0], -0.1, max_relative = 1e-15);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let hp = scalar_hp(0.1, 0.0, 0.9, 0.999, 1e-8);
        let w0 = Tensor::from_vec(vec![0.7, -1.3]);
        let (state, w) = adamw_step("w", &OptState::new(&[2]), &w0, &Tensor::zeros(&[2]), &hp).unwrap();
        assert_eq!(w, w0);
        assert_eq!(state.m, Tensor::zeros(&[2]));
        assert_eq!(state.v, Tensor::zeros(&[2]));
    }

    #[test]
    fn five_step_hand_unrolled() {
        // β₁=0.9, β₂=0.999, η=1e-2, λ=1e-1, g=1, w₀=0, ε=1e-8.
        // With g ≡ 1: m_t = 1 − 0.9ᵗ, v_t = 1 − 0.999ᵗ, so m̂ = v̂ = 1 and each
        // step is w_t = 0.999·w_{t−1} − 0.01/(1 + 1e-8).
        let hp = scalar_hp(1e-2, 1e-1, 0.9, 0.999, 1e-8);
        let mut state = OptState::new(&[1]);
        let mut w = Tensor::from_vec(vec![0.0]);
        let g = Tensor::from_vec(vec![1.0]);
        for _ in 0..5 {
            adamw_update("w", &mut state, &mut w, &g, &hp).unwrap();
        }
        let u = 0.01 / (1.0 + 1e-8);
        let mut expect = 0.0;
        for _ in 0..5 {
            expect = 0.999 * expect - u;
        }
        // Closed form: −u·(1 − 0.999⁵)/0.001
        let closed = -u * (1.0 - 0.999f64.powi(5)) / 0.001;
        assert_relative_eq!(w.data()[0], expect, max_relative = 1e-13);
        assert_relative_eq!(w.data()[0], closed, max_relative = 1e-10);
        assert_relative_eq!(state.m.data()[0], 1.0 - 0.9f64.powi(5), max_relative = 1e-13);
        assert_relative_eq!(state.v.data()[0], 1.0 - 0.999f64.powi(5), max_relative = 1e-12);
        assert_eq!(state.t, 5);
    }

    #[test]
    fn first_step_bias_correction_is_exact() {
        let hp = scalar_hp(1e-3, 1e-2, 0.9, 0.999, 1e-8);
        let g = Tensor::from_vec(vec![0.5, -2.0, 3.25]);
        let (state, _) = adamw_step("w", &OptState::new(&[3]), &Tensor::zeros(&[3]), &g, &hp).unwrap();
        let (m_hat, v_hat) = state.bias_corrected(hp.beta1, hp.beta2);
        for ((m, v), g) in m_hat.data().iter().zip(v_hat.data()).zip(g.data()) {
            assert_relative_eq!(*m, *g, max_relative = 1e-15);
            assert_relative_eq!(*v, g * g, max_relative = 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_names_param_and_step() {
        let hp = scalar_hp(1e-3, 0.0, 0.9, 0.999, 1e-8);
        let err = adamw_step(
            "layer0",
            &OptState::new(&[1]),
            &Tensor::zeros(&[1]),
            &Tensor::from_vec(vec![f64::NAN]),
            &hp,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref param, step: 1 } if param == "layer0"));
    }

    #[test]
    fn from_timescale_examples() {
        assert_relative_eq!(from_timescale(1e5, 1e-3).unwrap(), 1e-2, max_relative = 1e-12);
        assert_relative_eq!(from_timescale(1.0 / 0.01, 0.01).unwrap(), 1.0, max_relative = 1e-12);
        let lambda = 2f64.powi(-4);
        let tau = 1.0 / (6e-4 * lambda);
        assert_relative_eq!(tau, 26666.666666666668, max_relative = 1e-12);
        assert_relative_eq!(from_timescale(tau, 6e-4).unwrap(), lambda, max_relative = 1e-12);
        assert!(matches!(
            from_timescale(0.5, 1e-3),
            Err(Error::TimescaleTooShort { .. })
        ));
    }

    #[test]
    fn validate_rejects_rate_at_least_one() {
        let hp = HyperParams::new(1.0, 1.0, ScheduleSpec::constant(10));
        assert!(matches!(hp.validate(), Err(Error::TimescaleTooShort { .. })));
        let hp = HyperParams::new(1e-3, 1.0, ScheduleSpec::constant(10));
        assert!(hp.validate().is_ok());
    }

    #[test]
    fn decay_off_group_matches_zero_lambda_bitwise() {
        let hp = HyperParams::new(1e-2, 0.3, ScheduleSpec::cosine_to_zero(20));
        let no_decay = ParamGroup {
            name: "g".into(),
            params: vec!["w".into()],
            apply_decay: false,
            lr_override: None,
            epsilon_override: None,
        };
        let eff = no_decay.effective(&hp);
        let zero = HyperParams { lambda: 0.0, ..hp };
        let mut s1 = OptState::new(&[3]);
        let mut s2 = OptState::new(&[3]);
        let mut w1 = Tensor::from_vec(vec![0.3, -0.2, 1.1]);
        let mut w2 = w1.clone();
        for k in 0..20 {
            let g = Tensor::from_vec(vec![(k as f64).sin(), 0.5, -(k as f64) * 0.1]);
            adamw_update("w", &mut s1, &mut w1, &g, &eff).unwrap();
            adamw_update("w", &mut s2, &mut w2, &g, &zero).unwrap();
        }
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&w1), bits(&w2));
    }

    proptest! {
        #[test]
        fn cosine_schedules_are_nonincreasing(
            f in 0.0f64..=1.0, total in 1u64..500, a in 0u64..600, b in 0u64..600,
        ) {
            let (lo, hi) = (a.min(b), a.max(b));
            for spec in [ScheduleSpec::cosine_to_fraction(f, total), ScheduleSpec::cosine_to_zero(total)] {
                prop_assert!(schedule_eta(&spec, 1e-3, hi) <= schedule_eta(&spec, 1e-3, lo));
            }
        }

        #[test]
        fn ema_form_matches_adamw_update(
            eta in 1e-5f64..1e-1,
            lambda in 1e-4f64..5.0,
            beta1 in 0.0f64..0.99,
            beta2 in 0.9f64..0.9999,
            epsilon in prop_oneof![Just(0.0), 1e-12f64..1e-3],
            w0 in proptest::collection::vec(-3.0f64..3.0, 4),
            grads in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 4), 1..12),
        ) {
            prop_assume!(eta * lambda < 1.0);
            let hp = HyperParams {
                eta0: eta, lambda, beta1, beta2, epsilon,
                schedule: ScheduleSpec::cosine_to_fraction(0.1, grads.len() as u64),
            };
            let mut state = OptState::new(&[4]);
            let mut w = Tensor::from_vec(w0);
            for g in grads {
                let prev = w.clone();
                adamw_update("w", &mut state, &mut w, &Tensor::from_vec(g), &hp).unwrap();
                let (m_hat, v_hat) = state.bias_corrected(beta1, beta2);
                let view = EmaView::new(&m_hat, &v_hat, hp.eta_for_step(state.t), lambda, epsilon);
                let via_ema = ema_form_update(&prev, &view);
                for (((a, b), p), q) in w.data().iter().zip(via_ema.data()).zip(prev.data()).zip(view.target.data()) {
                    let scale = a.abs().max(b.abs()).max(p.abs()).max((view.rate * q).abs());
                    prop_assert!((a - b).abs() <= 16.0 * f64::EPSILON * scale,
                        "direct {a} vs ema {b}");
                }
            }
        }
    }
}
