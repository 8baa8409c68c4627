//! End-to-end check that equivalent hyperparameter settings trace the same
//! weight trajectory up to a constant scale.

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::Dataset;
use super::train::Trainer;
use crate::error::{Error, Result};
use crate::si_net::{InitScale, NetMode, ParamRole};
use crate::tensor::Tensor;
use crate::transfer::theorem1_map_hyperparams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Options {
    pub steps: u64,
    /// Relative tolerance on weights and optimizer moments.
    pub tolerance: f64,
    /// Absolute tolerance on network outputs.
    pub output_tolerance: f64,
    pub scale_epsilon: bool,
    /// Base ε used by [`NegativeControl::FixedEpsilon`]. A fixed ε only
    /// changes the trajectory once it is comparable to `√v`.
    pub control_epsilon: f64,
}

impl Default for Theorem1Options {
    fn default() -> Self {
        Self {
            steps: 200,
            tolerance: 1e-6,
            output_tolerance: 1e-8,
            scale_epsilon: true,
            control_epsilon: 1e-4,
        }
    }
}

/// A setting that deliberately breaks one hypothesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeControl {
    /// Keep ε fixed instead of scaling it by `c`.
    FixedEpsilon,
    /// Use the same init scale in both runs.
    FixedInitScale,
    /// Drop the output normalization.
    NoOutputNorm,
    /// Learnable normalization parameters stepped with the main rate and ε.
    CoupledNormLr,
}

impl NegativeControl {
    pub const ALL: [NegativeControl; 4] = [
        NegativeControl::FixedEpsilon,
        NegativeControl::FixedInitScale,
        NegativeControl::NoOutputNorm,
        NegativeControl::CoupledNormLr,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Case {
    pub c: f64,
    /// Max over steps of `‖c·w′ − w‖/(‖w‖ + 1e-12)` over decayed weights.
    pub weight_deviation: f64,
    /// Same for normalization parameters, which should match unscaled.
    pub norm_param_deviation: f64,
    pub m_deviation: f64,
    pub v_deviation: f64,
    pub output_deviation: f64,
    /// Weight deviation after each step.
    pub weight_trace: Vec<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub options: Theorem1Options,
    pub control: Option<NegativeControl>,
    pub cases: Vec<Theorem1Case>,
    pub pass: bool,
}

/// The preconditions of exact equivalence, checked in order.
pub fn check_hypotheses(config: &RunConfig, opts: &Theorem1Options) -> Result<()> {
    if config.net.mode != NetMode::ScaleInvariant {
        return Err(Error::Hypothesis(
            "the network must be fully scale-invariant (normalized hidden and output layers)".into(),
        ));
    }
    if !matches!(config.init.scale, InitScale::EtaDependent { .. }) {
        return Err(Error::Hypothesis(
            "initialization scale must be learning-rate dependent (sigma = eta0/rho)".into(),
        ));
    }
    if config.net.norm_affine && config.norm_lr.is_none() {
        return Err(Error::Hypothesis(
            "affine normalization parameters must be in a decoupled group with a fixed learning rate".into(),
        ));
    }
    if !opts.scale_epsilon {
        return Err(Error::Hypothesis(
            "epsilon must be scaled with c; a fixed epsilon breaks equivalence".into(),
        ));
    }
    Ok(())
}

/// Run the base setting against its `c`-mapped twin for each `c`.
pub fn verify_theorem1(config: &RunConfig, c_values: &[f64], opts: &Theorem1Options) -> Result<Theorem1Report> {
    check_hypotheses(config, opts)?;
    compare_all(config, c_values, opts, None)
}

/// Violate one hypothesis and run the same comparison.
pub fn run_negative_control(
    config: &RunConfig,
    control: NegativeControl,
    c_values: &[f64],
    opts: &Theorem1Options,
) -> Result<Theorem1Report> {
    let mut cfg = config.clone();
    let mut opts = *opts;
    match control {
        NegativeControl::FixedEpsilon => {
            opts.scale_epsilon = false;
            cfg.hp.epsilon = opts.control_epsilon;
        }
        NegativeControl::FixedInitScale => {
            cfg.init.scale = InitScale::Fixed {
                sigma: cfg.init.sigma(cfg.hp.eta0),
            }
        }
        NegativeControl::NoOutputNorm => {
            cfg.net.mode = NetMode::Standard;
            cfg.net.output_global_norm = false;
        }
        NegativeControl::CoupledNormLr => {
            cfg.net.norm_affine = true;
            cfg.norm_lr = None;
        }
    }
    compare_all(&cfg, c_values, &opts, Some(control))
}

fn compare_all(
    config: &RunConfig,
    c_values: &[f64],
    opts: &Theorem1Options,
    control: Option<NegativeControl>,
) -> Result<Theorem1Report> {
    if c_values.is_empty() {
        return Err(Error::InvalidArgument("no equivalence constants given".into()));
    }
    let data = Dataset::generate(&config.data)?;
    let cases = c_values
        .iter()
        .map(|&c| compare(config, &data, c, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(Theorem1Report {
        options: *opts,
        control,
        pass: cases.iter().all(|c| c.pass),
        cases,
    })
}

fn rel(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let d = a.relative_deviation(b, floor).expect("matching shapes");
    if d.is_nan() {
        0.0
    } else {
        d
    }
}

fn compare(config: &RunConfig, data: &Dataset, c: f64, opts: &Theorem1Options) -> Result<Theorem1Case> {
    let mut mapped_cfg = config.clone();
    let (hp, init) = theorem1_map_hyperparams(&config.hp, &config.init, c, opts.scale_epsilon)?;
    mapped_cfg.hp = hp;
    mapped_cfg.init = init;
    let mut base = Trainer::with_data(config, data.clone())?;
    let mut mapped = Trainer::with_data(&mapped_cfg, data.clone())?;

    let rows: Vec<usize> = (0..config.data.batch).collect();
    let (probe, _) = data
        .test
        .batch(&rows, config.data.input_dim, config.data.target_width());
    let roles = base.net().roles.clone();

    let mut case = Theorem1Case {
        c,
        weight_deviation: 0.0,
        norm_param_deviation: 0.0,
        m_deviation: 0.0,
        v_deviation: 0.0,
        output_deviation: 0.0,
        weight_trace: Vec::with_capacity(opts.steps as usize),
        pass: false,
    };
    let mut diverged = false;
    for _ in 0..opts.steps {
        if base.step().is_err() || mapped.step().is_err() {
            diverged = true;
            break;
        }
        let mut w_dev: f64 = 0.0;
        for (name, w) in base.params() {
            let w2 = &mapped.params()[name];
            let (s1, s2) = (base.optimizer().state(name), mapped.optimizer().state(name));
            let (s1, s2) = (s1.expect("state"), s2.expect("state"));
            match roles[name] {
                ParamRole::Weight => {
                    w_dev = w_dev.max(rel(&w2.scale(c), w, 1e-12));
                    case.m_deviation = case.m_deviation.max(rel(&s2.m, &s1.m.scale(c), 0.0));
                    case.v_deviation = case.v_deviation.max(rel(&s2.v, &s1.v.scale(c * c), 0.0));
                }
                ParamRole::NormAffine => {
                    case.norm_param_deviation = case.norm_param_deviation.max(rel(w2, w, 1e-12));
                }
            }
        }
        case.weight_trace.push(w_dev);
        case.weight_deviation = case.weight_deviation.max(w_dev);
        match (base.outputs(&probe), mapped.outputs(&probe)) {
            (Ok(a), Ok(b)) => {
                let d = a.max_abs_diff(&b).expect("matching shapes");
                case.output_deviation = case.output_deviation.max(d);
            }
            _ => {
                diverged = true;
                break;
            }
        }
    }
    let all_finite = [
        case.weight_deviation,
        case.norm_param_deviation,
        case.m_deviation,
        case.v_deviation,
        case.output_deviation,
    ]
    .iter()
    .all(|d| d.is_finite());
    case.pass = !diverged
        && all_finite
        && case.weight_deviation < opts.tolerance
        && case.norm_param_deviation < opts.tolerance
        && case.m_deviation < opts.tolerance
        && case.v_deviation < opts.tolerance
        && case.output_deviation < opts.output_tolerance;
    Ok(case)
}
