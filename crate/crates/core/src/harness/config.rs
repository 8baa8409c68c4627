//! Run configuration and its flat TOML file form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::{DataSpec, TaskKind};
use crate::error::{Error, Result};
use crate::optim::{
    from_timescale, HyperParams, ScheduleKind, ScheduleSpec, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON,
};
use crate::si_net::{Activation, Head, InitScale, InitSpec, NetMode, SINetSpec, DEFAULT_NORM_LR, DEFAULT_RHO};

/// Everything a single training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub net: SINetSpec,
    pub init: InitSpec,
    pub hp: HyperParams,
    pub data: DataSpec,
    /// `Some(lr)` steps normalization parameters with a fixed rate and
    /// `norm_epsilon`; `None` couples them to the main rate and ε.
    pub norm_lr: Option<f64>,
    pub norm_epsilon: f64,
    pub shuffle_seed: u64,
    pub epochs: u64,
    /// Magnitude snapshot interval in steps; 0 records only start and end.
    pub record_every: u64,
}

impl RunConfig {
    pub fn total_steps(&self) -> u64 {
        self.epochs * self.data.iters_per_epoch() as u64
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.net.validate()?;
        self.init.validate()?;
        self.hp.validate()?;
        let out = *self.net.widths.last().expect("validated non-empty");
        if out != self.data.target_width() {
            return Err(Error::Config(format!(
                "output width {out} does not match the task's target width {}",
                self.data.target_width()
            )));
        }
        let head_ok = matches!(
            (self.net.head, self.data.task),
            (Head::Classification, TaskKind::GaussianMixture) | (Head::Regression, TaskKind::TeacherStudent)
        );
        if !head_ok {
            return Err(Error::Config("network head does not match the task".into()));
        }
        if self.epochs > 0 && self.hp.schedule.total_steps != self.total_steps() {
            return Err(Error::Config(format!(
                "schedule horizon {} differs from epochs·N/B = {}",
                self.hp.schedule.total_steps,
                self.total_steps()
            )));
        }
        if let Some(lr) = self.norm_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("norm_lr must be positive, got {lr}")));
            }
        }
        if !(self.norm_epsilon >= 0.0 && self.norm_epsilon.is_finite()) {
            return Err(Error::Config("norm_epsilon must be non-negative".into()));
        }
        Ok(())
    }

    /// Keep the schedule horizon in step with `epochs` and `n_train`.
    pub fn sync_horizon(&mut self) {
        self.hp.schedule.total_steps = self.total_steps().max(1);
    }

    /// Override the init and shuffle seeds; the dataset stays fixed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init.seed = seed;
        self.shuffle_seed = seed;
        self
    }
}

/// Which metric sweeps minimize.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    #[default]
    TestLoss,
    TrainLoss,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WidthRule {
    /// `η = η_base/s`, `λ = λ_base`.
    Direct,
    /// `η = η_base/s`, `λ = s·λ_base`.
    #[default]
    TimescaleFixed,
}

/// Flat on-disk configuration. Every field is optional and falls back to the
/// defaults below; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    // data
    pub task: Option<TaskKind>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub batch_size: Option<usize>,
    pub input_dim: Option<usize>,
    pub classes: Option<usize>,
    pub separation: Option<f64>,
    pub noise: Option<f64>,
    pub label_noise: Option<f64>,
    pub data_seed: Option<u64>,
    pub shuffle_seed: Option<u64>,
    // network
    pub widths: Option<Vec<usize>>,
    pub mode: Option<NetMode>,
    pub normalize_hidden: Option<bool>,
    pub output_norm: Option<bool>,
    pub norm_affine: Option<bool>,
    pub norm_lr: Option<f64>,
    pub norm_lr_coupled: Option<bool>,
    pub norm_epsilon: Option<f64>,
    // init
    pub init: Option<InitKind>,
    pub rho: Option<f64>,
    pub sigma: Option<f64>,
    pub init_seed: Option<u64>,
    // optimizer
    pub eta0: Option<f64>,
    pub lambda: Option<f64>,
    pub tau_iter: Option<f64>,
    pub tau_epoch: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub schedule: Option<ScheduleKind>,
    pub final_fraction: Option<f64>,
    // run
    pub epochs: Option<u64>,
    pub record_every: Option<u64>,
    // sweep axes
    pub sweep_lambda: Option<Vec<f64>>,
    pub sweep_n_train: Option<Vec<usize>>,
    pub sweep_width: Option<Vec<f64>>,
    pub width_rule: Option<WidthRule>,
    pub replicates: Option<u32>,
    pub select_on: Option<Metric>,
    // planning
    pub plan_n_train: Option<usize>,
    pub plan_tau_epoch: Option<f64>,
    pub plan_width: Option<f64>,
    pub plan_c: Option<f64>,
    pub plan_fixed_epsilon: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    EtaDependent,
    Fixed,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Resolve defaults and build a validated run configuration.
    pub fn run_config(&self) -> Result<RunConfig> {
        let task = self.task.unwrap_or(TaskKind::GaussianMixture);
        let classes = self.classes.unwrap_or(10);
        let data = DataSpec {
            task,
            n_train: self.n_train.unwrap_or(2000),
            n_test: self.n_test.unwrap_or(1000),
            batch: self.batch_size.unwrap_or(100),
            input_dim: self.input_dim.unwrap_or(20),
            classes,
            separation: self.separation.unwrap_or(1.0),
            noise: self.noise.unwrap_or(1.0),
            label_noise: self.label_noise.unwrap_or(0.0),
            seed: self.data_seed.unwrap_or(0),
        };
        let head = match task {
            TaskKind::GaussianMixture => Head::Classification,
            TaskKind::TeacherStudent => Head::Regression,
        };
        let default_widths = vec![32, 32, data.target_width()];
        let net = SINetSpec {
            widths: self.widths.clone().unwrap_or(default_widths),
            activation: Activation::Relu,
            mode: self.mode.unwrap_or(NetMode::ScaleInvariant),
            normalize_hidden: self.normalize_hidden.unwrap_or(true),
            output_global_norm: self.output_norm.unwrap_or(true),
            norm_affine: self.norm_affine.unwrap_or(false),
            head,
        };
        let init = InitSpec {
            scale: match self.init.unwrap_or(InitKind::EtaDependent) {
                InitKind::EtaDependent => InitScale::EtaDependent {
                    rho: self.rho.unwrap_or(DEFAULT_RHO),
                },
                InitKind::Fixed => InitScale::Fixed {
                    sigma: self.sigma.unwrap_or(1.0),
                },
            },
            seed: self.init_seed.unwrap_or(0),
        };
        let epochs = self.epochs.unwrap_or(10);
        data.validate()?;
        let total = (epochs * data.iters_per_epoch() as u64).max(1);
        let schedule = match self.schedule.unwrap_or(ScheduleKind::Constant) {
            ScheduleKind::Constant => ScheduleSpec::constant(total),
            ScheduleKind::CosineToZero => ScheduleSpec::cosine_to_zero(total),
            ScheduleKind::CosineToFraction => {
                ScheduleSpec::cosine_to_fraction(self.final_fraction.unwrap_or(0.1), total)
            }
        };
        let eta0 = self.eta0.unwrap_or(1e-3);
        let lambda = self.resolve_lambda(eta0, &data)?;
        let hp = HyperParams {
            eta0,
            lambda,
            beta1: self.beta1.unwrap_or(DEFAULT_BETA1),
            beta2: self.beta2.unwrap_or(DEFAULT_BETA2),
            epsilon: self.epsilon.unwrap_or(DEFAULT_EPSILON),
            schedule,
        };
        let norm_lr = if self.norm_lr_coupled.unwrap_or(false) {
            None
        } else {
            Some(self.norm_lr.unwrap_or(DEFAULT_NORM_LR))
        };
        let cfg = RunConfig {
            net,
            init,
            hp,
            data,
            norm_lr,
            norm_epsilon: self.norm_epsilon.unwrap_or(DEFAULT_EPSILON),
            shuffle_seed: self.shuffle_seed.unwrap_or(0),
            epochs,
            record_every: self.record_every.unwrap_or(100),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_lambda(&self, eta0: f64, data: &DataSpec) -> Result<f64> {
        let given = [self.lambda.is_some(), self.tau_iter.is_some(), self.tau_epoch.is_some()];
        if given.iter().filter(|g| **g).count() > 1 {
            return Err(Error::Config("set at most one of lambda, tau_iter, tau_epoch".into()));
        }
        if let Some(tau) = self.tau_iter {
            return from_timescale(tau, eta0);
        }
        if let Some(tau) = self.tau_epoch {
            return from_timescale(tau * data.iters_per_epoch() as f64, eta0);
        }
        Ok(self.lambda.unwrap_or(0.1))
    }

    /// Flat form of a run configuration; `run_config` inverts it.
    pub fn from_run_config(cfg: &RunConfig) -> Self {
        let (init, rho, sigma) = match cfg.init.scale {
            InitScale::EtaDependent { rho } => (InitKind::EtaDependent, Some(rho), None),
            InitScale::Fixed { sigma } => (InitKind::Fixed, None, Some(sigma)),
        };
        let d = &cfg.data;
        Self {
            task: Some(d.task),
            n_train: Some(d.n_train),
            n_test: Some(d.n_test),
            batch_size: Some(d.batch),
            input_dim: Some(d.input_dim),
            classes: Some(d.classes),
            separation: Some(d.separation),
            noise: Some(d.noise),
            label_noise: Some(d.label_noise),
            data_seed: Some(d.seed),
            shuffle_seed: Some(cfg.shuffle_seed),
            widths: Some(cfg.net.widths.clone()),
            mode: Some(cfg.net.mode),
            normalize_hidden: Some(cfg.net.normalize_hidden),
            output_norm: Some(cfg.net.output_global_norm),
            norm_affine: Some(cfg.net.norm_affine),
            norm_lr: cfg.norm_lr,
            norm_lr_coupled: Some(cfg.norm_lr.is_none()),
            norm_epsilon: Some(cfg.norm_epsilon),
            init: Some(init),
            rho,
            sigma,
            init_seed: Some(cfg.init.seed),
            eta0: Some(cfg.hp.eta0),
            lambda: Some(cfg.hp.lambda),
            beta1: Some(cfg.hp.beta1),
            beta2: Some(cfg.hp.beta2),
            epsilon: Some(cfg.hp.epsilon),
            schedule: Some(cfg.hp.schedule.kind),
            final_fraction: Some(cfg.hp.schedule.final_fraction),
            epochs: Some(cfg.epochs),
            record_every: Some(cfg.record_every),
            ..Self::default()
        }
    }
}
