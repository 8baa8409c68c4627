//! Transfer plans: what a tuned base run becomes under each rule.

use serde::{Deserialize, Serialize};

use super::config::{ConfigFile, InitKind};
use super::sweep::scaled_widths;
use crate::ema::timescale_of;
use crate::error::{Error, Result};
use crate::transfer::{
    scale_for_dataset, scale_for_width_direct, scale_for_width_timescale_fixed, theorem1_map, BaseRun,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub rule: String,
    pub eta: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub sigma: f64,
    pub n_train: usize,
    pub tau_iter: f64,
    pub tau_epoch: f64,
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedConfig {
    pub rule: String,
    pub config: ConfigFile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub base: BaseRun,
    pub rows: Vec<PlanRow>,
    pub configs: Vec<PlannedConfig>,
    pub warnings: Vec<String>,
}

fn row(rule: &str, run: &BaseRun, n: usize, flags: Vec<String>) -> Result<PlanRow> {
    let ts = timescale_of(run.eta_base, run.lambda_base, n, run.batch)?;
    Ok(PlanRow {
        rule: rule.to_string(),
        eta: run.eta_base,
        lambda: run.lambda_base,
        epsilon: run.epsilon_base,
        sigma: run.sigma_base,
        n_train: n,
        tau_iter: ts.tau_iter,
        tau_epoch: ts.tau_epoch,
        flags,
    })
}

/// Apply every transfer the file asks for (`plan_n_train`, `plan_width`,
/// `plan_c`) to the base run it describes.
pub fn plan(file: &ConfigFile) -> Result<Plan> {
    let cfg = file.run_config()?;
    let base = BaseRun {
        eta_base: cfg.hp.eta0,
        lambda_base: cfg.hp.lambda,
        epsilon_base: cfg.hp.epsilon,
        sigma_base: cfg.init.sigma(cfg.hp.eta0),
        n_base: cfg.data.n_train,
        batch: cfg.data.batch,
        fan_in_base: cfg.net.widths[0],
    };
    base.validate()?;
    let mut out = Plan {
        base,
        rows: vec![row("base", &base, base.n_base, Vec::new())?],
        configs: Vec::new(),
        warnings: Vec::new(),
    };
    let flat = ConfigFile::from_run_config(&cfg);

    if let Some(n_new) = file.plan_n_train {
        let base_tau_epoch = out.rows[0].tau_epoch;
        let target = file.plan_tau_epoch.unwrap_or(base_tau_epoch);
        let lambda = scale_for_dataset(&base, n_new, target)?;
        let run = BaseRun {
            lambda_base: lambda,
            n_base: n_new,
            ..base
        };
        out.rows.push(row("dataset", &run, n_new, Vec::new())?);
        out.configs.push(PlannedConfig {
            rule: "dataset".into(),
            config: ConfigFile {
                n_train: Some(n_new),
                lambda: Some(lambda),
                ..flat.clone()
            },
        });
    } else if file.plan_tau_epoch.is_some() {
        return Err(Error::Config("plan_tau_epoch needs plan_n_train".into()));
    }

    if let Some(s) = file.plan_width {
        let widths = scaled_widths(&cfg.net.widths, s);
        for (rule, t) in [
            ("width-direct", scale_for_width_direct(&base, s)?),
            ("width-timescale-fixed", scale_for_width_timescale_fixed(&base, s)?),
        ] {
            let run = BaseRun {
                eta_base: t.eta,
                lambda_base: t.lambda,
                sigma_base: cfg.init.sigma(t.eta),
                fan_in_base: widths[0],
                ..base
            };
            let flags = if t.preserves_timescale {
                Vec::new()
            } else {
                vec!["timescale-breaking".to_string()]
            };
            out.rows.push(row(rule, &run, base.n_base, flags)?);
            out.configs.push(PlannedConfig {
                rule: rule.into(),
                config: ConfigFile {
                    widths: Some(widths.clone()),
                    eta0: Some(t.eta),
                    lambda: Some(t.lambda),
                    ..flat.clone()
                },
            });
        }
    }

    if let Some(c) = file.plan_c {
        let mapped = theorem1_map(&base, c)?;
        let fixed_eps = file.plan_fixed_epsilon.unwrap_or(false);
        let epsilon = if fixed_eps {
            base.epsilon_base
        } else {
            mapped.epsilon_base
        };
        let run = BaseRun {
            epsilon_base: epsilon,
            ..mapped
        };
        let mut flags = Vec::new();
        if fixed_eps && c != 1.0 {
            flags.push("fixed-epsilon".to_string());
            out.warnings.push(format!(
                "epsilon kept at {epsilon:e} instead of {:e}: the mapped run is no longer exactly equivalent",
                mapped.epsilon_base
            ));
        }
        out.rows.push(row("equivalent", &run, base.n_base, flags)?);
        let sigma = match flat.init {
            Some(InitKind::Fixed) => Some(mapped.sigma_base),
            _ => flat.sigma,
        };
        out.configs.push(PlannedConfig {
            rule: "equivalent".into(),
            config: ConfigFile {
                eta0: Some(mapped.eta_base),
                lambda: Some(mapped.lambda_base),
                epsilon: Some(epsilon),
                sigma,
                ..flat.clone()
            },
        });
    }
    Ok(out)
}

impl Plan {
    /// Fixed-width text table of the plan rows.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<22} {:>11} {:>11} {:>11} {:>11} {:>9} {:>12} {:>11}  flags\n",
            "rule", "eta", "lambda", "epsilon", "sigma", "n_train", "tau_iter", "tau_epoch"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<22} {:>11.4e} {:>11.4e} {:>11.4e} {:>11.4e} {:>9} {:>12.6} {:>11.6}  {}\n",
                r.rule,
                r.eta,
                r.lambda,
                r.epsilon,
                r.sigma,
                r.n_train,
                r.tau_iter,
                r.tau_epoch,
                r.flags.join(",")
            ));
        }
        s
    }
}
