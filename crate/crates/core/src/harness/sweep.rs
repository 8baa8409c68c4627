//! Grids of training runs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ConfigFile, Metric, RunConfig, WidthRule};
use super::report::{report, Report};
use super::train::{train_with_axes, GridAxes, RunRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub template: RunConfig,
    /// Base weight decays; the width rule maps them to the actual λ.
    pub lambdas: Vec<f64>,
    /// Empty keeps the template's training set size.
    pub n_train: Vec<usize>,
    /// Hidden-width factors; empty means `[1.0]`.
    pub widths: Vec<f64>,
    pub width_rule: WidthRule,
    pub replicates: u32,
    pub select_on: Metric,
}

impl SweepSpec {
    /// A sweep over the template alone.
    pub fn single(template: RunConfig) -> Self {
        Self {
            lambdas: vec![template.hp.lambda],
            template,
            n_train: Vec::new(),
            widths: Vec::new(),
            width_rule: WidthRule::default(),
            replicates: 1,
            select_on: Metric::default(),
        }
    }

    pub fn from_file(file: &ConfigFile) -> Result<Self> {
        let template = file.run_config()?;
        let mut spec = Self::single(template);
        if let Some(l) = &file.sweep_lambda {
            spec.lambdas = l.clone();
        }
        spec.n_train = file.sweep_n_train.clone().unwrap_or_default();
        spec.widths = file.sweep_width.clone().unwrap_or_default();
        spec.width_rule = file.width_rule.unwrap_or_default();
        spec.replicates = file.replicates.unwrap_or(1);
        spec.select_on = file.select_on.unwrap_or_default();
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub axes: GridAxes,
    pub config: RunConfig,
}

pub(crate) fn scaled_widths(widths: &[usize], s: f64) -> Vec<usize> {
    let last = widths.len() - 1;
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            if i == last {
                w
            } else {
                ((w as f64 * s).round() as usize).max(1)
            }
        })
        .collect()
}

/// Expand the axes into concrete, validated run configurations.
pub fn grid(spec: &SweepSpec) -> Result<Vec<GridPoint>> {
    if spec.lambdas.is_empty() || spec.replicates == 0 {
        return Err(Error::Config(
            "a sweep needs at least one lambda and one replicate".into(),
        ));
    }
    let finite = spec
        .lambdas
        .iter()
        .chain(&spec.widths)
        .all(|v| v.is_finite() && *v > 0.0);
    if !finite {
        return Err(Error::Config("sweep axes must be finite and positive".into()));
    }
    let sizes = if spec.n_train.is_empty() {
        vec![spec.template.data.n_train]
    } else {
        spec.n_train.clone()
    };
    let widths = if spec.widths.is_empty() {
        vec![1.0]
    } else {
        spec.widths.clone()
    };
    let eta_base = spec.template.hp.eta0;
    let mut points = Vec::new();
    for &n in &sizes {
        for &s in &widths {
            for &lambda_base in &spec.lambdas {
                for r in 0..spec.replicates {
                    let mut cfg = spec.template.clone();
                    cfg.data.n_train = n;
                    cfg.net.widths = scaled_widths(&spec.template.net.widths, s);
                    cfg.hp.eta0 = eta_base / s;
                    cfg.hp.lambda = match spec.width_rule {
                        WidthRule::Direct => lambda_base,
                        WidthRule::TimescaleFixed => s * lambda_base,
                    };
                    cfg.init.seed = spec.template.init.seed + u64::from(r);
                    cfg.shuffle_seed = spec.template.shuffle_seed + u64::from(r);
                    cfg.sync_horizon();
                    cfg.validate()?;
                    points.push(GridPoint {
                        axes: GridAxes {
                            n_train: n,
                            width_factor: s,
                            lambda_base,
                            replicate: r,
                        },
                        config: cfg,
                    });
                }
            }
        }
    }
    Ok(points)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub records: Vec<RunRecord>,
    pub report: Report,
}

/// Run every grid point. Points are independent and run on up to `threads`
/// workers; records come back in grid order regardless.
pub fn sweep(spec: &SweepSpec, threads: usize) -> Result<SweepResult> {
    let points = grid(spec)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let records = pool.install(|| {
        points
            .par_iter()
            .map(|p| train_with_axes(&p.config, Some(p.axes.clone())))
            .collect::<Result<Vec<_>>>()
    })?;
    let report = report(&records, spec.select_on)?;
    Ok(SweepResult { records, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::train::train;

    fn template() -> RunConfig {
        ConfigFile::parse("n_train = 100\nn_test = 50\nbatch_size = 25\ninput_dim = 4\nclasses = 3\nwidths = [6, 3]\nepochs = 2\neta0 = 1e-2\n")
            .unwrap()
            .run_config()
            .unwrap()
    }

    #[test]
    fn single_point_matches_train() {
        let spec = SweepSpec::single(template());
        let res = sweep(&spec, 1).unwrap();
        let direct = train(&template()).unwrap();
        assert_eq!(res.records.len(), 1);
        assert_eq!(res.records[0].steps, direct.steps);
        assert_eq!(res.records[0].final_metrics, direct.final_metrics);
    }

    #[test]
    fn grid_applies_width_rules() {
        let mut spec = SweepSpec::single(template());
        spec.lambdas = vec![0.5];
        spec.widths = vec![0.5, 2.0];
        let pts = grid(&spec).unwrap();
        assert_eq!(pts[1].config.net.widths, vec![12, 3]);
        assert_eq!(pts[1].config.hp.eta0, 5e-3);
        assert_eq!(pts[1].config.hp.lambda, 1.0);
        spec.width_rule = WidthRule::Direct;
        assert_eq!(grid(&spec).unwrap()[1].config.hp.lambda, 0.5);
    }

    #[test]
    fn order_and_threads_do_not_matter() {
        let mut spec = SweepSpec::single(template());
        spec.lambdas = vec![0.1, 1.0, 10.0];
        spec.replicates = 2;
        let a = sweep(&spec, 1).unwrap();
        let b = sweep(&spec, 3).unwrap();
        assert_eq!(a, b);
        spec.lambdas.reverse();
        let c = sweep(&spec, 2).unwrap();
        for rec in &a.records {
            let twin = c.records.iter().find(|r| r.run_id == rec.run_id).unwrap();
            assert_eq!(rec, twin);
        }
    }
}
