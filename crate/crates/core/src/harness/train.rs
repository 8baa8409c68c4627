//! Single training runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::data::{Dataset, Shuffler, Split};
use crate::ema::{mean_abs_weight, timescale_of, Timescale};
use crate::error::{Error, Result};
use crate::optim::{AdamW, ParamGroup};
use crate::si_net::{build_si_mlp, eta_dependent_init, partition_groups, Head, SiMlp, INPUT, TARGETS};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u64,
    pub eta: f64,
    pub loss: f64,
}

/// Mean `|W|` of the decayed weights after step `t` (0 is initialization).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeSnapshot {
    pub t: u64,
    pub per_layer: BTreeMap<String, f64>,
    pub global: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub train_loss: f64,
    pub test_loss: f64,
    /// Classification only.
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub init_seed: u64,
    pub data_seed: u64,
    pub shuffle_seed: u64,
}

/// Position of a run inside a sweep grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAxes {
    pub n_train: usize,
    pub width_factor: f64,
    pub lambda_base: f64,
    pub replicate: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: RunConfig,
    pub axes: Option<GridAxes>,
    /// Absent without weight decay.
    pub timescale: Option<Timescale>,
    pub steps: Vec<StepRecord>,
    pub magnitudes: Vec<MagnitudeSnapshot>,
    pub final_metrics: Option<FinalMetrics>,
    pub diverged: bool,
    pub divergence: Option<String>,
    pub provenance: Provenance,
}

/// Stable identifier derived from the full configuration.
pub fn run_id(config: &RunConfig, axes: Option<&GridAxes>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    if let Some(axes) = axes {
        h.update(serde_json::to_vec(axes).expect("axes serialize"));
    }
    hex::encode(&h.finalize()[..8])
}

/// Loss and accuracy over a split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitMetrics {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// A network, its parameters, optimizer and data stream, stepped one
/// minibatch at a time.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: RunConfig,
    net: SiMlp,
    data: Dataset,
    params: BTreeMap<String, Tensor>,
    groups: Vec<ParamGroup>,
    opt: AdamW,
    shuffler: Shuffler,
    step: u64,
}

fn is_divergence(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::NonFiniteWeight { .. }
    )
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let data = Dataset::generate(&config.data)?;
        Self::with_data(config, data)
    }

    /// Reuse an already generated dataset; it must match `config.data`.
    pub fn with_data(config: &RunConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        if data.spec != config.data {
            return Err(Error::InvalidArgument("dataset does not match the config".into()));
        }
        let net = build_si_mlp(&config.net, config.data.input_dim, config.data.batch)?;
        let params = eta_dependent_init(&net, &config.init, config.hp.eta0)?;
        let groups = partition_groups(&params, &net.roles, config.norm_lr, config.norm_epsilon)?;
        let opt = AdamW::new(config.hp, groups.clone(), &params)?;
        let shuffler = Shuffler::new(config.data.n_train, config.data.batch, config.shuffle_seed);
        Ok(Self {
            config: config.clone(),
            net,
            data,
            params,
            groups,
            opt,
            shuffler,
            step: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn net(&self) -> &SiMlp {
        &self.net
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn bindings(&self, x: Tensor, y: Tensor) -> BTreeMap<String, Tensor> {
        let mut b = self.params.clone();
        b.insert(INPUT.to_string(), x);
        b.insert(TARGETS.to_string(), y);
        b
    }

    /// One optimizer step on the next minibatch.
    pub fn step(&mut self) -> Result<StepRecord> {
        let dim = self.config.data.input_dim;
        let width = self.config.data.target_width();
        let (x, y) = self.data.train.batch(self.shuffler.next_batch(), dim, width);
        let bindings = self.bindings(x, y);
        let eval = self.net.graph.forward(&bindings)?;
        let loss = eval.value(self.net.loss).item().expect("scalar loss");
        let grads = self.net.graph.backward(&eval, self.net.loss, &self.params)?;
        let t = self.step + 1;
        self.opt.step(&mut self.params, &grads)?;
        self.step = t;
        if let Some((name, _)) = self.params.iter().find(|(_, w)| !w.is_finite()) {
            return Err(Error::NonFiniteWeight {
                param: name.clone(),
                step: t,
            });
        }
        Ok(StepRecord {
            t,
            eta: self.config.hp.eta_for_step(t),
            loss,
        })
    }

    /// Network output on `x`, whose row count must equal the batch size.
    pub fn outputs(&self, x: &Tensor) -> Result<Tensor> {
        let rows = x.shape()[0];
        let y = Tensor::zeros(&[rows, self.config.data.target_width()]);
        let eval = self.net.graph.forward(&self.bindings(x.clone(), y))?;
        Ok(eval.value(self.net.output).clone())
    }

    /// Loss and accuracy over `split` in natural order, one batch at a time.
    pub fn evaluate(&self, split: &Split) -> Result<SplitMetrics> {
        let dim = self.config.data.input_dim;
        let width = self.config.data.target_width();
        let batch = self.config.data.batch;
        let (mut loss, mut correct) = (0.0, 0usize);
        let chunks = split.len / batch;
        for c in 0..chunks {
            let idx: Vec<usize> = (c * batch..(c + 1) * batch).collect();
            let (x, y) = split.batch(&idx, dim, width);
            let eval = self.net.graph.forward(&self.bindings(x, y))?;
            loss += eval.value(self.net.loss).item().expect("scalar loss");
            if self.config.net.head == Head::Classification {
                let out = eval.value(self.net.output).data();
                for (row, &i) in idx.iter().enumerate() {
                    let logits = &out[row * width..(row + 1) * width];
                    let pred = (0..width)
                        .max_by(|&a, &b| logits[a].total_cmp(&logits[b]))
                        .expect("non-empty row");
                    correct += usize::from(pred == split.labels[i]);
                }
            }
        }
        Ok(SplitMetrics {
            loss: loss / chunks as f64,
            accuracy: (self.config.net.head == Head::Classification).then(|| correct as f64 / split.len as f64),
        })
    }

    pub fn magnitude(&self) -> Result<MagnitudeSnapshot> {
        let m = mean_abs_weight(&self.params, &self.groups, true)?;
        Ok(MagnitudeSnapshot {
            t: self.step,
            per_layer: m.per_layer,
            global: m.global,
        })
    }
}

/// Train for `config.epochs` epochs. Divergence ends the run early and is
/// recorded rather than returned as an error.
pub fn train(config: &RunConfig) -> Result<RunRecord> {
    train_with_axes(config, None)
}

pub fn train_with_axes(config: &RunConfig, axes: Option<GridAxes>) -> Result<RunRecord> {
    let mut trainer = Trainer::new(config)?;
    let mut record = RunRecord {
        run_id: run_id(config, axes.as_ref()),
        config: config.clone(),
        axes,
        timescale: (config.hp.lambda > 0.0)
            .then(|| timescale_of(config.hp.eta0, config.hp.lambda, config.data.n_train, config.data.batch))
            .transpose()?,
        steps: Vec::with_capacity(config.total_steps() as usize),
        magnitudes: vec![trainer.magnitude()?],
        final_metrics: None,
        diverged: false,
        divergence: None,
        provenance: Provenance {
            version: env!("CARGO_PKG_VERSION").to_string(),
            init_seed: config.init.seed,
            data_seed: config.data.seed,
            shuffle_seed: config.shuffle_seed,
        },
    };
    let total = config.total_steps();
    for _ in 0..total {
        match trainer.step() {
            Ok(s) if s.loss.is_finite() => record.steps.push(s),
            Ok(s) => return Ok(diverge(record, format!("non-finite loss at step {}", s.t))),
            Err(e) if is_divergence(&e) => return Ok(diverge(record, e.to_string())),
            Err(e) => return Err(e),
        }
        let t = trainer.steps_taken();
        if (config.record_every > 0 && t % config.record_every == 0) || t == total {
            record.magnitudes.push(trainer.magnitude()?);
        }
    }
    if total == 0 {
        return Ok(record);
    }
    let metrics = trainer
        .evaluate(&trainer.data().train)
        .and_then(|tr| Ok((tr, trainer.evaluate(&trainer.data().test)?)));
    match metrics {
        Ok((tr, te)) if tr.loss.is_finite() && te.loss.is_finite() => {
            record.final_metrics = Some(FinalMetrics {
                train_loss: tr.loss,
                test_loss: te.loss,
                train_accuracy: tr.accuracy,
                test_accuracy: te.accuracy,
            });
            Ok(record)
        }
        Ok(_) => Ok(diverge(record, "non-finite evaluation loss".into())),
        Err(e) if is_divergence(&e) => Ok(diverge(record, e.to_string())),
        Err(e) => Err(e),
    }
}

fn diverge(mut record: RunRecord, why: String) -> RunRecord {
    record.diverged = true;
    record.divergence = Some(why);
    record
}
