//! Seeded synthetic tasks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Isotropic Gaussian clusters, one per class.
    GaussianMixture,
    /// Regression onto a fixed random ReLU teacher network.
    TeacherStudent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub task: TaskKind,
    pub n_train: usize,
    pub n_test: usize,
    pub batch: usize,
    pub input_dim: usize,
    /// Classes for the mixture; ignored by the regression task.
    pub classes: usize,
    /// Standard deviation of class centers (mixture) per coordinate.
    pub separation: f64,
    /// Within-class noise (mixture) or target noise (regression).
    pub noise: f64,
    /// Probability that a training label is replaced by a uniform draw.
    pub label_noise: f64,
    pub seed: u64,
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 || self.batch == 0 || self.input_dim == 0 {
            return Err(Error::Config(
                "dataset sizes, batch and input_dim must be positive".into(),
            ));
        }
        if !self.n_train.is_multiple_of(self.batch) {
            return Err(Error::BatchDoesNotDivide {
                n: self.n_train,
                batch: self.batch,
            });
        }
        if !self.n_test.is_multiple_of(self.batch) {
            return Err(Error::Config(format!(
                "batch size {} must divide n_test {}",
                self.batch, self.n_test
            )));
        }
        if self.task == TaskKind::GaussianMixture && self.classes < 2 {
            return Err(Error::Config("mixture needs at least two classes".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) || !(self.noise >= 0.0) || !(self.separation >= 0.0) {
            return Err(Error::Config("noise parameters out of range".into()));
        }
        Ok(())
    }

    pub fn iters_per_epoch(&self) -> usize {
        self.n_train / self.batch
    }

    /// Width of the target vectors.
    pub fn target_width(&self) -> usize {
        match self.task {
            TaskKind::GaussianMixture => self.classes,
            TaskKind::TeacherStudent => 1,
        }
    }
}

/// Row-major features with matching targets.
#[derive(Clone, Debug)]
pub struct Split {
    pub x: Vec<f64>,
    /// One-hot rows (mixture) or standardized scalars (regression).
    pub y: Vec<f64>,
    /// Class index per row; empty for regression.
    pub labels: Vec<usize>,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DataSpec,
    pub train: Split,
    pub test: Split,
}

const STREAM_TASK: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const TEACHER_HIDDEN: usize = 32;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

impl Dataset {
    /// Train and test splits come from separate RNG streams, so the test set
    /// does not depend on `n_train`.
    pub fn generate(spec: &DataSpec) -> Result<Self> {
        spec.validate()?;
        let mut task_rng = rng(spec.seed, STREAM_TASK);
        let (train, test) = match spec.task {
            TaskKind::GaussianMixture => {
                let centers: Vec<f64> = (0..spec.classes * spec.input_dim)
                    .map(|_| spec.separation * normal(&mut task_rng))
                    .collect();
                let sample = |n: usize, stream: u64, label_noise: f64| {
                    let mut r = rng(spec.seed, stream);
                    let mut split = Split {
                        x: Vec::with_capacity(n * spec.input_dim),
                        y: vec![0.0; n * spec.classes],
                        labels: Vec::with_capacity(n),
                        len: n,
                    };
                    for i in 0..n {
                        let class = r.gen_range(0..spec.classes);
                        let center = &centers[class * spec.input_dim..(class + 1) * spec.input_dim];
                        split.x.extend(center.iter().map(|c| c + spec.noise * normal(&mut r)));
                        let label = if r.gen::<f64>() < label_noise {
                            r.gen_range(0..spec.classes)
                        } else {
                            class
                        };
                        split.labels.push(label);
                        split.y[i * spec.classes + label] = 1.0;
                    }
                    split
                };
                (
                    sample(spec.n_train, STREAM_TRAIN, spec.label_noise),
                    sample(spec.n_test, STREAM_TEST, 0.0),
                )
            }
            TaskKind::TeacherStudent => {
                let d = spec.input_dim;
                let w1: Vec<f64> = (0..d * TEACHER_HIDDEN)
                    .map(|_| normal(&mut task_rng) / (d as f64).sqrt())
                    .collect();
                let w2: Vec<f64> = (0..TEACHER_HIDDEN)
                    .map(|_| normal(&mut task_rng) / (TEACHER_HIDDEN as f64).sqrt())
                    .collect();
                let teacher = |x: &[f64]| -> f64 {
                    (0..TEACHER_HIDDEN)
                        .map(|h| {
                            let pre: f64 = (0..d).map(|k| x[k] * w1[k * TEACHER_HIDDEN + h]).sum();
                            pre.max(0.0) * w2[h]
                        })
                        .sum()
                };
                let sample = |n: usize, stream: u64| {
                    let mut r = rng(spec.seed, stream);
                    let mut split = Split {
                        x: Vec::with_capacity(n * d),
                        y: Vec::with_capacity(n),
                        labels: Vec::new(),
                        len: n,
                    };
                    for _ in 0..n {
                        let x: Vec<f64> = (0..d).map(|_| normal(&mut r)).collect();
                        split.y.push(teacher(&x) + spec.noise * normal(&mut r));
                        split.x.extend(x);
                    }
                    split
                };
                let mut train = sample(spec.n_train, STREAM_TRAIN);
                let mut test = sample(spec.n_test, STREAM_TEST);
                let n = train.len as f64;
                let mean = train.y.iter().sum::<f64>() / n;
                let std = (train.y.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
                let std = if std > 0.0 { std } else { 1.0 };
                for y in train.y.iter_mut().chain(test.y.iter_mut()) {
                    *y = (*y - mean) / std;
                }
                (train, test)
            }
        };
        Ok(Self {
            spec: spec.clone(),
            train,
            test,
        })
    }
}

impl Split {
    /// Gather rows `indices` into `[rows, dim]` and `[rows, width]` tensors.
    pub fn batch(&self, indices: &[usize], dim: usize, width: usize) -> (Tensor, Tensor) {
        let mut x = Vec::with_capacity(indices.len() * dim);
        let mut y = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            x.extend_from_slice(&self.x[i * dim..(i + 1) * dim]);
            y.extend_from_slice(&self.y[i * width..(i + 1) * width]);
        }
        (
            Tensor::matrix(indices.len(), dim, x).expect("batch shape"),
            Tensor::matrix(indices.len(), width, y).expect("batch shape"),
        )
    }
}

/// Per-epoch minibatch order driven by its own seed.
#[derive(Clone, Debug)]
pub struct Shuffler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl Shuffler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
            batch,
        }
    }

    /// Indices of the next minibatch, reshuffling at each epoch boundary.
    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos += self.batch;
        &self.order[start..self.pos]
    }
}
