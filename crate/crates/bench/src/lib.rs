//! Benchmark fixtures.

use std::collections::BTreeMap;

use timescale::harness::{ConfigFile, RunConfig, Trainer};
use timescale::Tensor;

/// A classification run on a `[width, width, 10]` scale-invariant MLP.
pub fn mlp_config(width: usize, batch: usize) -> RunConfig {
    ConfigFile::parse(&format!(
        "n_train = {}\nn_test = {batch}\nbatch_size = {batch}\ninput_dim = 20\nclasses = 10\n\
         widths = [{width}, {width}, 10]\nepochs = 1\nrecord_every = 0\n",
        4 * batch
    ))
    .and_then(|f| f.run_config())
    .expect("fixture config is valid")
}

/// Parameters and one minibatch bound for a forward pass.
pub fn bindings(trainer: &Trainer) -> BTreeMap<String, Tensor> {
    let cfg = trainer.config();
    let indices: Vec<usize> = (0..cfg.data.batch).collect();
    let (x, y) = trainer
        .data()
        .train
        .batch(&indices, cfg.data.input_dim, cfg.data.target_width());
    let mut b = trainer.params().clone();
    b.insert("x".into(), x);
    b.insert("y".into(), y);
    b
}
