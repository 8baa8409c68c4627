//! Scale-invariant MLPs: every linear layer is followed by a normalization,
//! including a global normalization over all logits of the output layer, so
//! `net(x; c·w) = net(x; w)` for every `c > 0`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::optim::{ParamGroup, DEFAULT_EPSILON};
use crate::tensor::Tensor;

/// Fixed learning rate for normalization scale/bias parameters.
pub const DEFAULT_NORM_LR: f64 = 1e-3;
/// `ρ = η/σ` used by learning-rate-dependent initialization.
pub const DEFAULT_RHO: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetMode {
    ScaleInvariant,
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    /// Softmax cross-entropy against one-hot targets.
    Classification,
    /// Mean squared error against standardized targets.
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SINetSpec {
    /// Output width of each linear layer; the last entry is the output size.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub mode: NetMode,
    pub normalize_hidden: bool,
    pub output_global_norm: bool,
    pub norm_affine: bool,
    pub head: Head,
}

impl SINetSpec {
    pub fn scale_invariant(widths: Vec<usize>) -> Self {
        Self {
            widths,
            activation: Activation::Relu,
            mode: NetMode::ScaleInvariant,
            normalize_hidden: true,
            output_global_norm: true,
            norm_affine: false,
            head: Head::Classification,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidNet(format!(
                "layer widths must be non-empty and positive, got {:?}",
                self.widths
            )));
        }
        if self.mode == NetMode::ScaleInvariant {
            if !self.normalize_hidden {
                return Err(Error::InvalidNet(
                    "scale-invariant mode requires a normalization after every hidden linear layer".into(),
                ));
            }
            if !self.output_global_norm {
                return Err(Error::InvalidNet(
                    "scale-invariant mode requested with an un-normalized output layer".into(),
                ));
            }
        }
        if self.head == Head::Regression && *self.widths.last().unwrap() != 1 {
            return Err(Error::InvalidNet("regression head needs output width 1".into()));
        }
        Ok(())
    }

    /// Number of normalization layers the builder inserts.
    pub fn norm_layers(&self) -> usize {
        let hidden = self.widths.len() - 1;
        (if self.normalize_hidden { hidden } else { 0 }) + usize::from(self.output_global_norm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScale {
    /// `σ = η₀/ρ`.
    EtaDependent {
        rho: f64,
    },
    Fixed {
        sigma: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub scale: InitScale,
    pub seed: u64,
}

impl InitSpec {
    pub fn eta_dependent(rho: f64, seed: u64) -> Self {
        Self {
            scale: InitScale::EtaDependent { rho },
            seed,
        }
    }

    pub fn sigma(&self, eta0: f64) -> f64 {
        match self.scale {
            InitScale::EtaDependent { rho } => eta0 / rho,
            InitScale::Fixed { sigma } => sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.scale {
            InitScale::EtaDependent { rho } => rho > 0.0 && rho.is_finite(),
            InitScale::Fixed { sigma } => sigma > 0.0 && sigma.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid init scale {:?}", self.scale)))
        }
    }
}

/// What a parameter is, as recorded by the builder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    /// Linear weight; scale-invariant when followed by a normalization.
    Weight,
    /// Scale or bias of a normalization layer.
    NormAffine,
}

/// A built network for a fixed batch size.
#[derive(Clone, Debug)]
pub struct SiMlp {
    pub graph: Graph,
    pub spec: SINetSpec,
    pub input_dim: usize,
    pub batch: usize,
    pub input: NodeId,
    pub targets: NodeId,
    /// Network output after the (optional) output normalization.
    pub output: NodeId,
    pub loss: NodeId,
    pub shapes: BTreeMap<String, Vec<usize>>,
    pub roles: BTreeMap<String, ParamRole>,
}

pub const INPUT: &str = "x";
pub const TARGETS: &str = "y";

fn weight_name(layer: usize) -> String {
    format!("layer{layer}.weight")
}

struct Builder<'a> {
    g: Graph,
    shapes: &'a mut BTreeMap<String, Vec<usize>>,
    roles: &'a mut BTreeMap<String, ParamRole>,
}

impl Builder<'_> {
    fn param(&mut self, name: String, shape: Vec<usize>, role: ParamRole) -> NodeId {
        let id = self.g.leaf(name.clone());
        self.shapes.insert(name.clone(), shape);
        self.roles.insert(name, role);
        id
    }

    /// Normalize each column of `x` (`[rows, features]`) with batch statistics.
    fn normalize(&mut self, x: NodeId, features: usize, affine: Option<&str>) -> NodeId {
        let mean = self.g.mean(x, Some(0));
        let minus_one = self.g.constant(Tensor::full(&[features], -1.0));
        let neg_mean = self.g.mul(mean, minus_one);
        let centered = self.g.add(x, neg_mean);
        let var = self.g.variance(x, Some(0));
        let inv_std = self.g.rsqrt(var);
        let mut y = self.g.mul(centered, inv_std);
        if let Some(prefix) = affine {
            let gamma = self.param(format!("{prefix}.gamma"), vec![features], ParamRole::NormAffine);
            let beta = self.param(format!("{prefix}.beta"), vec![features], ParamRole::NormAffine);
            y = self.g.mul(y, gamma);
            y = self.g.add(y, beta);
        }
        y
    }
}

/// Build the network graph and loss for minibatches of `batch` rows.
pub fn build_si_mlp(spec: &SINetSpec, input_dim: usize, batch: usize) -> Result<SiMlp> {
    spec.validate()?;
    if input_dim == 0 || batch == 0 {
        return Err(Error::InvalidNet("input dimension and batch must be positive".into()));
    }
    let out_width = *spec.widths.last().unwrap();
    if spec.output_global_norm && batch * out_width < 2 {
        return Err(Error::InvalidNet(
            "output normalization needs at least two logits per batch".into(),
        ));
    }
    if spec.normalize_hidden && batch < 2 && spec.widths.len() > 1 {
        return Err(Error::InvalidNet("batch normalization needs batch >= 2".into()));
    }

    let mut shapes = BTreeMap::new();
    let mut roles = BTreeMap::new();
    let mut b = Builder {
        g: Graph::new(),
        shapes: &mut shapes,
        roles: &mut roles,
    };
    let input = b.g.leaf(INPUT);
    let targets = b.g.leaf(TARGETS);

    let mut h = input;
    let mut fan_in = input_dim;
    let last = spec.widths.len() - 1;
    for (layer, &width) in spec.widths.iter().enumerate() {
        let w = b.param(weight_name(layer), vec![fan_in, width], ParamRole::Weight);
        h = b.g.matmul(h, w);
        if layer < last {
            if spec.normalize_hidden {
                let prefix = format!("layer{layer}.norm");
                h = b.normalize(h, width, spec.norm_affine.then_some(prefix.as_str()));
            }
            h = match spec.activation {
                Activation::Relu => b.g.relu(h),
            };
        }
        fan_in = width;
    }
    if spec.output_global_norm {
        // Flatten [B, C] to [B·C, 1] so one mean/variance covers every logit.
        let flat = b.g.reshape(h, vec![batch * out_width, 1]);
        let normed = b.normalize(flat, 1, spec.norm_affine.then_some("output.norm"));
        h = b.g.reshape(normed, vec![batch, out_width]);
    }
    let output = h;
    let loss = match spec.head {
        Head::Classification => b.g.softmax_cross_entropy(output, targets),
        Head::Regression => {
            let minus_one = b.g.constant(Tensor::full(&[1], -1.0));
            let neg_targets = b.g.mul(targets, minus_one);
            let diff = b.g.add(output, neg_targets);
            let sq = b.g.mul(diff, diff);
            b.g.mean(sq, None)
        }
    };
    let graph = b.g;
    Ok(SiMlp {
        graph,
        spec: spec.clone(),
        input_dim,
        batch,
        input,
        targets,
        output,
        loss,
        shapes,
        roles,
    })
}

impl SiMlp {
    /// Parameters whose scaling leaves the output unchanged.
    pub fn scale_invariant_params(&self) -> Vec<String> {
        let last = weight_name(self.spec.widths.len() - 1);
        self.roles
            .iter()
            .filter(|(name, role)| {
                **role == ParamRole::Weight
                    && (**name != last || self.spec.output_global_norm)
                    && (self.spec.normalize_hidden || **name == last)
            })
            .map(|(name, _)| name.clone())
            .collect()
    }

    /// Same architecture, different batch size.
    pub fn rebatch(&self, batch: usize) -> Result<SiMlp> {
        build_si_mlp(&self.spec, self.input_dim, batch)
    }
}

/// The shared noise `ξ` behind every initialization drawn from `seed`:
/// i.i.d. `N(0, 1/fan_in)` entries per weight, one RNG stream per parameter.
pub fn base_noise(net: &SiMlp, seed: u64) -> BTreeMap<String, Tensor> {
    net.shapes
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| net.roles[*name] == ParamRole::Weight)
        .map(|(stream, (name, shape))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream as u64);
            let scale = 1.0 / (shape[0] as f64).sqrt();
            let numel = shape.iter().product();
            let data = (0..numel)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect();
            (name.clone(), Tensor::new(shape.clone(), data).expect("shape"))
        })
        .collect()
}

/// `w₀ = σ·ξ` for weights with `σ` from `init` (`η₀/ρ` when learning-rate
/// dependent); normalization scales start at 1 and biases at 0.
pub fn eta_dependent_init(net: &SiMlp, init: &InitSpec, eta0: f64) -> Result<BTreeMap<String, Tensor>> {
    init.validate()?;
    if !(eta0 > 0.0) {
        return Err(Error::InvalidArgument(format!("eta0 must be positive, got {eta0}")));
    }
    let sigma = init.sigma(eta0);
    let mut params: BTreeMap<String, Tensor> = base_noise(net, init.seed)
        .into_iter()
        .map(|(name, xi)| (name, xi.scale(sigma)))
        .collect();
    for (name, shape) in &net.shapes {
        if net.roles[name] == ParamRole::NormAffine {
            let value = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
            params.insert(name.clone(), Tensor::full(shape, value));
        }
    }
    Ok(params)
}

/// Standardize all `B·C` logits with one mean and one (population) standard
/// deviation.
pub fn output_global_norm(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 || logits.numel() < 2 {
        return Err(Error::InvalidArgument(format!(
            "output normalization needs a [B, C] tensor with B·C >= 2, got {:?}",
            logits.shape()
        )));
    }
    let n = logits.numel() as f64;
    let mean = logits.data().iter().sum::<f64>() / n;
    let var = logits.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::DegenerateLogits);
    }
    let inv = 1.0 / var.sqrt();
    Ok(logits.map(|x| (x - mean) * inv))
}

/// Split parameters into the decayed main group and the normalization group.
///
/// With `norm_lr = Some(lr)` the normalization group is decoupled: it steps
/// with the fixed rate `lr` and ε `norm_epsilon`, whatever the main
/// hyperparameters are. With `None` it follows the main rate and ε.
pub fn partition_groups(
    params: &BTreeMap<String, Tensor>,
    roles: &BTreeMap<String, ParamRole>,
    norm_lr: Option<f64>,
    norm_epsilon: f64,
) -> Result<Vec<ParamGroup>> {
    let mut main = Vec::new();
    let mut norm = Vec::new();
    for name in params.keys() {
        match roles.get(name) {
            Some(ParamRole::Weight) => main.push(name.clone()),
            Some(ParamRole::NormAffine) => norm.push(name.clone()),
            None => return Err(Error::UnclassifiedParam(name.clone())),
        }
    }
    Ok(vec![
        ParamGroup {
            name: "scale-invariant".into(),
            params: main,
            apply_decay: true,
            lr_override: None,
            epsilon_override: None,
        },
        ParamGroup {
            name: "norm".into(),
            params: norm,
            apply_decay: false,
            lr_override: norm_lr,
            epsilon_override: norm_lr.map(|_| norm_epsilon),
        },
    ])
}

/// [`partition_groups`] with the default decoupled normalization settings.
pub fn default_groups(net: &SiMlp, params: &BTreeMap<String, Tensor>) -> Result<Vec<ParamGroup>> {
    partition_groups(params, &net.roles, Some(DEFAULT_NORM_LR), DEFAULT_EPSILON)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    fn one_hot(rows: usize, classes: usize) -> Tensor {
        let mut y = Tensor::zeros(&[rows, classes]);
        for r in 0..rows {
            y.data_mut()[r * classes + r % classes] = 1.0;
        }
        y
    }

    fn bindings(params: &BTreeMap<String, Tensor>, x: &Tensor, y: &Tensor) -> BTreeMap<String, Tensor> {
        let mut b = params.clone();
        b.insert(INPUT.into(), x.clone());
        b.insert(TARGETS.into(), y.clone());
        b
    }

    fn scaled(params: &BTreeMap<String, Tensor>, names: &[String], c: f64) -> BTreeMap<String, Tensor> {
        let mut out = params.clone();
        for n in names {
            out.insert(n.clone(), params[n].scale(c));
        }
        out
    }

    fn setup(affine: bool) -> (SiMlp, BTreeMap<String, Tensor>, Tensor, Tensor) {
        let mut spec = SINetSpec::scale_invariant(vec![6, 5, 3]);
        spec.norm_affine = affine;
        let net = build_si_mlp(&spec, 4, 8).unwrap();
        let params = eta_dependent_init(&net, &InitSpec::eta_dependent(1e-3, 11), 1e-3).unwrap();
        (net, params, random_batch(8, 4, 5), one_hot(8, 3))
    }

    #[test]
    fn outputs_invariant_to_weight_scale() {
        let (net, params, x, y) = setup(false);
        let si = net.scale_invariant_params();
        assert_eq!(si.len(), 3);
        let base = net.graph.forward(&bindings(&params, &x, &y)).unwrap();
        let scaled_eval = net
            .graph
            .forward(&bindings(&scaled(&params, &si, 7.3), &x, &y))
            .unwrap();
        let diff = base
            .value(net.output)
            .max_abs_diff(scaled_eval.value(net.output))
            .unwrap();
        assert!(diff < 1e-10, "{diff}");
        let same = net
            .graph
            .forward(&bindings(&scaled(&params, &si, 1.0), &x, &y))
            .unwrap();
        assert_eq!(base.value(net.output), same.value(net.output));
    }

    #[test]
    fn gradients_scale_reciprocally() {
        let (net, params, x, y) = setup(false);
        let si = net.scale_invariant_params();
        let a = 3.5;
        let b1 = bindings(&params, &x, &y);
        let e1 = net.graph.forward(&b1).unwrap();
        let g1 = net.graph.backward(&e1, net.loss, &params).unwrap();
        let sp = scaled(&params, &si, a);
        let e2 = net.graph.forward(&bindings(&sp, &x, &y)).unwrap();
        let g2 = net.graph.backward(&e2, net.loss, &sp).unwrap();
        for name in &si {
            let n1 = g1[name].norm();
            let n2 = g2[name].norm();
            assert_relative_eq!(n2, n1 / a, max_relative = 1e-8);
            let rel = g2[name].scale(a).relative_deviation(&g1[name], 1e-300).unwrap();
            assert!(rel < 1e-8, "{name}: {rel}");
        }
    }

    #[test]
    fn global_norm_fixed_point_and_scale_removal() {
        let z = Tensor::matrix(2, 2, vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        assert_eq!(output_global_norm(&z).unwrap(), z);
        let w = Tensor::matrix(2, 3, vec![0.3, 1.2, -0.7, 2.2, 0.0, -1.9]).unwrap();
        let a = output_global_norm(&w).unwrap();
        let b = output_global_norm(&w.scale(10.0)).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-14);
    }

    #[test]
    fn global_norm_hand_example() {
        let z = Tensor::matrix(2, 2, vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let out = output_global_norm(&z).unwrap();
        let s = 5f64.sqrt();
        let expect = [-3.0 / s, -1.0 / s, 1.0 / s, 3.0 / s];
        for (o, e) in out.data().iter().zip(expect) {
            assert_relative_eq!(*o, e, max_relative = 1e-14);
        }
    }

    #[test]
    fn global_norm_rejects_constant_logits() {
        let z = Tensor::full(&[2, 3], 4.0);
        assert!(matches!(output_global_norm(&z), Err(Error::DegenerateLogits)));
    }

    #[test]
    fn graph_output_norm_matches_direct_route() {
        // Single linear layer + output norm: the graph output must equal
        // output_global_norm applied to x·W.
        let spec = SINetSpec::scale_invariant(vec![3]);
        let net = build_si_mlp(&spec, 4, 5).unwrap();
        let params = eta_dependent_init(&net, &InitSpec::eta_dependent(1e-3, 2), 1e-3).unwrap();
        let x = random_batch(5, 4, 9);
        let eval = net.graph.forward(&bindings(&params, &x, &one_hot(5, 3))).unwrap();
        let w = &params["layer0.weight"];
        let mut logits = vec![0.0; 15];
        for r in 0..5 {
            for c in 0..3 {
                logits[r * 3 + c] = (0..4).map(|k| x.data()[r * 4 + k] * w.data()[k * 3 + c]).sum();
            }
        }
        let direct = output_global_norm(&Tensor::matrix(5, 3, logits).unwrap()).unwrap();
        assert!(eval.value(net.output).max_abs_diff(&direct).unwrap() < 1e-12);
    }

    #[test]
    fn si_mode_requires_output_norm() {
        let mut spec = SINetSpec::scale_invariant(vec![4, 2]);
        spec.output_global_norm = false;
        assert!(matches!(build_si_mlp(&spec, 3, 4), Err(Error::InvalidNet(_))));
        spec.mode = NetMode::Standard;
        assert!(build_si_mlp(&spec, 3, 4).is_ok());
    }

    #[test]
    fn partition_without_affine_has_empty_norm_group() {
        let (net, params, _, _) = setup(false);
        let groups = default_groups(&net, &params).unwrap();
        assert!(groups[1].params.is_empty());
        assert_eq!(groups[0].params.len(), 3);
    }

    #[test]
    fn partition_with_affine_counts_scale_and_bias() {
        let spec = SINetSpec {
            norm_affine: true,
            ..SINetSpec::scale_invariant(vec![32, 32, 10])
        };
        let net = build_si_mlp(&spec, 8, 10).unwrap();
        assert_eq!(spec.norm_layers(), 3);
        let params = eta_dependent_init(&net, &InitSpec::eta_dependent(1e-3, 0), 1e-3).unwrap();
        let groups = default_groups(&net, &params).unwrap();
        assert_eq!(groups[1].params.len(), 6);
        assert!(!groups[1].apply_decay);
        assert_eq!(groups[1].lr_override, Some(DEFAULT_NORM_LR));
        let mut all: Vec<_> = groups.iter().flat_map(|g| g.params.clone()).collect();
        all.sort();
        let mut keys: Vec<_> = params.keys().cloned().collect();
        keys.sort();
        assert_eq!(all, keys);
    }

    #[test]
    fn unclassified_parameter_is_named() {
        let (net, mut params, _, _) = setup(false);
        params.insert("stray".into(), Tensor::zeros(&[1]));
        assert!(matches!(
            partition_groups(&params, &net.roles, None, 1e-8),
            Err(Error::UnclassifiedParam(n)) if n == "stray"
        ));
    }

    #[test]
    fn init_scale_follows_eta() {
        assert_eq!(InitSpec::eta_dependent(1e-3, 0).sigma(1e-3), 1.0);
        assert_relative_eq!(InitSpec::eta_dependent(1e-3, 0).sigma(1e-5), 1e-2, max_relative = 1e-12);
        let (net, params, _, _) = setup(false);
        let init = InitSpec::eta_dependent(1e-3, 11);
        let halved = eta_dependent_init(&net, &init, 0.5e-3).unwrap();
        for name in net.scale_invariant_params() {
            for (a, b) in params[&name].data().iter().zip(halved[&name].data()) {
                assert_eq!(*b, a * 0.5);
            }
        }
    }

    #[test]
    fn equal_seeds_give_equal_noise() {
        let (net, _, _, _) = setup(false);
        assert_eq!(base_noise(&net, 4), base_noise(&net, 4));
        assert_ne!(base_noise(&net, 4), base_noise(&net, 5));
    }
}
