//! A small module-graph network with per-module activation capture and
//! reverse-mode gradients.
//!
//! Every module consumes the output of the previous module (the network input for
//! module 0). `ResidualAdd` additionally reads the output of an earlier module.
//! Activations are laid out `[C, H, W]` for spatial modules and `[F]` after
//! `Flatten`/`Dense`.

mod ops;
pub mod presets;
mod train;

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Batch, Tensor};
use ops::{ConvGeom, PoolGeom};

pub use train::{evaluate_loss, train, TrainConfig, TrainReport};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// One network operation and its shape-determining parameters.
///
/// Input channel / feature counts are inferred from the incoming shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModuleSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm,
    #[serde(rename = "relu")]
    ReLU,
    ResidualAdd {
        source: usize,
    },
    /// Non-overlapping max pooling (stride == window).
    MaxPool {
        window: usize,
    },
    /// Non-overlapping average pooling (stride == window).
    AvgPool {
        window: usize,
    },
    Flatten,
    Dense {
        out_features: usize,
    },
}

/// Parameter-free module kind label, shared with externally produced module tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModuleTag {
    Conv2d,
    BatchNorm,
    ReLU,
    ResidualAdd,
    MaxPool,
    AvgPool,
    Flatten,
    Dense,
    Unknown,
}

impl ModuleTag {
    pub fn code(self) -> i64 {
        match self {
            ModuleTag::Conv2d => 0,
            ModuleTag::BatchNorm => 1,
            ModuleTag::ReLU => 2,
            ModuleTag::ResidualAdd => 3,
            ModuleTag::MaxPool => 4,
            ModuleTag::AvgPool => 5,
            ModuleTag::Flatten => 6,
            ModuleTag::Dense => 7,
            ModuleTag::Unknown => -1,
        }
    }

    pub fn from_code(code: i64) -> Self {
        match code {
            0 => ModuleTag::Conv2d,
            1 => ModuleTag::BatchNorm,
            2 => ModuleTag::ReLU,
            3 => ModuleTag::ResidualAdd,
            4 => ModuleTag::MaxPool,
            5 => ModuleTag::AvgPool,
            6 => ModuleTag::Flatten,
            7 => ModuleTag::Dense,
            _ => ModuleTag::Unknown,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            ModuleTag::Conv2d => "conv",
            ModuleTag::BatchNorm => "bn",
            ModuleTag::ReLU => "relu",
            ModuleTag::ResidualAdd => "add",
            ModuleTag::MaxPool => "maxpool",
            ModuleTag::AvgPool => "avgpool",
            ModuleTag::Flatten => "flatten",
            ModuleTag::Dense => "dense",
            ModuleTag::Unknown => "unknown",
        }
    }
}

impl fmt::Display for ModuleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl ModuleSpec {
    pub fn tag(&self) -> ModuleTag {
        match self {
            ModuleSpec::Conv2d { .. } => ModuleTag::Conv2d,
            ModuleSpec::BatchNorm => ModuleTag::BatchNorm,
            ModuleSpec::ReLU => ModuleTag::ReLU,
            ModuleSpec::ResidualAdd { .. } => ModuleTag::ResidualAdd,
            ModuleSpec::MaxPool { .. } => ModuleTag::MaxPool,
            ModuleSpec::AvgPool { .. } => ModuleTag::AvgPool,
            ModuleSpec::Flatten => ModuleTag::Flatten,
            ModuleSpec::Dense { .. } => ModuleTag::Dense,
        }
    }
}

/// The per-module facts needed downstream of the network: kind, output shape,
/// and whether the module reduces spatial resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleInfo {
    pub tag: ModuleTag,
    pub downsamples: bool,
    pub output_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: ModuleSpec,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub downsamples: bool,
    /// Trainable tensors: conv/dense `[weight, bias]`, batch norm `[gamma, beta]`.
    pub params: Vec<Tensor>,
    /// Batch-norm running `[mean, var]`; empty for other kinds.
    pub buffers: Vec<Tensor>,
}

impl Layer {
    fn conv_geom(&self) -> ConvGeom {
        let ModuleSpec::Conv2d { kernel, stride, padding, .. } = self.spec else {
            unreachable!("conv_geom on non-conv layer")
        };
        ConvGeom {
            in_c: self.input_shape[0],
            in_h: self.input_shape[1],
            in_w: self.input_shape[2],
            out_c: self.output_shape[0],
            out_h: self.output_shape[1],
            out_w: self.output_shape[2],
            kernel,
            stride,
            padding,
        }
    }

    fn pool_geom(&self, window: usize) -> PoolGeom {
        PoolGeom {
            channels: self.input_shape[0],
            in_h: self.input_shape[1],
            in_w: self.input_shape[2],
            out_h: self.output_shape[1],
            out_w: self.output_shape[2],
            window,
        }
    }

    /// Channel count and spatial size of the per-channel groups batch norm normalizes.
    fn bn_layout(&self) -> (usize, usize) {
        if self.input_shape.len() == 3 {
            (self.input_shape[0], self.input_shape[1] * self.input_shape[2])
        } else {
            (self.input_shape[0], 1)
        }
    }
}

/// A feed-forward network over a fixed input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

/// Activations captured after each module for a single input.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActivationTrace {
    pub entries: BTreeMap<usize, Tensor>,
}

impl ActivationTrace {
    pub fn get(&self, module: usize) -> Option<&Tensor> {
        self.entries.get(&module)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses running statistics.
    Inference,
    /// Batch norm normalizes with batch statistics and updates running statistics.
    Training,
}

fn output_shape_for(
    index: usize,
    spec: &ModuleSpec,
    input: &[usize],
    earlier: &[Vec<usize>],
) -> Result<Vec<usize>> {
    let bad = |reason: String| Error::InvalidModule { index, reason };
    let spatial = |what: &str| -> Result<(usize, usize, usize)> {
        if input.len() != 3 {
            return Err(bad(format!("{what} needs a [C, H, W] input, got {input:?}")));
        }
        Ok((input[0], input[1], input[2]))
    };
    match *spec {
        ModuleSpec::Conv2d { out_channels, kernel, stride, padding } => {
            let (_, h, w) = spatial("conv2d")?;
            if out_channels == 0 || kernel == 0 || stride == 0 {
                return Err(bad("conv2d needs positive channels, kernel and stride".into()));
            }
            if h + 2 * padding < kernel || w + 2 * padding < kernel {
                return Err(bad(format!("kernel {kernel} larger than padded input {input:?}")));
            }
            Ok(vec![
                out_channels,
                (h + 2 * padding - kernel) / stride + 1,
                (w + 2 * padding - kernel) / stride + 1,
            ])
        }
        ModuleSpec::BatchNorm => {
            if input.len() != 3 && input.len() != 1 {
                return Err(bad(format!("batch norm needs rank 1 or 3 input, got {input:?}")));
            }
            Ok(input.to_vec())
        }
        ModuleSpec::ReLU => Ok(input.to_vec()),
        ModuleSpec::ResidualAdd { source } => {
            if source >= index {
                return Err(bad(format!("residual source {source} is not an earlier module")));
            }
            if earlier[source] != input {
                return Err(bad(format!(
                    "residual source {source} has shape {:?}, expected {input:?}",
                    earlier[source]
                )));
            }
            Ok(input.to_vec())
        }
        ModuleSpec::MaxPool { window } | ModuleSpec::AvgPool { window } => {
            let (c, h, w) = spatial("pooling")?;
            if window == 0 || window > h || window > w {
                return Err(bad(format!("pool window {window} does not fit {input:?}")));
            }
            Ok(vec![c, h / window, w / window])
        }
        ModuleSpec::Flatten => Ok(vec![input.iter().product()]),
        ModuleSpec::Dense { out_features } => {
            if input.len() != 1 {
                return Err(bad(format!("dense needs a flat input, got {input:?}")));
            }
            if out_features == 0 {
                return Err(bad("dense needs positive out_features".into()));
            }
            Ok(vec![out_features])
        }
    }
}

fn spatial_size(shape: &[usize]) -> Option<usize> {
    (shape.len() == 3).then(|| shape[1] * shape[2])
}

/// Builds a network for `input_shape`, initializing parameters from `seed`.
///
/// Conv and dense weights are drawn from `N(0, 2 / fan_in)`, biases are zero,
/// batch norm starts at gain 1, shift 0, running mean 0 and running variance 1.
pub fn build_network(input_shape: &[usize], spec: &[ModuleSpec], seed: u64) -> Result<NetworkGraph> {
    if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("invalid input shape {input_shape:?}")));
    }
    if spec.is_empty() {
        return Err(Error::Empty("module list"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(spec.len());
    let mut layers = Vec::with_capacity(spec.len());
    let mut current = input_shape.to_vec();
    for (index, module) in spec.iter().enumerate() {
        let out = output_shape_for(index, module, &current, &shapes)?;
        let downsamples = matches!(
            (spatial_size(&current), spatial_size(&out)),
            (Some(a), Some(b)) if b < a
        );
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        match *module {
            ModuleSpec::Conv2d { out_channels, kernel, .. } => {
                let fan_in = current[0] * kernel * kernel;
                let shape = vec![out_channels, current[0], kernel, kernel];
                params.push(kaiming(&mut rng, shape, fan_in));
                params.push(Tensor::zeros(&[out_channels]));
            }
            ModuleSpec::Dense { out_features } => {
                let fan_in = current[0];
                params.push(kaiming(&mut rng, vec![out_features, fan_in], fan_in));
                params.push(Tensor::zeros(&[out_features]));
            }
            ModuleSpec::BatchNorm => {
                let c = current[0];
                params.push(Tensor::filled(&[c], 1.0));
                params.push(Tensor::zeros(&[c]));
                buffers.push(Tensor::zeros(&[c]));
                buffers.push(Tensor::filled(&[c], 1.0));
            }
            _ => {}
        }
        layers.push(Layer {
            spec: module.clone(),
            input_shape: current.clone(),
            output_shape: out.clone(),
            downsamples,
            params,
            buffers,
        });
        shapes.push(out.clone());
        current = out;
    }
    Ok(NetworkGraph {
        input_shape: input_shape.to_vec(),
        layers,
    })
}

fn kaiming(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape product matches")
}

/// Result of evaluating an [`Objective`]: the scalar value and its gradient with
/// respect to one or more module outputs.
#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    pub value: f64,
    pub seeds: Vec<(usize, Tensor)>,
}

/// A scalar function of a captured forward pass.
pub trait Objective {
    fn evaluate(&self, trace: &ActivationTrace) -> Result<ObjectiveValue>;
}

impl<F> Objective for F
where
    F: Fn(&ActivationTrace) -> Result<ObjectiveValue>,
{
    fn evaluate(&self, trace: &ActivationTrace) -> Result<ObjectiveValue> {
        self(trace)
    }
}

/// The single value produced by a module; errors unless that output has exactly one element.
#[derive(Debug, Clone, Copy)]
pub struct ModuleOutput(pub usize);

impl Objective for ModuleOutput {
    fn evaluate(&self, trace: &ActivationTrace) -> Result<ObjectiveValue> {
        let t = trace.get(self.0).ok_or(Error::MissingModule(self.0))?;
        if t.len() != 1 {
            return Err(Error::NonScalarObjective { module: self.0, len: t.len() });
        }
        Ok(ObjectiveValue {
            value: t.data()[0],
            seeds: vec![(self.0, Tensor::filled(t.shape(), 1.0))],
        })
    }
}

/// One component of the final module's output.
#[derive(Debug, Clone, Copy)]
pub struct Logit(pub usize);

impl Objective for Logit {
    fn evaluate(&self, trace: &ActivationTrace) -> Result<ObjectiveValue> {
        let last = *trace.entries.keys().next_back().ok_or(Error::Empty("trace"))?;
        let t = &trace.entries[&last];
        if self.0 >= t.len() {
            return Err(Error::invalid(format!("logit {} out of range {}", self.0, t.len())));
        }
        let mut seed = Tensor::zeros(t.shape());
        seed.data_mut()[self.0] = 1.0;
        Ok(ObjectiveValue {
            value: t.data()[self.0],
            seeds: vec![(last, seed)],
        })
    }
}

/// Per-batch forward state kept for the backward pass.
pub(crate) struct ForwardCache {
    pub outputs: Vec<Batch>,
    /// Batch-norm `(mean, inv_std)` per channel, for layers run in training mode.
    bn_stats: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    mode: Mode,
}

impl NetworkGraph {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Number of values the final module produces.
    pub fn class_count(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_shape.iter().product())
    }

    pub fn module_infos(&self) -> Vec<ModuleInfo> {
        self.layers
            .iter()
            .map(|l| ModuleInfo {
                tag: l.spec.tag(),
                downsamples: l.downsamples,
                output_shape: l.output_shape.clone(),
            })
            .collect()
    }

    pub fn specs(&self) -> Vec<ModuleSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    /// Replaces the trainable tensors of module `index`.
    pub fn set_params(&mut self, index: usize, params: Vec<Tensor>) -> Result<()> {
        let layer = self.layers.get_mut(index).ok_or(Error::MissingModule(index))?;
        check_same_shapes(index, &layer.params, &params)?;
        layer.params = params;
        Ok(())
    }

    pub fn set_buffers(&mut self, index: usize, buffers: Vec<Tensor>) -> Result<()> {
        let layer = self.layers.get_mut(index).ok_or(Error::MissingModule(index))?;
        check_same_shapes(index, &layer.buffers, &buffers)?;
        layer.buffers = buffers;
        Ok(())
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape.clone(),
                actual: x.shape().to_vec(),
            });
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("network input"));
        }
        Ok(())
    }

    /// Runs one input in inference mode. Returns the flattened final output and,
    /// when `capture` is set, the activation after every module.
    pub fn forward(&self, x: &Tensor, capture: bool) -> Result<(Tensor, Option<ActivationTrace>)> {
        self.check_input(x)?;
        let batch = Batch::stack(&[x])?;
        let cache = self.forward_batch(&batch, Mode::Inference, None);
        let last = cache.outputs.last().expect("non-empty network");
        let logits = Tensor::from_vec(last.sample(0).to_vec());
        let trace = capture.then(|| trace_from_cache(&cache, 0));
        Ok((logits, trace))
    }

    /// Gradient of `objective` with respect to the input, with batch norm in inference mode.
    pub fn input_gradient(&self, x: &Tensor, objective: &dyn Objective) -> Result<Tensor> {
        self.input_gradient_with_value(x, objective).map(|(_, g)| g)
    }

    pub fn input_gradient_with_value(&self, x: &Tensor, objective: &dyn Objective) -> Result<(f64, Tensor)> {
        self.check_input(x)?;
        let batch = Batch::stack(&[x])?;
        let cache = self.forward_batch(&batch, Mode::Inference, None);
        let trace = trace_from_cache(&cache, 0);
        let obj = objective.evaluate(&trace)?;
        if !obj.value.is_finite() {
            return Err(Error::NonFinite("objective"));
        }
        let mut seeds = Vec::with_capacity(obj.seeds.len());
        for (module, grad) in obj.seeds {
            let layer = self.layers.get(module).ok_or(Error::MissingModule(module))?;
            if grad.shape() != layer.output_shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    expected: layer.output_shape.clone(),
                    actual: grad.shape().to_vec(),
                });
            }
            seeds.push((module, Batch::stack(&[&grad])?));
        }
        let (grad_x, _) = self.backward(&batch, &cache, seeds, false);
        let grad = Tensor::new(self.input_shape.clone(), grad_x.data)?;
        if !grad.is_finite() {
            return Err(Error::NonFinite("input gradient"));
        }
        Ok((obj.value, grad))
    }

    /// Forward over a batch, keeping every module output.
    ///
    /// In training mode, when `update_running` is given, batch-norm running
    /// statistics are updated in place.
    pub(crate) fn forward_batch(
        &self,
        x: &Batch,
        mode: Mode,
        mut update_running: Option<&mut Vec<(usize, Vec<f64>, Vec<f64>)>>,
    ) -> ForwardCache {
        let n = x.n;
        let mut outputs: Vec<Batch> = Vec::with_capacity(self.layers.len());
        let mut bn_stats = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            let input = if index == 0 { x } else { &outputs[index - 1] };
            let mut out = Batch::zeros(n, &layer.output_shape);
            let mut stats = None;
            match &layer.spec {
                ModuleSpec::Conv2d { .. } => {
                    let g = layer.conv_geom();
                    for s in 0..n {
                        ops::conv_forward(&g, input.sample(s), layer.params[0].data(), layer.params[1].data(), out.sample_mut(s));
                    }
                }
                ModuleSpec::BatchNorm => {
                    let (channels, spatial) = layer.bn_layout();
                    let gamma = layer.params[0].data();
                    let beta = layer.params[1].data();
                    let (mean, inv_std) = match mode {
                        Mode::Inference => {
                            let rm = layer.buffers[0].data().to_vec();
                            let inv: Vec<f64> = layer.buffers[1].data().iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                            (rm, inv)
                        }
                        Mode::Training => {
                            let count = (n * spatial) as f64;
                            let mut mean = vec![0.0; channels];
                            let mut var = vec![0.0; channels];
                            for s in 0..n {
                                let xs = input.sample(s);
                                for c in 0..channels {
                                    mean[c] += xs[c * spatial..(c + 1) * spatial].iter().sum::<f64>();
                                }
                            }
                            mean.iter_mut().for_each(|m| *m /= count);
                            for s in 0..n {
                                let xs = input.sample(s);
                                for c in 0..channels {
                                    var[c] += xs[c * spatial..(c + 1) * spatial]
                                        .iter()
                                        .map(|v| (v - mean[c]).powi(2))
                                        .sum::<f64>();
                                }
                            }
                            var.iter_mut().for_each(|v| *v /= count);
                            if let Some(updates) = update_running.as_mut() {
                                let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                                let rv: Vec<f64> = var.iter().map(|v| v * unbiased).collect();
                                updates.push((index, mean.clone(), rv));
                            }
                            let inv = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                            (mean, inv)
                        }
                    };
                    for s in 0..n {
                        let xs = input.sample(s);
                        let ys = out.sample_mut(s);
                        for c in 0..channels {
                            let scale = gamma[c] * inv_std[c];
                            let shift = beta[c] - mean[c] * scale;
                            for k in c * spatial..(c + 1) * spatial {
                                ys[k] = xs[k] * scale + shift;
                            }
                        }
                    }
                    if mode == Mode::Training {
                        stats = Some((mean, inv_std));
                    }
                }
                ModuleSpec::ReLU => {
                    for (y, &v) in out.data.iter_mut().zip(&input.data) {
                        *y = v.max(0.0);
                    }
                }
                ModuleSpec::ResidualAdd { source } => {
                    let other = &outputs[*source];
                    for ((y, a), b) in out.data.iter_mut().zip(&input.data).zip(&other.data) {
                        *y = a + b;
                    }
                }
                ModuleSpec::MaxPool { window } => {
                    let g = layer.pool_geom(*window);
                    for s in 0..n {
                        ops::max_pool_forward(&g, input.sample(s), out.sample_mut(s));
                    }
                }
                ModuleSpec::AvgPool { window } => {
                    let g = layer.pool_geom(*window);
                    for s in 0..n {
                        ops::avg_pool_forward(&g, input.sample(s), out.sample_mut(s));
                    }
                }
                ModuleSpec::Flatten => out.data.copy_from_slice(&input.data),
                ModuleSpec::Dense { .. } => {
                    for s in 0..n {
                        ops::dense_forward(input.sample(s), layer.params[0].data(), layer.params[1].data(), out.sample_mut(s));
                    }
                }
            }
            bn_stats.push(stats);
            outputs.push(out);
        }
        ForwardCache { outputs, bn_stats, mode }
    }

    /// Reverse pass. `seeds` are gradients of the objective with respect to module
    /// outputs. Returns the input gradient and, if requested, per-module parameter
    /// gradients in the same layout as `Layer::params`.
    pub(crate) fn backward(
        &self,
        x: &Batch,
        cache: &ForwardCache,
        seeds: Vec<(usize, Batch)>,
        want_params: bool,
    ) -> (Batch, Vec<Vec<Tensor>>) {
        let n = x.n;
        let count = self.layers.len();
        let mut grads: Vec<Option<Batch>> = vec![None; count];
        for (module, g) in seeds {
            accumulate(&mut grads[module], g);
        }
        let mut param_grads: Vec<Vec<Tensor>> = if want_params {
            self.layers
                .iter()
                .map(|l| l.params.iter().map(|p| Tensor::zeros(p.shape())).collect())
                .collect()
        } else {
            vec![Vec::new(); count]
        };
        let mut grad_x = Batch::zeros(n, &self.input_shape);

        for index in (0..count).rev() {
            let Some(gout) = grads[index].take() else { continue };
            let layer = &self.layers[index];
            let input = if index == 0 { x } else { &cache.outputs[index - 1] };
            let mut gin = Batch::zeros(n, &layer.input_shape);
            match &layer.spec {
                ModuleSpec::Conv2d { .. } => {
                    let g = layer.conv_geom();
                    let (mut gw, mut gb) = split_two(&mut param_grads[index]);
                    for s in 0..n {
                        let pg = match (gw.as_deref_mut(), gb.as_deref_mut()) {
                            (Some(w), Some(b)) => Some((w.data_mut(), b.data_mut())),
                            _ => None,
                        };
                        ops::conv_backward(&g, input.sample(s), layer.params[0].data(), gout.sample(s), gin.sample_mut(s), pg);
                    }
                }
                ModuleSpec::BatchNorm => {
                    let (channels, spatial) = layer.bn_layout();
                    let gamma = layer.params[0].data();
                    match (&cache.bn_stats[index], cache.mode) {
                        (Some((mean, inv_std)), Mode::Training) => {
                            let m = (n * spatial) as f64;
                            for c in 0..channels {
                                let mut sum_g = 0.0;
                                let mut sum_gx = 0.0;
                                for s in 0..n {
                                    let xs = input.sample(s);
                                    let gs = gout.sample(s);
                                    for k in c * spatial..(c + 1) * spatial {
                                        let xhat = (xs[k] - mean[c]) * inv_std[c];
                                        sum_g += gs[k];
                                        sum_gx += gs[k] * xhat;
                                    }
                                }
                                if want_params {
                                    param_grads[index][0].data_mut()[c] += sum_gx;
                                    param_grads[index][1].data_mut()[c] += sum_g;
                                }
                                let k0 = gamma[c] * inv_std[c] / m;
                                for s in 0..n {
                                    let xs = input.sample(s);
                                    let gs = gout.sample(s).to_vec();
                                    let gi = gin.sample_mut(s);
                                    for k in c * spatial..(c + 1) * spatial {
                                        let xhat = (xs[k] - mean[c]) * inv_std[c];
                                        gi[k] = k0 * (m * gs[k] - sum_g - xhat * sum_gx);
                                    }
                                }
                            }
                        }
                        _ => {
                            let rm = layer.buffers[0].data();
                            let rv = layer.buffers[1].data();
                            for c in 0..channels {
                                let inv = 1.0 / (rv[c] + BN_EPS).sqrt();
                                for s in 0..n {
                                    let xs = input.sample(s);
                                    let gs = gout.sample(s).to_vec();
                                    let gi = gin.sample_mut(s);
                                    for k in c * spatial..(c + 1) * spatial {
                                        gi[k] = gs[k] * gamma[c] * inv;
                                        if want_params {
                                            param_grads[index][0].data_mut()[c] += gs[k] * (xs[k] - rm[c]) * inv;
                                            param_grads[index][1].data_mut()[c] += gs[k];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                ModuleSpec::ReLU => {
                    for ((gi, &go), &v) in gin.data.iter_mut().zip(&gout.data).zip(&input.data) {
                        *gi = if v > 0.0 { go } else { 0.0 };
                    }
                }
                ModuleSpec::ResidualAdd { source } => {
                    gin.data.copy_from_slice(&gout.data);
                    accumulate(&mut grads[*source], gout.clone());
                }
                ModuleSpec::MaxPool { window } => {
                    let g = layer.pool_geom(*window);
                    for s in 0..n {
                        ops::max_pool_backward(&g, input.sample(s), gout.sample(s), gin.sample_mut(s));
                    }
                }
                ModuleSpec::AvgPool { window } => {
                    let g = layer.pool_geom(*window);
                    for s in 0..n {
                        ops::avg_pool_backward(&g, gout.sample(s), gin.sample_mut(s));
                    }
                }
                ModuleSpec::Flatten => gin.data.copy_from_slice(&gout.data),
                ModuleSpec::Dense { .. } => {
                    let (mut gw, mut gb) = split_two(&mut param_grads[index]);
                    for s in 0..n {
                        let pg = match (gw.as_deref_mut(), gb.as_deref_mut()) {
                            (Some(w), Some(b)) => Some((w.data_mut(), b.data_mut())),
                            _ => None,
                        };
                        ops::dense_backward(input.sample(s), layer.params[0].data(), gout.sample(s), gin.sample_mut(s), pg);
                    }
                }
            }
            if index == 0 {
                grad_x = gin;
            } else {
                accumulate(&mut grads[index - 1], gin);
            }
        }
        (grad_x, param_grads)
    }
}

fn check_same_shapes(index: usize, old: &[Tensor], new: &[Tensor]) -> Result<()> {
    if old.len() != new.len() {
        return Err(Error::InvalidModule {
            index,
            reason: format!("expected {} tensors, got {}", old.len(), new.len()),
        });
    }
    for (a, b) in old.iter().zip(new) {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                expected: a.shape().to_vec(),
                actual: b.shape().to_vec(),
            });
        }
    }
    Ok(())
}

fn split_two(v: &mut [Tensor]) -> (Option<&mut Tensor>, Option<&mut Tensor>) {
    match v {
        [a, b, ..] => (Some(a), Some(b)),
        _ => (None, None),
    }
}

fn accumulate(slot: &mut Option<Batch>, g: Batch) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn trace_from_cache(cache: &ForwardCache, sample: usize) -> ActivationTrace {
    let entries = cache
        .outputs
        .iter()
        .enumerate()
        .map(|(i, b)| (i, b.sample_tensor(sample)))
        .collect();
    ActivationTrace { entries }
}
