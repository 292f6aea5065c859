use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Mode, NetworkGraph, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::{Batch, Tensor};

/// Mini-batch SGD with momentum on softmax cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Inference-mode training loss before the first step.
    pub initial_loss: f64,
    /// Inference-mode training loss after the last step.
    pub final_loss: f64,
    pub final_accuracy: f64,
    /// Mean training-mode minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn softmax_ce(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = -(exps[label] / sum).ln();
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

fn validate(net: &NetworkGraph, data: &[(Tensor, usize)]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let classes = net.class_count();
    if classes < 2 || net.layers().last().map(|l| l.output_shape.len()) != Some(1) {
        return Err(Error::invalid("training needs a final module producing a logit vector of length >= 2"));
    }
    for (x, label) in data {
        if *label >= classes {
            return Err(Error::LabelOutOfRange { label: *label, class_count: classes });
        }
        if x.shape() != net.input_shape() {
            return Err(Error::ShapeMismatch {
                expected: net.input_shape().to_vec(),
                actual: x.shape().to_vec(),
            });
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("training input"));
        }
    }
    Ok(())
}

/// Mean cross-entropy and accuracy over `data` in inference mode.
pub fn evaluate_loss(net: &NetworkGraph, data: &[(Tensor, usize)]) -> Result<(f64, f64)> {
    validate(net, data)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (x, label) in data {
        let (logits, _) = net.forward(x, false)?;
        let (l, _) = softmax_ce(logits.data(), *label);
        loss += l;
        let pred = argmax(logits.data());
        if pred == *label {
            correct += 1;
        }
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains `net` in place. Sample order per epoch is shuffled from `config.seed`, so
/// the result is a function of the network, the data and the config.
pub fn train(net: &mut NetworkGraph, data: &[(Tensor, usize)], config: &TrainConfig) -> Result<TrainReport> {
    validate(net, data)?;
    if config.batch_size == 0 || !config.learning_rate.is_finite() || config.learning_rate < 0.0 {
        return Err(Error::invalid("batch_size must be positive and learning_rate finite and >= 0"));
    }
    let (initial_loss, _) = evaluate_loss(net, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity: Vec<Vec<Tensor>> = net
        .layers()
        .iter()
        .map(|l| l.params.iter().map(|p| Tensor::zeros(p.shape())).collect())
        .collect();
    let classes = net.class_count();
    let last = net.len() - 1;
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let samples: Vec<&Tensor> = chunk.iter().map(|&i| &data[i].0).collect();
            let batch = Batch::stack(&samples)?;
            let mut running_updates = Vec::new();
            let cache = net.forward_batch(&batch, Mode::Training, Some(&mut running_updates));

            let logits = &cache.outputs[last];
            let mut seed = Batch::zeros(chunk.len(), &[classes]);
            let scale = 1.0 / chunk.len() as f64;
            for (s, &i) in chunk.iter().enumerate() {
                let (loss, grad) = softmax_ce(logits.sample(s), data[i].1);
                epoch_loss += loss;
                for (g, v) in seed.sample_mut(s).iter_mut().zip(grad) {
                    *g = v * scale;
                }
            }
            let (_, grads) = net.backward(&batch, &cache, vec![(last, seed)], true);

            for (index, mean, var) in running_updates {
                let layer = &mut net.layers_mut()[index];
                for (r, m) in layer.buffers[0].data_mut().iter_mut().zip(&mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                for (r, v) in layer.buffers[1].data_mut().iter_mut().zip(&var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
            for ((layer, layer_grads), layer_vel) in net.layers_mut().iter_mut().zip(&grads).zip(&mut velocity) {
                for ((param, grad), vel) in layer.params.iter_mut().zip(layer_grads).zip(layer_vel) {
                    for ((p, g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(vel.data_mut()) {
                        let step = g + config.weight_decay * *p;
                        *v = config.momentum * *v + step;
                        *p -= config.learning_rate * *v;
                    }
                }
            }
        }
        epoch_losses.push(epoch_loss / data.len() as f64);
    }
    let (final_loss, final_accuracy) = evaluate_loss(net, data)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    Ok(TrainReport {
        initial_loss,
        final_loss,
        final_accuracy,
        epoch_losses,
    })
}
