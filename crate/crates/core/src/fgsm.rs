//! Signed-gradient input perturbation against the Mahalanobis score.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combiners::BranchPartition;
use crate::embedding::embed;
use crate::error::{Error, Result};
use crate::eval::auroc;
use crate::net::{ActivationTrace, NetworkGraph, Objective, ObjectiveValue};
use crate::scoring::score;
use crate::stats::LayerStatsBundle;
use crate::tensor::Tensor;

pub const MAX_EPSILON: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum FgsmTarget {
    Module(usize),
    /// The deepest module of this branch.
    Branch(usize),
}

impl FgsmTarget {
    pub fn resolve(self, partition: &BranchPartition) -> Result<usize> {
        match self {
            Self::Module(m) => Ok(m),
            Self::Branch(b) => partition.last_module(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FgsmConfig {
    pub epsilon: f64,
    pub target: FgsmTarget,
}

impl FgsmConfig {
    pub fn new(epsilon: f64, target: FgsmTarget) -> Result<Self> {
        check_epsilon(epsilon)?;
        Ok(Self { epsilon, target })
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(0.0..=MAX_EPSILON).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [0, {MAX_EPSILON}]")));
    }
    Ok(())
}

/// Min-class Mahalanobis score at one module, with the argmin class frozen
/// when differentiating.
pub struct MahalanobisObjective<'a> {
    pub bundle: &'a LayerStatsBundle,
}

impl Objective for MahalanobisObjective<'_> {
    fn evaluate(&self, trace: &ActivationTrace) -> Result<ObjectiveValue> {
        let module = self.bundle.module_index;
        let h = trace.get(module).ok_or(Error::MissingModule(module))?;
        let z = embed(h)?;
        let s = score(&z, self.bundle)?;
        let class = &self.bundle.classes[s.argmin];
        let centered = nalgebra::DVector::from_iterator(z.len(), z.iter().zip(class.mean.iter()).map(|(a, b)| a - b));
        let dz = &class.precision * centered * 2.0;
        let spatial = h.len() / z.len();
        let inv = 1.0 / spatial as f64;
        let mut seed = Tensor::zeros(h.shape());
        for (m, chunk) in seed.data_mut().chunks_exact_mut(spatial).enumerate() {
            chunk.fill(dz[m] * inv);
        }
        Ok(ObjectiveValue { value: s.score, seeds: vec![(module, seed)] })
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clamp(x - ε sign(∇x D), 0, 1)` for the score of `bundle`'s module.
pub fn perturb(net: &NetworkGraph, x: &Tensor, bundle: &LayerStatsBundle, epsilon: f64) -> Result<Tensor> {
    check_epsilon(epsilon)?;
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("FGSM input must lie in [0, 1]"));
    }
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let grad = net.input_gradient(x, &MahalanobisObjective { bundle })?;
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| (v - epsilon * sign(g)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub fn perturb_all(net: &NetworkGraph, images: &[Tensor], bundle: &LayerStatsBundle, epsilon: f64) -> Result<Vec<Tensor>> {
    images.par_iter().map(|x| perturb(net, x, bundle, epsilon)).collect()
}

/// Scores at `bundle`'s module after perturbing each image against that same score.
pub fn perturbed_scores(net: &NetworkGraph, images: &[Tensor], bundle: &LayerStatsBundle, epsilon: f64) -> Result<Vec<f64>> {
    images
        .par_iter()
        .map(|x| {
            let xp = perturb(net, x, bundle, epsilon)?;
            let (_, trace) = net.forward(&xp, true)?;
            let h = trace.expect("capture requested");
            let act = h.get(bundle.module_index).ok_or(Error::MissingModule(bundle.module_index))?;
            Ok(score(&embed(act)?, bundle)?.score)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSweep {
    pub best: f64,
    pub best_auroc: f64,
    /// `(epsilon, auroc)` in candidate order.
    pub aurocs: Vec<(f64, f64)>,
}

/// Picks the candidate with the highest validation AUROC; ties go to the smaller ε.
///
/// `scorer(ε)` returns `(id_scores, ood_scores)` on the validation sets.
pub fn sweep_epsilon<F>(candidates: &[f64], scorer: F) -> Result<EpsilonSweep>
where
    F: Fn(f64) -> Result<(Vec<f64>, Vec<f64>)>,
{
    if candidates.is_empty() {
        return Err(Error::Empty("epsilon candidates"));
    }
    if !candidates.contains(&0.0) {
        return Err(Error::invalid("epsilon candidates must include 0"));
    }
    let mut aurocs = Vec::with_capacity(candidates.len());
    for &eps in candidates {
        check_epsilon(eps)?;
        let (id, ood) = scorer(eps)?;
        aurocs.push((eps, auroc(&id, &ood)?));
    }
    let (best, best_auroc) = aurocs
        .iter()
        .copied()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(be, ba), (e, a)| {
            if a > ba || (a == ba && e < be) {
                (e, a)
            } else {
                (be, ba)
            }
        });
    Ok(EpsilonSweep { best, best_auroc, aurocs })
}
