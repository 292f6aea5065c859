//! Spatial-mean embeddings of module activations.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::net::{ActivationTrace, ModuleTag, NetworkGraph};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub module_index: usize,
    pub vector: Vec<f64>,
}

/// Reduces an activation to its embedding vector.
///
/// `[M, D1, D2]` activations become the per-map mean over all `D1 * D2`
/// positions; flat `[M]` activations are returned unchanged.
pub fn embed(activation: &Tensor) -> Result<Vec<f64>> {
    let shape = activation.shape();
    let out = match shape.len() {
        1 => activation.data().to_vec(),
        3 => embed_maps(activation.data(), shape[0], shape[1] * shape[2]),
        rank => {
            return Err(Error::invalid(format!(
                "cannot embed rank-{rank} activation {shape:?}; expected [M, D, D] or [M]"
            )))
        }
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding"));
    }
    Ok(out)
}

pub(crate) fn embed_maps(data: &[f64], maps: usize, spatial: usize) -> Vec<f64> {
    let inv = 1.0 / spatial as f64;
    data.chunks_exact(spatial)
        .take(maps)
        .map(|m| m.iter().sum::<f64>() * inv)
        .collect()
}

/// Embeds every module of a complete trace for a `module_count`-module network.
pub fn embed_trace(trace: &ActivationTrace, module_count: usize) -> Result<BTreeMap<usize, Embedding>> {
    (0..module_count)
        .map(|module_index| {
            let activation = trace.get(module_index).ok_or(Error::MissingModule(module_index))?;
            Ok((
                module_index,
                Embedding {
                    module_index,
                    vector: embed(activation)?,
                },
            ))
        })
        .collect()
}

/// Embeddings of many samples at one module, row `i` belonging to sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleEmbeddings {
    pub module_index: usize,
    pub tag: ModuleTag,
    pub downsamples: bool,
    pub vectors: Vec<Vec<f64>>,
}

/// Per-module embeddings for a set of samples, optionally labelled.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub modules: Vec<ModuleEmbeddings>,
    pub labels: Option<Vec<usize>>,
}

impl EmbeddingSet {
    pub fn sample_count(&self) -> usize {
        self.modules.first().map_or(0, |m| m.vectors.len())
    }

    pub fn module(&self, module_index: usize) -> Option<&ModuleEmbeddings> {
        self.modules.iter().find(|m| m.module_index == module_index)
    }
}

/// Runs every image through `net` and embeds the activation after each module.
pub fn extract_embeddings(net: &NetworkGraph, images: &[Tensor], labels: Option<Vec<usize>>) -> Result<EmbeddingSet> {
    let per_sample: Vec<Vec<Vec<f64>>> = images
        .par_iter()
        .map(|x| {
            let (_, trace) = net.forward(x, true)?;
            let trace = trace.expect("capture requested");
            Ok(embed_trace(&trace, net.len())?.into_values().map(|e| e.vector).collect())
        })
        .collect::<Result<_>>()?;
    let modules = net
        .module_infos()
        .into_iter()
        .enumerate()
        .map(|(module_index, info)| ModuleEmbeddings {
            module_index,
            tag: info.tag,
            downsamples: info.downsamples,
            vectors: per_sample.iter().map(|s| s[module_index].clone()).collect(),
        })
        .collect();
    Ok(EmbeddingSet { modules, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_network, ModuleSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_map_mean() {
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(embed(&t).unwrap(), vec![2.5]);
    }

    #[test]
    fn constant_maps() {
        let mut data = vec![3.0; 4];
        data.extend([5.0; 4]);
        let t = Tensor::new(vec![2, 2, 2], data).unwrap();
        assert_eq!(embed(&t).unwrap(), vec![3.0, 5.0]);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..36).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t = Tensor::new(vec![4, 3, 3], data.clone()).unwrap();
        let got = embed(&t).unwrap();
        for m in 0..4 {
            let mut acc = 0.0;
            for y in 0..3 {
                for x in 0..3 {
                    acc += data[m * 9 + y * 3 + x];
                }
            }
            assert!((got[m] - acc / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_square_maps_average_over_all_positions() {
        let t = Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(embed(&t).unwrap(), vec![3.5]);
    }

    #[test]
    fn vectors_are_identity_and_other_ranks_fail() {
        let v = Tensor::from_vec(vec![1.0, -2.0]);
        assert_eq!(embed(&v).unwrap(), vec![1.0, -2.0]);
        assert!(embed(&Tensor::zeros(&[2, 2])).is_err());
        assert!(embed(&Tensor::zeros(&[1, 2, 2, 2])).is_err());
    }

    #[test]
    fn trace_embeddings_per_module() {
        let spec = [
            ModuleSpec::Conv2d { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
            ModuleSpec::BatchNorm,
            ModuleSpec::ReLU,
        ];
        let net = build_network(&[1, 4, 4], &spec, 9).unwrap();
        let x = Tensor::new(vec![1, 4, 4], (0..16).map(|i| (i as f64 - 8.0) / 4.0).collect()).unwrap();
        let trace = net.forward(&x, true).unwrap().1.unwrap();
        let embs = embed_trace(&trace, 3).unwrap();
        assert_eq!(embs.keys().copied().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(embs[&2].vector.iter().all(|&v| v >= 0.0));
        for (i, e) in &embs {
            assert_eq!(e.vector, embed(trace.get(*i).unwrap()).unwrap());
        }
        let mut partial = trace.clone();
        partial.entries.remove(&1);
        assert!(matches!(embed_trace(&partial, 3), Err(Error::MissingModule(1))));
    }

    proptest! {
        #[test]
        fn embedding_is_linear(
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            h1 in prop::collection::vec(-5.0f64..5.0, 18),
            h2 in prop::collection::vec(-5.0f64..5.0, 18),
        ) {
            let t1 = Tensor::new(vec![2, 3, 3], h1.clone()).unwrap();
            let t2 = Tensor::new(vec![2, 3, 3], h2.clone()).unwrap();
            let mix: Vec<f64> = h1.iter().zip(&h2).map(|(x, y)| a * x + b * y).collect();
            let lhs = embed(&Tensor::new(vec![2, 3, 3], mix).unwrap()).unwrap();
            let e1 = embed(&t1).unwrap();
            let e2 = embed(&t2).unwrap();
            for m in 0..2 {
                prop_assert!((lhs[m] - (a * e1[m] + b * e2[m])).abs() < 1e-12);
            }
        }

        #[test]
        fn spatial_permutation_invariance(
            h in prop::collection::vec(-5.0f64..5.0, 8),
            rot in 0usize..4,
        ) {
            let t = Tensor::new(vec![2, 2, 2], h.clone()).unwrap();
            let mut permuted = h.clone();
            permuted[0..4].rotate_left(rot);
            permuted[4..8].rotate_right(rot);
            let p = Tensor::new(vec![2, 2, 2], permuted).unwrap();
            let (e, f) = (embed(&t).unwrap(), embed(&p).unwrap());
            for m in 0..2 {
                prop_assert!((e[m] - f[m]).abs() < 1e-12);
            }
        }
    }
}
