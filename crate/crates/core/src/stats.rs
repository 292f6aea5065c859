//! Class-conditional Gaussian statistics per module.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingSet, ModuleEmbeddings};
use crate::error::{Error, Result};
use crate::net::ModuleTag;
use crate::scoring;

/// Multipliers of `trace(Σ) / M` tried, in order, as the diagonal loading λ.
pub const SHRINKAGE_LADDER: [f64; 7] = [0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

/// Largest tolerated `max |(Σ + λI) P - I|` for an accepted precision matrix.
pub const PRECISION_RESIDUAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsConfig {
    /// Share one pooled within-class covariance across all classes.
    pub tied_covariance: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub class_id: usize,
    pub count: usize,
    pub mean: DVector<f64>,
    /// Biased (1/N) covariance.
    pub covariance: DMatrix<f64>,
    /// Lower Cholesky factor of `covariance + shrinkage * I`.
    pub cholesky: DMatrix<f64>,
    pub precision: DMatrix<f64>,
    pub shrinkage: f64,
}

impl ClassStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Rebuilds stats from a persisted mean and Cholesky factor of `Σ + λI`.
    pub fn from_cholesky(class_id: usize, count: usize, mean: DVector<f64>, cholesky: DMatrix<f64>, shrinkage: f64) -> Result<Self> {
        let m = mean.len();
        if cholesky.nrows() != m || cholesky.ncols() != m {
            return Err(Error::DimensionMismatch { expected: m, actual: cholesky.nrows() });
        }
        let regularized = &cholesky * cholesky.transpose();
        let covariance = &regularized - DMatrix::identity(m, m) * shrinkage;
        let precision = precision_from_cholesky(&cholesky);
        Ok(Self {
            class_id,
            count,
            mean,
            covariance,
            cholesky,
            precision,
            shrinkage,
        })
    }

    /// `max |(Σ + λI) P - I|`.
    pub fn precision_residual(&self) -> f64 {
        let m = self.dim();
        let regularized = &self.covariance + DMatrix::identity(m, m) * self.shrinkage;
        let product = regularized * &self.precision;
        (product - DMatrix::identity(m, m)).amax()
    }
}

/// Statistics of one module: per-class Gaussians plus the mean and population
/// standard deviation of training-set scores used for standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStatsBundle {
    pub module_index: usize,
    pub tag: ModuleTag,
    pub downsamples: bool,
    pub classes: Vec<ClassStats>,
    pub norm_mean: f64,
    pub norm_std: f64,
}

impl LayerStatsBundle {
    pub fn dim(&self) -> usize {
        self.classes.first().map_or(0, ClassStats::dim)
    }

    /// True when training scores are constant at this module, so standardization is undefined.
    pub fn is_degenerate(&self) -> bool {
        self.norm_std == 0.0
    }
}

fn precision_from_cholesky(l: &DMatrix<f64>) -> DMatrix<f64> {
    let m = l.nrows();
    let chol = nalgebra::Cholesky::pack_dirty(l.clone());
    chol.solve(&DMatrix::identity(m, m))
}

/// Tries the shrinkage ladder on `cov` and returns `(λ, L, P)` for the first rung whose
/// Cholesky factorization succeeds and whose precision passes the residual check.
fn regularize(cov: &DMatrix<f64>, class: usize) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    let m = cov.nrows();
    let mut scale = cov.trace() / m as f64;
    if !(scale.is_finite() && scale > 0.0) {
        scale = 1.0;
    }
    let identity = DMatrix::<f64>::identity(m, m);
    for factor in SHRINKAGE_LADDER {
        let lambda = factor * scale;
        let regularized = cov + &identity * lambda;
        let Some(chol) = nalgebra::Cholesky::new(regularized.clone()) else {
            continue;
        };
        let precision = chol.solve(&identity);
        let residual = (&regularized * &precision - &identity).amax();
        if residual.is_finite() && residual < PRECISION_RESIDUAL_TOL {
            return Ok((lambda, chol.l(), precision));
        }
    }
    Err(Error::NotPositiveDefinite { class })
}

/// Fits per-class mean and covariance exactly as `μ = (1/N) Σ z`,
/// `Σ = (1/N) Σ (z - μ)(z - μ)^T`, then regularizes each covariance.
pub fn fit_class_stats(vectors: &[Vec<f64>], labels: &[usize], class_count: usize, config: &StatsConfig) -> Result<Vec<ClassStats>> {
    if vectors.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} embeddings but {} labels",
            vectors.len(),
            labels.len()
        )));
    }
    let dim = vectors.first().ok_or(Error::Empty("embeddings"))?.len();
    if dim == 0 {
        return Err(Error::Empty("embedding vector"));
    }
    let mut sums = vec![DVector::<f64>::zeros(dim); class_count];
    let mut counts = vec![0usize; class_count];
    for (v, &label) in vectors.iter().zip(labels) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: v.len() });
        }
        if label >= class_count {
            return Err(Error::LabelOutOfRange { label, class_count });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        counts[label] += 1;
        for (s, x) in sums[label].iter_mut().zip(v) {
            *s += x;
        }
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::MissingClass(missing));
    }
    let means: Vec<DVector<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s / n as f64)
        .collect();
    let mut scatter = vec![DMatrix::<f64>::zeros(dim, dim); class_count];
    for (v, &label) in vectors.iter().zip(labels) {
        let centered = DVector::from_iterator(dim, v.iter().zip(means[label].iter()).map(|(x, m)| x - m));
        scatter[label].ger(1.0, &centered, &centered, 1.0);
    }
    let covariances: Vec<DMatrix<f64>> = if config.tied_covariance {
        let total: usize = counts.iter().sum();
        let pooled = scatter.iter().fold(DMatrix::zeros(dim, dim), |acc, s| acc + s) / total as f64;
        vec![pooled; class_count]
    } else {
        scatter.into_iter().zip(&counts).map(|(s, &n)| s / n as f64).collect()
    };

    covariances
        .into_iter()
        .zip(means)
        .enumerate()
        .map(|(class_id, (mut covariance, mean))| {
            // symmetrize away rank-one update round-off
            covariance = (&covariance + covariance.transpose()) * 0.5;
            let (shrinkage, cholesky, precision) = regularize(&covariance, class_id)?;
            Ok(ClassStats {
                class_id,
                count: counts[class_id],
                mean,
                covariance,
                cholesky,
                precision,
                shrinkage,
            })
        })
        .collect()
}

/// Population mean and standard deviation.
pub fn population_mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn fit_module(module: &ModuleEmbeddings, labels: &[usize], class_count: usize, config: &StatsConfig) -> Result<LayerStatsBundle> {
    let classes = fit_class_stats(&module.vectors, labels, class_count, config)?;
    let mut bundle = LayerStatsBundle {
        module_index: module.module_index,
        tag: module.tag,
        downsamples: module.downsamples,
        classes,
        norm_mean: 0.0,
        norm_std: 0.0,
    };
    let scores = module
        .vectors
        .iter()
        .map(|z| scoring::score(z, &bundle).map(|s| s.score))
        .collect::<Result<Vec<_>>>()?;
    let (mean, std) = population_mean_std(&scores);
    bundle.norm_mean = mean;
    bundle.norm_std = std;
    if bundle.is_degenerate() {
        log::warn!("module {}: constant training scores, standardized score fixed at 0", module.module_index);
    }
    Ok(bundle)
}

/// Fits statistics at every module of a labelled training embedding set, then
/// scores the training set itself to obtain the standardization stats.
pub fn fit_all_layers(train: &EmbeddingSet, class_count: usize, config: &StatsConfig) -> Result<Vec<LayerStatsBundle>> {
    let labels = train
        .labels
        .as_deref()
        .ok_or_else(|| Error::MissingArtifact("training labels".into()))?;
    train
        .modules
        .par_iter()
        .map(|m| fit_module(m, labels, class_count, config))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_cov(points: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = points.len() as f64;
        let m = points[0].len();
        let mut mean = vec![0.0; m];
        for p in points {
            for j in 0..m {
                mean[j] += p[j] / n;
            }
        }
        let mut cov = vec![vec![0.0; m]; m];
        for a in 0..m {
            for b in 0..m {
                let mut acc = 0.0;
                for p in points {
                    acc += (p[a] - mean[a]) * (p[b] - mean[b]);
                }
                cov[a][b] = acc / n;
            }
        }
        (mean, cov)
    }

    #[test]
    fn two_point_class_is_regularized() {
        let stats = fit_class_stats(&[vec![0.0, 0.0], vec![2.0, 0.0]], &[0, 0], 1, &StatsConfig::default()).unwrap();
        let s = &stats[0];
        assert_eq!(s.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(s.covariance, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        assert!(s.shrinkage > 0.0);
        assert!(s.precision_residual() < PRECISION_RESIDUAL_TOL);
    }

    #[test]
    fn single_point_class_has_scaled_identity_precision() {
        let stats = fit_class_stats(&[vec![3.0, -1.0, 2.0]], &[0], 1, &StatsConfig::default()).unwrap();
        let s = &stats[0];
        assert!(s.covariance.iter().all(|&v| v == 0.0));
        assert!(s.shrinkage > 0.0);
        let expected = DMatrix::<f64>::identity(3, 3) / s.shrinkage;
        assert!((&s.precision - expected).amax() < 1e-6 / s.shrinkage);
    }

    #[test]
    fn covariance_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pts: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let stats = fit_class_stats(&pts, &[0; 5], 1, &StatsConfig::default()).unwrap();
        let (mean, cov) = naive_cov(&pts);
        for a in 0..3 {
            assert!((stats[0].mean[a] - mean[a]).abs() < 1e-12);
            for b in 0..3 {
                assert!((stats[0].covariance[(a, b)] - cov[a][b]).abs() < 1e-10);
            }
        }
        assert!(stats[0].precision_residual() < PRECISION_RESIDUAL_TOL);
    }

    #[test]
    fn centered_vectors_average_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec<f64>> = (0..40).map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let stats = fit_class_stats(&pts, &labels, 2, &StatsConfig::default()).unwrap();
        for c in 0..2 {
            let mut acc = [0.0; 4];
            for (p, _) in pts.iter().zip(&labels).filter(|(_, &l)| l == c) {
                for j in 0..4 {
                    acc[j] += p[j] - stats[c].mean[j];
                }
            }
            assert!(acc.iter().all(|v| (v / 20.0).abs() < 1e-10));
        }
        let again = fit_class_stats(&pts, &labels, 2, &StatsConfig::default()).unwrap();
        assert_eq!(stats, again);
    }

    #[test]
    fn tied_covariance_is_shared() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 0.0], vec![5.0, 5.0], vec![6.0, 7.0], vec![4.0, 5.5]];
        let labels = [0, 0, 1, 1, 1];
        let stats = fit_class_stats(&pts, &labels, 2, &StatsConfig { tied_covariance: true }).unwrap();
        assert_eq!(stats[0].covariance, stats[1].covariance);
        assert_ne!(stats[0].mean, stats[1].mean);
    }

    #[test]
    fn missing_class_and_bad_values_error() {
        let cfg = StatsConfig::default();
        assert!(matches!(fit_class_stats(&[vec![1.0]], &[0], 2, &cfg), Err(Error::MissingClass(1))));
        assert!(matches!(fit_class_stats(&[vec![f64::NAN]], &[0], 1, &cfg), Err(Error::NonFinite(_))));
        assert!(matches!(
            fit_class_stats(&[vec![1.0], vec![1.0, 2.0]], &[0, 0], 1, &cfg),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn population_std_arithmetic() {
        let (m, s) = population_mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(population_mean_std(&[4.0, 4.0, 4.0]), (4.0, 0.0));
    }

    #[test]
    fn fit_all_layers_fills_norm_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let labels: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let varied = ModuleEmbeddings {
            module_index: 0,
            tag: ModuleTag::ReLU,
            downsamples: false,
            vectors: (0..30).map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect(),
        };
        let constant = ModuleEmbeddings {
            module_index: 1,
            tag: ModuleTag::Conv2d,
            downsamples: true,
            vectors: vec![vec![1.0]; 30],
        };
        let set = EmbeddingSet { modules: vec![varied, constant], labels: Some(labels) };
        let bundles = fit_all_layers(&set, 2, &StatsConfig::default()).unwrap();
        assert_eq!(bundles.len(), 2);
        assert!(bundles[0].norm_std > 0.0);
        assert!(bundles[1].is_degenerate());
        assert_eq!(bundles[1].tag, ModuleTag::Conv2d);
    }

    #[test]
    fn cholesky_round_trip_rebuilds_precision() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 0.5], vec![1.0, 3.0], vec![-1.0, 0.0]];
        let s = &fit_class_stats(&pts, &[0; 4], 1, &StatsConfig::default()).unwrap()[0];
        let back = ClassStats::from_cholesky(0, s.count, s.mean.clone(), s.cholesky.clone(), s.shrinkage).unwrap();
        assert!((&back.precision - &s.precision).amax() < 1e-10);
        assert!((&back.covariance - &s.covariance).amax() < 1e-12);
    }
}
