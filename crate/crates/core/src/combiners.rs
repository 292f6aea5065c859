//! Weighted and multi-branch combinations of per-module scores.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ModuleTag, NetworkGraph};
use crate::scoring::{ModuleMeta, ScoreTable};
use crate::stats::{population_mean_std, LayerStatsBundle};

/// Per-module scores of one sample, keyed by module index.
pub type ModuleScores = BTreeMap<usize, f64>;

impl ScoreTable {
    pub fn row_map(&self, sample: usize) -> ModuleScores {
        self.modules.iter().map(|m| m.module_index).zip(self.scores[sample].iter().copied()).collect()
    }
}

/// Contiguous runs of modules separated by downsampling modules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchPartition {
    pub branches: Vec<Vec<usize>>,
}

impl BranchPartition {
    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    /// Deepest module of branch `b`.
    pub fn last_module(&self, b: usize) -> Result<usize> {
        self.branches
            .get(b)
            .and_then(|m| m.last().copied())
            .ok_or(Error::EmptyBranch(b))
    }
}

/// Splits modules (in forward order) so that each downsampling module opens a new branch.
pub fn partition_modules(modules: &[ModuleMeta]) -> BranchPartition {
    let mut branches: Vec<Vec<usize>> = Vec::new();
    for m in modules {
        if m.downsamples || branches.is_empty() {
            branches.push(Vec::new());
        }
        branches.last_mut().expect("pushed above").push(m.module_index);
    }
    if branches.len() == 1 {
        log::warn!("no downsampling modules; using a single branch");
    }
    BranchPartition { branches }
}

pub fn partition_branches(net: &NetworkGraph) -> BranchPartition {
    let meta: Vec<ModuleMeta> = net
        .module_infos()
        .into_iter()
        .enumerate()
        .map(|(module_index, info)| ModuleMeta { module_index, tag: info.tag, downsamples: info.downsamples })
        .collect();
    partition_modules(&meta)
}

/// `(score - mean) / std`, or 0 for a module with constant training scores.
pub fn standardize(score: f64, mean: f64, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        (score - mean) / std
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormTerm {
    pub module_index: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchScore {
    pub branch: usize,
    pub value: f64,
}

/// Multi-branch detector: one sum of standardized module scores per branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchDetector {
    pub relu_only: bool,
    pub branches: Vec<Vec<NormTerm>>,
}

impl BranchDetector {
    pub fn new(partition: &BranchPartition, bundles: &[LayerStatsBundle], relu_only: bool) -> Result<Self> {
        let by_index: BTreeMap<usize, &LayerStatsBundle> = bundles.iter().map(|b| (b.module_index, b)).collect();
        let branches = partition
            .branches
            .iter()
            .enumerate()
            .map(|(b, modules)| {
                let mut terms = Vec::new();
                for &idx in modules {
                    let bundle = by_index.get(&idx).ok_or(Error::MissingModule(idx))?;
                    if relu_only && bundle.tag != ModuleTag::ReLU {
                        continue;
                    }
                    terms.push(NormTerm { module_index: idx, mean: bundle.norm_mean, std: bundle.norm_std });
                }
                if terms.is_empty() {
                    return Err(Error::EmptyBranch(b));
                }
                Ok(terms)
            })
            .collect::<Result<_>>()?;
        Ok(Self { relu_only, branches })
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn score(&self, scores: &ModuleScores) -> Result<Vec<BranchScore>> {
        self.branches
            .iter()
            .enumerate()
            .map(|(branch, terms)| {
                let mut value = 0.0;
                for t in terms {
                    let s = scores.get(&t.module_index).ok_or(Error::MissingModule(t.module_index))?;
                    value += standardize(*s, t.mean, t.std);
                }
                Ok(BranchScore { branch, value })
            })
            .collect()
    }

    /// Branch scores for every sample: `out[sample][branch]`.
    pub fn score_table(&self, table: &ScoreTable) -> Result<Vec<Vec<f64>>> {
        (0..table.sample_count())
            .map(|i| Ok(self.score(&table.row_map(i))?.into_iter().map(|b| b.value).collect()))
            .collect()
    }

    /// Scores of branch `b` for every sample.
    pub fn branch_column(&self, table: &ScoreTable, b: usize) -> Result<Vec<f64>> {
        Ok(self.score_table(table)?.into_iter().map(|row| row[b]).collect())
    }
}

pub fn branch_score(
    scores: &ModuleScores,
    bundles: &[LayerStatsBundle],
    partition: &BranchPartition,
    relu_only: bool,
) -> Result<Vec<BranchScore>> {
    BranchDetector::new(partition, bundles, relu_only)?.score(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedCombo {
    pub layers: Vec<usize>,
    pub alpha: Vec<f64>,
    pub include_lhl: bool,
    pub lhl_module: usize,
}

impl WeightedCombo {
    pub fn new(layers: Vec<usize>, alpha: Vec<f64>, include_lhl: bool, lhl_module: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("combination layer set"));
        }
        if layers.len() != alpha.len() {
            return Err(Error::DimensionMismatch { expected: layers.len(), actual: alpha.len() });
        }
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("combination coefficient"));
        }
        Ok(Self { layers, alpha, include_lhl, lhl_module })
    }

    pub fn equal(layers: Vec<usize>, include_lhl: bool, lhl_module: usize) -> Result<Self> {
        let alpha = vec![1.0; layers.len()];
        Self::new(layers, alpha, include_lhl, lhl_module)
    }

    fn retained(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.layers
            .iter()
            .copied()
            .zip(self.alpha.iter().copied())
            .filter(|&(l, _)| self.include_lhl || l != self.lhl_module)
    }

    pub fn combine_table(&self, table: &ScoreTable) -> Result<Vec<f64>> {
        (0..table.sample_count()).map(|i| combine_weighted(&table.row_map(i), self)).collect()
    }
}

/// `Σ α_ℓ D_ℓ` over the combo's layers, skipping the last hidden layer unless included.
pub fn combine_weighted(scores: &ModuleScores, combo: &WeightedCombo) -> Result<f64> {
    combo.retained().try_fold(0.0, |acc, (l, a)| {
        let s = scores.get(&l).ok_or(Error::MissingModule(l))?;
        Ok(acc + a * s)
    })
}

/// L2-regularized logistic regression with an unpenalized intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Objective value after each accepted iteration, starting at the initial point.
    pub losses: Vec<f64>,
}

fn log1p_exp(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn logistic_loss(x: &DMatrix<f64>, y: &[bool], w: &DVector<f64>, b: f64, strength: f64) -> f64 {
    let margins = x * w;
    let data: f64 = margins
        .iter()
        .zip(y)
        .map(|(&m, &pos)| log1p_exp(if pos { -(m + b) } else { m + b }))
        .sum();
    data + 0.5 * strength * w.norm_squared()
}

/// Minimizes `Σ log(1 + exp(-y (x·w + b))) + strength/2 |w|^2` by damped Newton steps.
pub fn fit_logistic(x: &DMatrix<f64>, y: &[bool], strength: f64) -> Result<LogisticFit> {
    let (n, p) = x.shape();
    if n != y.len() {
        return Err(Error::DimensionMismatch { expected: n, actual: y.len() });
    }
    if !y.iter().any(|&v| v) || y.iter().all(|&v| v) {
        return Err(Error::invalid("logistic regression needs both ID and OOD samples"));
    }
    let mut w = DVector::<f64>::zeros(p);
    let mut b = 0.0;
    let mut loss = logistic_loss(x, y, &w, b, strength);
    let mut losses = vec![loss];
    for _ in 0..100 {
        let margins = x * &w;
        let mut grad = DVector::<f64>::zeros(p + 1);
        let mut hess = DMatrix::<f64>::zeros(p + 1, p + 1);
        for i in 0..n {
            let prob = sigmoid(margins[i] + b);
            let r = prob - if y[i] { 1.0 } else { 0.0 };
            let curv = prob * (1.0 - prob);
            let row = x.row(i);
            for a in 0..p {
                grad[a] += r * row[a];
                for c in 0..p {
                    hess[(a, c)] += curv * row[a] * row[c];
                }
                hess[(a, p)] += curv * row[a];
            }
            grad[p] += r;
            hess[(p, p)] += curv;
        }
        for a in 0..p {
            grad[a] += strength * w[a];
            hess[(a, a)] += strength;
            hess[(p, a)] = hess[(a, p)];
        }
        hess[(p, p)] += 1e-12;
        if grad.amax() < 1e-10 {
            break;
        }
        let step = hess
            .cholesky()
            .map(|c| c.solve(&grad))
            .unwrap_or_else(|| grad.clone());
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let w_new = &w - step.rows(0, p) * t;
            let b_new = b - step[p] * t;
            let candidate = logistic_loss(x, y, &w_new, b_new, strength);
            if candidate <= loss - 1e-4 * t * slope {
                w = w_new;
                b = b_new;
                loss = candidate;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        losses.push(loss);
        if losses[losses.len() - 2] - loss < 1e-14 * loss.abs().max(1.0) {
            break;
        }
    }
    if !(loss.is_finite() && w.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("logistic regression"));
    }
    Ok(LogisticFit { weights: w.iter().copied().collect(), intercept: b, losses })
}

pub const ALPHA_REGULARIZATION: f64 = 1.0;

/// Fits coefficients over `layers` that separate ID (label 0) from OOD (label 1).
///
/// Features are standardized with the pooled population mean and std before
/// fitting; the returned coefficients are rescaled back to raw scores and the
/// intercept is dropped. Constant features get coefficient 0.
pub fn fit_alpha(
    id_scores: &ScoreTable,
    ood_scores: &ScoreTable,
    layers: &[usize],
    include_lhl: bool,
    lhl_module: usize,
) -> Result<(WeightedCombo, LogisticFit)> {
    if id_scores.sample_count() == 0 || ood_scores.sample_count() == 0 {
        return Err(Error::Empty("ID or OOD score set"));
    }
    if layers.is_empty() {
        return Err(Error::Empty("combination layer set"));
    }
    let columns: Vec<Vec<f64>> = layers
        .iter()
        .map(|&l| {
            let mut col = id_scores.module_column(l)?;
            col.extend(ood_scores.module_column(l)?);
            Ok(col)
        })
        .collect::<Result<_>>()?;
    let n = columns[0].len();
    let norms: Vec<(f64, f64)> = columns.iter().map(|c| population_mean_std(c)).collect();
    let x = DMatrix::from_fn(n, layers.len(), |i, j| standardize(columns[j][i], norms[j].0, norms[j].1));
    let y: Vec<bool> = (0..n).map(|i| i >= id_scores.sample_count()).collect();
    let fit = fit_logistic(&x, &y, ALPHA_REGULARIZATION)?;
    let alpha = fit
        .weights
        .iter()
        .zip(&norms)
        .map(|(w, &(_, std))| if std == 0.0 { 0.0 } else { w / std })
        .collect();
    Ok((WeightedCombo::new(layers.to_vec(), alpha, include_lhl, lhl_module)?, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::auroc;
    use crate::net::presets::Preset;
    use crate::stats::ClassStats;
    use proptest::prelude::*;

    fn meta(flags: &[(ModuleTag, bool)]) -> Vec<ModuleMeta> {
        flags
            .iter()
            .enumerate()
            .map(|(module_index, &(tag, downsamples))| ModuleMeta { module_index, tag, downsamples })
            .collect()
    }

    fn bundle(module_index: usize, tag: ModuleTag, mean: f64, std: f64) -> LayerStatsBundle {
        LayerStatsBundle {
            module_index,
            tag,
            downsamples: false,
            classes: Vec::<ClassStats>::new(),
            norm_mean: mean,
            norm_std: std,
        }
    }

    fn table(modules: &[usize], rows: Vec<Vec<f64>>) -> ScoreTable {
        ScoreTable {
            modules: modules
                .iter()
                .map(|&module_index| ModuleMeta { module_index, tag: ModuleTag::Unknown, downsamples: false })
                .collect(),
            argmin: rows.iter().map(|r| vec![0; r.len()]).collect(),
            scores: rows,
        }
    }

    #[test]
    fn presets_have_four_branches() {
        let resnet = partition_branches(&Preset::MiniResnet.build(32, 2, 0).unwrap());
        assert_eq!(resnet.len(), 4);
        let all: Vec<usize> = resnet.branches.concat();
        assert_eq!(all, (0..24).collect::<Vec<_>>());
        let vgg = partition_branches(&Preset::MiniVgg.build(32, 2, 0).unwrap());
        assert_eq!(vgg.len(), 4);
    }

    #[test]
    fn downsampling_module_opens_next_branch() {
        use ModuleTag::*;
        let m = meta(&[(Conv2d, false), (ReLU, false), (MaxPool, true), (Conv2d, false), (AvgPool, true)]);
        assert_eq!(partition_modules(&m).branches, vec![vec![0, 1], vec![2, 3], vec![4]]);
        let flat = meta(&[(Conv2d, false), (ReLU, false)]);
        assert_eq!(partition_modules(&flat).branches, vec![vec![0, 1]]);
        let first = meta(&[(MaxPool, true), (ReLU, false)]);
        assert_eq!(partition_modules(&first).branches, vec![vec![0, 1]]);
    }

    #[test]
    fn standardized_branch_examples() {
        let (mean, std) = population_mean_std(&[1.0, 2.0, 3.0]);
        let bundles = [bundle(0, ModuleTag::ReLU, mean, std)];
        let partition = BranchPartition { branches: vec![vec![0]] };
        let out = branch_score(&ModuleScores::from([(0, 3.0)]), &bundles, &partition, false).unwrap();
        assert!((out[0].value - 1.224744871391589).abs() < 1e-12);
        let at_mean = branch_score(&ModuleScores::from([(0, 2.0)]), &bundles, &partition, false).unwrap();
        assert_eq!(at_mean[0].value, 0.0);
    }

    #[test]
    fn relu_filter_and_degenerate_modules() {
        let bundles = [
            bundle(0, ModuleTag::Conv2d, 1.0, 1.0),
            bundle(1, ModuleTag::BatchNorm, 1.0, 1.0),
            bundle(2, ModuleTag::ReLU, 1.0, 2.0),
            bundle(3, ModuleTag::ReLU, 5.0, 0.0),
        ];
        let scores = ModuleScores::from([(0, 3.0), (1, 3.0), (2, 3.0), (3, 100.0)]);
        let p = BranchPartition { branches: vec![vec![0, 1, 2], vec![3]] };
        let all = branch_score(&scores, &bundles, &p, false).unwrap();
        assert_eq!(all[0].value, 5.0);
        assert_eq!(all[1].value, 0.0);
        let relu = branch_score(&scores, &bundles, &p, true).unwrap();
        assert_eq!(relu[0].value, 1.0);
        let no_relu = BranchPartition { branches: vec![vec![0, 1], vec![2]] };
        assert!(matches!(branch_score(&scores, &bundles, &no_relu, true), Err(Error::EmptyBranch(0))));
    }

    #[test]
    fn weighted_examples() {
        let scores = ModuleScores::from([(0, 2.0), (1, 3.0), (2, 7.0)]);
        let equal = WeightedCombo::equal(vec![0, 1, 2], true, 2).unwrap();
        assert_eq!(combine_weighted(&scores, &equal).unwrap(), 12.0);
        let onehot = WeightedCombo::new(vec![0, 1, 2], vec![0.0, 1.0, 0.0], true, 2).unwrap();
        assert_eq!(combine_weighted(&scores, &onehot).unwrap(), 3.0);
        let combo = WeightedCombo::new(vec![0, 1, 2], vec![0.5, -1.0, 2.0], true, 2).unwrap();
        let without = WeightedCombo { include_lhl: false, ..combo.clone() };
        let diff = combine_weighted(&scores, &combo).unwrap() - combine_weighted(&scores, &without).unwrap();
        assert_eq!(diff, 2.0 * 7.0);
        let missing = WeightedCombo::equal(vec![5], true, 2).unwrap();
        assert!(matches!(combine_weighted(&scores, &missing), Err(Error::MissingModule(5))));
        assert!(WeightedCombo::new(vec![], vec![], true, 0).is_err());
        assert!(WeightedCombo::new(vec![0], vec![f64::NAN], true, 0).is_err());
    }

    fn wave(i: usize, k: f64) -> f64 {
        ((i as f64 + 1.0) * k).sin()
    }

    #[test]
    fn alpha_separates_single_informative_module() {
        let id = table(&[0, 1, 2], (0..40).map(|i| vec![wave(i, 0.7), wave(i, 1.3), wave(i, 2.1)]).collect());
        let ood = table(&[0, 1, 2], (0..40).map(|i| vec![wave(i, 0.9), 3.0 + wave(i, 1.1), wave(i, 0.5)]).collect());
        let (combo, fit) = fit_alpha(&id, &ood, &[0, 1, 2], true, 2).unwrap();
        let auc = auroc(&combo.combine_table(&id).unwrap(), &combo.combine_table(&ood).unwrap()).unwrap();
        assert_eq!(auc, 1.0);
        assert!(fit.losses.windows(2).all(|w| w[1] <= w[0]));
        let (swapped, _) = fit_alpha(&ood, &id, &[0, 1, 2], true, 2).unwrap();
        let auc_swapped = auroc(&swapped.combine_table(&id).unwrap(), &swapped.combine_table(&ood).unwrap()).unwrap();
        assert_eq!(auc_swapped, 0.0);
    }

    #[test]
    fn duplicate_columns_share_weight() {
        let id = table(&[0, 1, 2], (0..30).map(|i| vec![wave(i, 0.7), wave(i, 0.7), wave(i, 1.9)]).collect());
        let ood = table(&[0, 1, 2], (0..30).map(|i| vec![0.8 + wave(i, 1.1), 0.8 + wave(i, 1.1), wave(i, 0.4)]).collect());
        let (combo, _) = fit_alpha(&id, &ood, &[0, 1, 2], true, 2).unwrap();
        assert!((combo.alpha[0] - combo.alpha[1]).abs() < 1e-6);
        assert!(combo.alpha[0] > 0.0);
    }

    #[test]
    fn single_class_input_is_rejected() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        assert!(fit_logistic(&x, &[true, true], 1.0).is_err());
        let empty = table(&[0], vec![]);
        let some = table(&[0], vec![vec![1.0]]);
        assert!(fit_alpha(&empty, &some, &[0], true, 0).is_err());
    }

    proptest! {
        #[test]
        fn combination_is_linear(
            a in prop::collection::vec(-3.0f64..3.0, 3),
            b in prop::collection::vec(-3.0f64..3.0, 3),
            s in prop::collection::vec(0.0f64..10.0, 3),
            t in prop::collection::vec(0.0f64..10.0, 3),
            k in -2.0f64..2.0,
        ) {
            let layers = vec![0, 1, 2];
            let ms = |v: &[f64]| -> ModuleScores { v.iter().copied().enumerate().collect() };
            let ca = WeightedCombo::new(layers.clone(), a.clone(), true, 1).unwrap();
            let cb = WeightedCombo::new(layers.clone(), b.clone(), true, 1).unwrap();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let cab = WeightedCombo::new(layers, sum, true, 1).unwrap();
            let lhs = combine_weighted(&ms(&s), &cab).unwrap();
            let rhs = combine_weighted(&ms(&s), &ca).unwrap() + combine_weighted(&ms(&s), &cb).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
            let st: Vec<f64> = s.iter().zip(&t).map(|(x, y)| x + k * y).collect();
            let lhs = combine_weighted(&ms(&st), &ca).unwrap();
            let rhs = combine_weighted(&ms(&s), &ca).unwrap() + k * combine_weighted(&ms(&t), &ca).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn partition_covers_modules(flags in prop::collection::vec(any::<bool>(), 1..30)) {
            let m: Vec<ModuleMeta> = flags
                .iter()
                .enumerate()
                .map(|(module_index, &downsamples)| ModuleMeta { module_index, tag: ModuleTag::ReLU, downsamples })
                .collect();
            let p = partition_modules(&m);
            prop_assert_eq!(p.branches.concat(), (0..flags.len()).collect::<Vec<_>>());
            for (b, branch) in p.branches.iter().enumerate() {
                prop_assert!(!branch.is_empty());
                for (k, &idx) in branch.iter().enumerate() {
                    prop_assert_eq!(flags[idx], k == 0 && (b > 0 || flags[idx]));
                }
            }
        }
    }
}
