//! AUROC, balanced accuracy and multi-detector threshold search.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{decide, Decision, ModuleMeta, ScoreTable};

/// Largest threshold grid searched exhaustively.
pub const MAX_GRID_CELLS: u128 = 10_000_000;
pub const DEFAULT_GRID_RESOLUTION: usize = 12;

/// Probability that a random OOD score exceeds a random ID score, ties counting half.
///
/// Computed from average ranks in doubled integer units, so the result is the
/// exact ratio `(2 * wins + ties) / (2 * n_id * n_ood)`.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() {
        return Err(Error::Empty("ID scores"));
    }
    if ood_scores.is_empty() {
        return Err(Error::Empty("OOD scores"));
    }
    if id_scores.iter().chain(ood_scores).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("AUROC input"));
    }
    let mut pooled: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&v| (v, false))
        .chain(ood_scores.iter().map(|&v| (v, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Collapse -0.0 / 0.0 into one tie group, matching comparison semantics.
    let mut doubled_rank_sum: u128 = 0;
    let mut start = 0;
    while start < pooled.len() {
        let mut end = start + 1;
        while end < pooled.len() && pooled[end].0 == pooled[start].0 {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share the average (start + 1 + end) / 2.
        let doubled = (start + 1 + end) as u128;
        let ood_in_group = pooled[start..end].iter().filter(|p| p.1).count() as u128;
        doubled_rank_sum += doubled * ood_in_group;
        start = end;
    }
    let n_id = id_scores.len() as u128;
    let n_ood = ood_scores.len() as u128;
    let doubled_u = doubled_rank_sum - n_ood * (n_ood + 1);
    Ok(doubled_u as f64 / (2 * n_id * n_ood) as f64)
}

/// Per-module AUROC averaged over seeds, with the module kind stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AurocProfile {
    pub modules: Vec<ModuleMeta>,
    pub per_seed: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

impl AurocProfile {
    pub fn kinds(&self) -> Vec<&'static str> {
        self.modules.iter().map(|m| m.tag.short_name()).collect()
    }

    /// Column position of the best mean AUROC; ties go to the shallower module.
    pub fn argmax(&self) -> usize {
        argmax(&self.mean)
    }

    /// Wide CSV: one row per seed plus a `mean` row, one column per module.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["seed".to_string()];
        header.extend(self.modules.iter().map(|m| format!("{}:{}", m.module_index, m.tag.short_name())));
        w.write_record(&header)?;
        for (s, row) in self.per_seed.iter().enumerate() {
            let mut rec = vec![s.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        let mut rec = vec!["mean".to_string()];
        rec.extend(self.mean.iter().map(f64::to_string));
        w.write_record(&rec)?;
        w.flush().map_err(|e| Error::io("csv output", e))?;
        Ok(())
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

pub fn module_aurocs(id: &ScoreTable, ood: &ScoreTable) -> Result<Vec<f64>> {
    if id.modules.iter().map(|m| m.module_index).ne(ood.modules.iter().map(|m| m.module_index)) {
        return Err(Error::invalid("ID and OOD score tables cover different modules"));
    }
    (0..id.modules.len()).map(|c| auroc(&id.column(c), &ood.column(c))).collect()
}

/// Aggregates `(id, ood)` score tables from several seeds into a mean profile.
pub fn auroc_profile(runs: &[(ScoreTable, ScoreTable)]) -> Result<AurocProfile> {
    let (first, _) = runs.first().ok_or(Error::Empty("profile runs"))?;
    let per_seed = runs
        .iter()
        .map(|(id, ood)| {
            if id.modules.iter().map(|m| m.module_index).ne(first.modules.iter().map(|m| m.module_index)) {
                return Err(Error::invalid("runs cover different modules"));
            }
            module_aurocs(id, ood)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_profile(&per_seed);
    Ok(AurocProfile { modules: first.modules.clone(), per_seed, mean })
}

fn mean_profile(per_seed: &[Vec<f64>]) -> Vec<f64> {
    let k = per_seed.len() as f64;
    (0..per_seed[0].len())
        .map(|j| per_seed.iter().map(|r| r[j]).sum::<f64>() / k)
        .collect()
}

/// OR-rule detector: a sample is OOD if any score reaches its threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiDetector {
    pub names: Vec<String>,
    pub thresholds: Vec<f64>,
}

impl MultiDetector {
    pub fn new(names: Vec<String>, thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::Empty("detector list"));
        }
        if names.len() != thresholds.len() {
            return Err(Error::DimensionMismatch { expected: thresholds.len(), actual: names.len() });
        }
        Ok(Self { names, thresholds })
    }

    pub fn flags(&self, scores: &[f64]) -> Result<bool> {
        if scores.len() != self.thresholds.len() {
            return Err(Error::DimensionMismatch { expected: self.thresholds.len(), actual: scores.len() });
        }
        Ok(scores
            .iter()
            .zip(&self.thresholds)
            .any(|(&s, &t)| decide(s, t) == Decision::OutOfDistribution))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedAccuracy {
    pub per_task: Vec<f64>,
    /// All OOD tasks pooled as positives.
    pub combined: f64,
}

fn count(flags: &[bool]) -> usize {
    flags.iter().filter(|&&f| f).count()
}

/// `(TPR + TNR) / 2` from flagged counts.
fn balanced(tp: usize, n_ood: usize, fp: usize, n_id: usize) -> f64 {
    (tp as f64 / n_ood as f64 + (1.0 - fp as f64 / n_id as f64)) / 2.0
}

/// Balanced accuracy of `detector`; rows are samples, columns detectors.
pub fn balanced_accuracy(detector: &MultiDetector, id: &[Vec<f64>], ood_sets: &[Vec<Vec<f64>>]) -> Result<BalancedAccuracy> {
    if id.is_empty() {
        return Err(Error::Empty("ID set"));
    }
    if ood_sets.is_empty() || ood_sets.iter().any(Vec::is_empty) {
        return Err(Error::Empty("OOD set"));
    }
    let flag_all = |rows: &[Vec<f64>]| rows.iter().map(|r| detector.flags(r)).collect::<Result<Vec<bool>>>();
    let fp = count(&flag_all(id)?);
    let ood_flags: Vec<Vec<bool>> = ood_sets.iter().map(|s| flag_all(s)).collect::<Result<_>>()?;
    let per_task = ood_flags.iter().map(|f| balanced(count(f), f.len(), fp, id.len())).collect();
    let all = ood_flags.concat();
    let combined = balanced(count(&all), all.len(), fp, id.len());
    Ok(BalancedAccuracy { per_task, combined })
}

/// Candidate thresholds for one detector: `resolution` quantile cut points of
/// the pooled scores plus `+inf`.
///
/// Cut `k` sits between sorted positions `i - 1` and `i` with
/// `i = round(k * N / resolution)`; `i = 0` uses the minimum itself.
pub fn quantile_thresholds(pooled: &[f64], resolution: usize) -> Vec<f64> {
    let mut sorted = pooled.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut out: Vec<f64> = (0..resolution)
        .map(|k| {
            let i = ((k * n) as f64 / resolution as f64).round() as usize;
            match i {
                0 => sorted[0],
                i if i >= n => f64::INFINITY,
                i => 0.5 * (sorted[i - 1] + sorted[i]),
            }
        })
        .collect();
    out.push(f64::INFINITY);
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub detector: MultiDetector,
    pub accuracy: BalancedAccuracy,
    pub candidates: Vec<Vec<f64>>,
    pub cells: u128,
}

/// Exhaustive OR-rule threshold search maximizing combined balanced accuracy.
///
/// Ties prefer higher thresholds: larger total candidate rank, then the
/// lexicographically larger rank vector.
pub fn grid_search_thresholds(
    names: Vec<String>,
    id: &[Vec<f64>],
    ood_sets: &[Vec<Vec<f64>>],
    resolution: usize,
) -> Result<GridSearchResult> {
    let d = names.len();
    if d == 0 {
        return Err(Error::Empty("detector list"));
    }
    if resolution < 2 {
        return Err(Error::invalid("grid resolution must be at least 2"));
    }
    if id.is_empty() || ood_sets.is_empty() || ood_sets.iter().any(Vec::is_empty) {
        return Err(Error::Empty("score set"));
    }
    let all_rows: Vec<&Vec<f64>> = id.iter().chain(ood_sets.iter().flatten()).collect();
    if all_rows.iter().any(|r| r.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, actual: all_rows.iter().map(|r| r.len()).find(|&l| l != d).unwrap_or(0) });
    }
    let cells = ((resolution + 1) as u128).checked_pow(d as u32).unwrap_or(u128::MAX);
    if cells > MAX_GRID_CELLS {
        return Err(Error::GridTooLarge { cells, limit: MAX_GRID_CELLS });
    }
    let candidates: Vec<Vec<f64>> = (0..d)
        .map(|j| quantile_thresholds(&all_rows.iter().map(|r| r[j]).collect::<Vec<_>>(), resolution))
        .collect();
    let cells: u128 = candidates.iter().map(|c| c.len() as u128).product();

    // flags[j][c][sample] for the ID block followed by each OOD block
    let flags: Vec<Vec<Vec<bool>>> = candidates
        .iter()
        .enumerate()
        .map(|(j, cands)| cands.iter().map(|&t| all_rows.iter().map(|r| r[j] >= t).collect()).collect())
        .collect();
    let n_id = id.len();
    let n_ood: usize = ood_sets.iter().map(Vec::len).sum();

    let evaluate = |cell: u128| -> (f64, Vec<usize>) {
        let mut idx = Vec::with_capacity(d);
        let mut rest = cell;
        for c in &candidates {
            idx.push((rest % c.len() as u128) as usize);
            rest /= c.len() as u128;
        }
        let mut fp = 0usize;
        let mut tp = 0usize;
        for s in 0..all_rows.len() {
            if (0..d).any(|j| flags[j][idx[j]][s]) {
                if s < n_id {
                    fp += 1;
                } else {
                    tp += 1;
                }
            }
        }
        (balanced(tp, n_ood, fp, n_id), idx)
    };
    let better = |a: &(f64, Vec<usize>), b: &(f64, Vec<usize>)| -> Ordering {
        a.0.total_cmp(&b.0)
            .then_with(|| a.1.iter().sum::<usize>().cmp(&b.1.iter().sum::<usize>()))
            .then_with(|| a.1.cmp(&b.1))
    };
    let best = (0..cells)
        .into_par_iter()
        .map(evaluate)
        .max_by(|a, b| better(a, b))
        .expect("grid is non-empty");
    let thresholds = best.1.iter().enumerate().map(|(j, &k)| candidates[j][k]).collect();
    let detector = MultiDetector::new(names, thresholds)?;
    let accuracy = balanced_accuracy(&detector, id, ood_sets)?;
    Ok(GridSearchResult { detector, accuracy, candidates, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise(id: &[f64], ood: &[f64]) -> f64 {
        let mut doubled = 0u64;
        for o in ood {
            for i in id {
                doubled += if o > i { 2 } else if o == i { 1 } else { 0 };
            }
        }
        doubled as f64 / (2 * id.len() * ood.len()) as f64
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0], &[1.0]).unwrap(), 0.5);
        assert_eq!(auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(auroc(&[], &[1.0]).is_err());
        assert!(auroc(&[1.0], &[]).is_err());
        assert!(auroc(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn auroc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let id: Vec<f64> = (0..50).map(|_| (rng.random_range(0.0..10.0f64)).round()).collect();
            let ood: Vec<f64> = (0..50).map(|_| (rng.random_range(2.0..12.0f64)).round()).collect();
            assert_eq!(auroc(&id, &ood).unwrap(), pairwise(&id, &ood));
        }
    }

    #[test]
    fn profile_means_over_seeds() {
        let meta = vec![
            ModuleMeta { module_index: 0, tag: crate::net::ModuleTag::Conv2d, downsamples: false },
            ModuleMeta { module_index: 1, tag: crate::net::ModuleTag::ReLU, downsamples: false },
        ];
        let t = |rows: Vec<Vec<f64>>| ScoreTable { modules: meta.clone(), argmin: rows.iter().map(|_| vec![0, 0]).collect(), scores: rows };
        let run_a = (t(vec![vec![0.0, 0.0], vec![1.0, 1.0]]), t(vec![vec![2.0, 0.5], vec![3.0, 0.5]]));
        let run_b = (t(vec![vec![0.0, 5.0]]), t(vec![vec![0.0, 6.0]]));
        let single = auroc_profile(&[run_a.clone()]).unwrap();
        assert_eq!(single.mean, vec![1.0, 0.5]);
        let both = auroc_profile(&[run_a, run_b]).unwrap();
        assert_eq!(both.per_seed[1], vec![0.5, 1.0]);
        assert_eq!(both.mean, vec![0.75, 0.75]);
        assert_eq!(both.kinds(), vec!["conv", "relu"]);
        assert_eq!(both.argmax(), 0);
        let mut buf = Vec::new();
        both.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "seed,0:conv,1:relu\n0,1,0.5\n1,0.5,1\nmean,0.75,0.75\n");
    }

    #[test]
    fn balanced_accuracy_examples() {
        let det = MultiDetector::new(vec!["a".into()], vec![1.0]).unwrap();
        let id = vec![vec![0.0], vec![0.5]];
        let ood = vec![vec![vec![1.0], vec![2.0]]];
        assert_eq!(balanced_accuracy(&det, &id, &ood).unwrap().combined, 1.0);
        let never = MultiDetector::new(vec!["a".into()], vec![f64::INFINITY]).unwrap();
        assert_eq!(balanced_accuracy(&never, &id, &ood).unwrap().combined, 0.5);
        // hand count: ID flags {no, yes}, task A flags {yes, no}, task B flags {yes, yes}
        let det2 = MultiDetector::new(vec!["a".into(), "b".into()], vec![1.0, 1.0]).unwrap();
        let id = vec![vec![0.0, 0.0], vec![0.0, 1.5]];
        let tasks = vec![vec![vec![1.2, 0.0], vec![0.0, 0.0]], vec![vec![0.0, 3.0], vec![2.0, 2.0]]];
        let ba = balanced_accuracy(&det2, &id, &tasks).unwrap();
        assert_eq!(ba.per_task, vec![0.5, 0.75]);
        assert_eq!(ba.combined, (0.75 + 0.5) / 2.0);
        assert!(balanced_accuracy(&det2, &[], &tasks).is_err());
    }

    #[test]
    fn single_detector_finds_gap() {
        let id: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let ood: Vec<Vec<f64>> = (0..10).map(|i| vec![20.0 + i as f64]).collect();
        let r = grid_search_thresholds(vec!["a".into()], &id, &[ood], 4).unwrap();
        assert_eq!(r.accuracy.combined, 1.0);
        assert_eq!(r.detector.thresholds, vec![14.5]);
    }

    #[test]
    fn two_detectors_beat_either_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut noise = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(0.0..1.0)).collect() };
        let id: Vec<Vec<f64>> = (0..24).map(|_| noise(2)).collect();
        let task_a: Vec<Vec<f64>> = (0..24).map(|_| { let v = noise(2); vec![v[0] + 5.0, v[1]] }).collect();
        let task_b: Vec<Vec<f64>> = (0..24).map(|_| { let v = noise(2); vec![v[0], v[1] + 5.0] }).collect();
        let tasks = vec![task_a, task_b];
        let both = grid_search_thresholds(vec!["a".into(), "b".into()], &id, &tasks, 12).unwrap();
        assert_eq!(both.accuracy.combined, 1.0);
        for j in 0..2 {
            let pick = |rows: &[Vec<f64>]| rows.iter().map(|r| vec![r[j]]).collect::<Vec<_>>();
            let single = grid_search_thresholds(vec!["x".into()], &pick(&id), &[pick(&tasks[0]), pick(&tasks[1])], 12).unwrap();
            assert!(single.accuracy.combined < both.accuracy.combined);
        }
    }

    #[test]
    fn grid_limits() {
        let id = vec![vec![0.0; 7]];
        let ood = vec![vec![vec![1.0; 7]]];
        let names: Vec<String> = (0..7).map(|i| i.to_string()).collect();
        assert!(matches!(grid_search_thresholds(names, &id, &ood, 12), Err(Error::GridTooLarge { .. })));
        assert!(grid_search_thresholds(vec!["a".into()], &[vec![0.0]], &[vec![vec![1.0]]], 1).is_err());
    }

    #[test]
    fn tie_break_prefers_higher_thresholds() {
        let id = vec![vec![0.0], vec![1.0]];
        let ood = vec![vec![vec![5.0], vec![6.0]]];
        let r = grid_search_thresholds(vec!["a".into()], &id, &ood, 2).unwrap();
        let best = r.detector.thresholds[0];
        for &t in &r.candidates[0] {
            let d = MultiDetector::new(vec!["a".into()], vec![t]).unwrap();
            let ba = balanced_accuracy(&d, &id, &ood).unwrap().combined;
            if ba == r.accuracy.combined {
                assert!(t <= best);
            }
        }
    }

    proptest! {
        #[test]
        fn auroc_rank_properties(
            id in prop::collection::vec(-5i32..5, 1..40),
            ood in prop::collection::vec(-5i32..5, 1..40),
        ) {
            let id: Vec<f64> = id.into_iter().map(f64::from).collect();
            let ood: Vec<f64> = ood.into_iter().map(f64::from).collect();
            let a = auroc(&id, &ood).unwrap();
            prop_assert_eq!(a, pairwise(&id, &ood));
            prop_assert!((auroc(&ood, &id).unwrap() - (1.0 - a)).abs() < 1e-15);
            let f = |v: &[f64]| v.iter().map(|x| x.exp()).collect::<Vec<_>>();
            let g = |v: &[f64]| v.iter().map(|x| 2.0 * x + 7.0).collect::<Vec<_>>();
            prop_assert_eq!(auroc(&f(&id), &f(&ood)).unwrap(), a);
            prop_assert_eq!(auroc(&g(&id), &g(&ood)).unwrap(), a);
        }

        #[test]
        fn grid_beats_single_configs(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 2), 4..16),
            shift in 0.0f64..1.0,
        ) {
            let half = rows.len() / 2;
            let id = rows[..half].to_vec();
            let ood: Vec<Vec<f64>> = rows[half..].iter().map(|r| vec![r[0] + shift, r[1]]).collect();
            let r = grid_search_thresholds(vec!["a".into(), "b".into()], &id, &[ood.clone()], 4).unwrap();
            for j in 0..2 {
                for &t in &r.candidates[j] {
                    let mut th = vec![f64::INFINITY; 2];
                    th[j] = t;
                    let d = MultiDetector::new(vec!["a".into(), "b".into()], th).unwrap();
                    let ba = balanced_accuracy(&d, &id, &[ood.clone()]).unwrap().combined;
                    prop_assert!(ba <= r.accuracy.combined);
                }
            }
        }
    }
}
