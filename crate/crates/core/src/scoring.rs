//! Mahalanobis scores per module.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::net::{ModuleTag, NetworkGraph};
use crate::stats::{ClassStats, LayerStatsBundle};

/// Squared Mahalanobis distance `(z - μ)^T (Σ + λI)^{-1} (z - μ)`.
///
/// Evaluated as `|L^{-1} (z - μ)|^2` with the stored Cholesky factor, so the
/// result is nonnegative by construction.
pub fn class_distance(z: &[f64], stats: &ClassStats) -> Result<f64> {
    let m = stats.dim();
    if z.len() != m {
        return Err(Error::DimensionMismatch { expected: m, actual: z.len() });
    }
    let l = &stats.cholesky;
    let mut y = vec![0.0; m];
    let mut total = 0.0;
    for i in 0..m {
        let mut acc = z[i] - stats.mean[i];
        for (j, yj) in y.iter().enumerate().take(i) {
            acc -= l[(i, j)] * yj;
        }
        y[i] = acc / l[(i, i)];
        total += y[i] * y[i];
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub module_index: usize,
    pub distances: Vec<f64>,
    /// Minimum over classes.
    pub score: f64,
    /// Class attaining the minimum; ties go to the lowest class id.
    pub argmin: usize,
}

pub fn score(z: &[f64], bundle: &LayerStatsBundle) -> Result<ScoreVector> {
    let distances = bundle
        .classes
        .iter()
        .map(|c| class_distance(z, c))
        .collect::<Result<Vec<_>>>()?;
    let (argmin, score) = distances
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
    if !score.is_finite() {
        return Err(Error::NonFinite("Mahalanobis score"));
    }
    Ok(ScoreVector {
        module_index: bundle.module_index,
        argmin: bundle.classes[argmin].class_id,
        distances,
        score,
    })
}

/// Index of the last hidden layer: the module feeding the final (logit) module.
pub fn lhl_module(net: &NetworkGraph) -> Result<usize> {
    lhl_index(net.len())
}

pub fn lhl_index(module_count: usize) -> Result<usize> {
    if module_count < 2 {
        return Err(Error::invalid("the last hidden layer needs at least 2 modules"));
    }
    Ok(module_count - 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    InDistribution,
    OutOfDistribution,
}

/// In-distribution iff `score < threshold`; a score equal to the threshold is OOD.
pub fn decide(score: f64, threshold: f64) -> Decision {
    if score < threshold {
        Decision::InDistribution
    } else {
        Decision::OutOfDistribution
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleMeta {
    pub module_index: usize,
    pub tag: ModuleTag,
    pub downsamples: bool,
}

/// Scores of a sample set at many modules: `scores[sample][column]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub modules: Vec<ModuleMeta>,
    pub scores: Vec<Vec<f64>>,
    pub argmin: Vec<Vec<usize>>,
}

impl ScoreTable {
    pub fn sample_count(&self) -> usize {
        self.scores.len()
    }

    pub fn column_of(&self, module_index: usize) -> Option<usize> {
        self.modules.iter().position(|m| m.module_index == module_index)
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        self.scores.iter().map(|row| row[col]).collect()
    }

    pub fn module_column(&self, module_index: usize) -> Result<Vec<f64>> {
        let col = self.column_of(module_index).ok_or(Error::MissingModule(module_index))?;
        Ok(self.column(col))
    }

    /// Replaces module metadata by module index, e.g. after reading a bare CSV.
    pub fn with_meta(mut self, meta: &[ModuleMeta]) -> Result<Self> {
        for m in &mut self.modules {
            *m = *meta
                .iter()
                .find(|x| x.module_index == m.module_index)
                .ok_or(Error::MissingModule(m.module_index))?;
        }
        Ok(self)
    }

    /// Writes long-format rows `sample_id,module_index,D_M,argmin_class`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["sample_id", "module_index", "D_M", "argmin_class"])?;
        for (sample, (row, arg)) in self.scores.iter().zip(&self.argmin).enumerate() {
            for ((meta, s), a) in self.modules.iter().zip(row).zip(arg) {
                w.write_record([sample.to_string(), meta.module_index.to_string(), s.to_string(), a.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("csv output", e))?;
        Ok(())
    }

    /// Reads rows written by [`ScoreTable::write_csv`]. Module metadata is left as
    /// `Unknown`; attach it with [`ScoreTable::with_meta`].
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            sample_id: usize,
            module_index: usize,
            #[serde(rename = "D_M")]
            d_m: f64,
            argmin_class: usize,
        }
        let mut rows = Vec::new();
        for row in csv::Reader::from_reader(reader).deserialize() {
            let row: Row = row?;
            rows.push(row);
        }
        let mut module_indices: Vec<usize> = rows.iter().map(|r| r.module_index).collect();
        module_indices.sort_unstable();
        module_indices.dedup();
        let samples = rows.iter().map(|r| r.sample_id + 1).max().unwrap_or(0);
        let mut scores = vec![vec![f64::NAN; module_indices.len()]; samples];
        let mut argmin = vec![vec![0; module_indices.len()]; samples];
        for r in &rows {
            let col = module_indices.binary_search(&r.module_index).expect("collected above");
            scores[r.sample_id][col] = r.d_m;
            argmin[r.sample_id][col] = r.argmin_class;
        }
        if scores.iter().flatten().any(|v| v.is_nan()) {
            return Err(Error::invalid("score CSV does not cover every (sample, module) pair"));
        }
        let modules = module_indices
            .into_iter()
            .map(|module_index| ModuleMeta { module_index, tag: ModuleTag::Unknown, downsamples: false })
            .collect();
        Ok(Self { modules, scores, argmin })
    }
}

pub fn bundle_meta(bundles: &[LayerStatsBundle]) -> Vec<ModuleMeta> {
    bundles
        .iter()
        .map(|b| ModuleMeta { module_index: b.module_index, tag: b.tag, downsamples: b.downsamples })
        .collect()
}

/// Scores every sample of `set` at every module that has fitted statistics.
pub fn score_set(set: &EmbeddingSet, bundles: &[LayerStatsBundle]) -> Result<ScoreTable> {
    let columns: Vec<Vec<ScoreVector>> = bundles
        .par_iter()
        .map(|bundle| {
            let module = set.module(bundle.module_index).ok_or(Error::MissingModule(bundle.module_index))?;
            module.vectors.iter().map(|z| score(z, bundle)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let n = set.sample_count();
    let scores = (0..n).map(|i| columns.iter().map(|c| c[i].score).collect()).collect();
    let argmin = (0..n).map(|i| columns.iter().map(|c| c[i].argmin).collect()).collect();
    Ok(ScoreTable { modules: bundle_meta(bundles), scores, argmin })
}
