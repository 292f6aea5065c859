//! End-to-end experiment runs driven by a [`RunManifest`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_id_dataset, images, labels, make_ood_set, ArtefactSpec, DatasetSplit};
use crate::embedding::extract_embeddings;
use crate::error::{Error, Result};
use crate::eval::{auroc_profile, AurocProfile};
use crate::net::presets::Preset;
use crate::net::{train, NetworkGraph, TrainConfig, TrainReport};
use crate::scoring::{score_set, ScoreTable};
use crate::stats::{fit_all_layers, LayerStatsBundle, StatsConfig};
use crate::tensor::Tensor;

pub const CLASS_COUNT: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n: usize,
    pub image_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub artefacts: Vec<ArtefactSpec>,
    pub preset: Preset,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Empty("manifest seeds"));
        }
        if self.artefacts.is_empty() {
            return Err(Error::Empty("manifest artefacts"));
        }
        self.preset.modules(self.dataset.image_size, CLASS_COUNT)?;
        if let Some(dir) = &self.output_dir {
            if dir.exists() && !dir.is_dir() {
                return Err(Error::invalid(format!("output path {} is not a directory", dir.display())));
            }
        }
        Ok(())
    }
}

/// Stamping seed for artefact `k` of a run seeded with `seed`.
pub fn artefact_seed(seed: u64, k: usize) -> u64 {
    seed ^ (0xA5A5_0000_0000_0000u64.wrapping_add(k as u64))
}

pub fn training_pairs(split: &DatasetSplit) -> Vec<(Tensor, usize)> {
    split.train.iter().map(|s| (s.image.clone(), s.label)).collect()
}

/// Builds and trains the preset network for one seed.
pub fn train_model(preset: Preset, split: &DatasetSplit, image_size: usize, config: &TrainConfig, seed: u64) -> Result<(NetworkGraph, TrainReport)> {
    let mut net = preset.build(image_size, CLASS_COUNT, seed)?;
    let config = TrainConfig { seed, ..config.clone() };
    let report = train(&mut net, &training_pairs(split), &config)?;
    log::info!(
        "seed {seed}: loss {:.4} -> {:.4}, train accuracy {:.3}",
        report.initial_loss,
        report.final_loss,
        report.final_accuracy
    );
    Ok((net, report))
}

pub fn fit_stats(net: &NetworkGraph, split: &DatasetSplit, config: &StatsConfig) -> Result<Vec<LayerStatsBundle>> {
    let train_set = extract_embeddings(net, &images(&split.train), Some(labels(&split.train)))?;
    fit_all_layers(&train_set, net.class_count(), config)
}

pub fn score_images(net: &NetworkGraph, imgs: &[Tensor], bundles: &[LayerStatsBundle]) -> Result<ScoreTable> {
    score_set(&extract_embeddings(net, imgs, None)?, bundles)
}

/// Everything produced for one seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub split: DatasetSplit,
    pub net: NetworkGraph,
    pub report: TrainReport,
    pub bundles: Vec<LayerStatsBundle>,
    pub id_scores: ScoreTable,
    /// `(artefact label, stamped images, scores)` per manifest artefact.
    pub ood: Vec<OodRun>,
}

#[derive(Debug, Clone)]
pub struct OodRun {
    pub label: String,
    pub images: Vec<Tensor>,
    pub scores: ScoreTable,
}

pub fn run_seed(manifest: &RunManifest, seed: u64) -> Result<SeedRun> {
    let split = generate_id_dataset(manifest.dataset.n, manifest.dataset.image_size, seed)?;
    let (net, report) = train_model(manifest.preset, &split, manifest.dataset.image_size, &manifest.train, seed)?;
    let bundles = fit_stats(&net, &split, &manifest.stats)?;
    let id_scores = score_images(&net, &images(&split.id_test), &bundles)?;
    let ood = manifest
        .artefacts
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let stamped = images(&make_ood_set(&split.id_test, spec, artefact_seed(seed, k))?);
            let scores = score_images(&net, &stamped, &bundles)?;
            Ok(OodRun { label: spec.label(), images: stamped, scores })
        })
        .collect::<Result<_>>()?;
    Ok(SeedRun { seed, split, net, report, bundles, id_scores, ood })
}

/// Per-artefact AUROC profile across all manifest seeds.
pub fn profiles(runs: &[SeedRun]) -> Result<Vec<(String, AurocProfile)>> {
    let first = runs.first().ok_or(Error::Empty("seed runs"))?;
    (0..first.ood.len())
        .map(|k| {
            let pairs: Vec<(ScoreTable, ScoreTable)> = runs
                .iter()
                .map(|r| (r.id_scores.clone(), r.ood[k].scores.clone()))
                .collect();
            Ok((first.ood[k].label.clone(), auroc_profile(&pairs)?))
        })
        .collect()
}

/// Runs every seed, then writes one profile CSV per artefact when an output directory is set.
pub fn run_profile(manifest: &RunManifest) -> Result<(Vec<SeedRun>, Vec<(String, AurocProfile)>)> {
    manifest.validate()?;
    let runs = manifest
        .seeds
        .iter()
        .map(|&s| run_seed(manifest, s))
        .collect::<Result<Vec<_>>>()?;
    let profiles = profiles(&runs)?;
    if let Some(dir) = &manifest.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (label, profile) in &profiles {
            let path = dir.join(format!("auroc_{label}.csv"));
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            profile.write_csv(file)?;
        }
    }
    Ok((runs, profiles))
}
