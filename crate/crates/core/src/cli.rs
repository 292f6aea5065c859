//! Command-line front end.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::artifacts::{
    bundles_from_container, dataset_section, embeddings_from_activations, embeddings_from_container, model_from_section,
    model_section, samples_from_section, scores_from_section, scores_section, stats_container, MODEL_SECTION,
};
use crate::combiners::{fit_alpha, partition_modules, BranchDetector, WeightedCombo};
use crate::container::{read_container, write_container, Container, SectionKind};
use crate::data::{generate_id_dataset, images, make_ood_set, ArtefactSpec, ImageSample, DEFAULT_RING_RADIUS_FRACTION, DEFAULT_RING_THICKNESS};
use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::eval::{argmax, auroc, auroc_profile, grid_search_thresholds, DEFAULT_GRID_RESOLUTION};
use crate::fgsm::{perturbed_scores, sweep_epsilon, FgsmTarget};
use crate::net::presets::Preset;
use crate::net::{NetworkGraph, TrainConfig};
use crate::pipeline::{artefact_seed, fit_stats, run_profile, score_images, train_model, RunManifest};
use crate::scoring::{bundle_meta, lhl_index, score_set, ScoreTable};
use crate::stats::{fit_all_layers, LayerStatsBundle, StatsConfig};

pub const TRAIN_SPLIT: &str = "train";
pub const ID_TEST_SPLIT: &str = "id_test";
pub const OOD_PREFIX: &str = "ood_";

#[derive(Debug, Parser)]
#[command(name = "mahascope", version, about = "Layer-wise Mahalanobis out-of-distribution detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic two-class dataset and stamped OOD sets.
    GenData(GenDataArgs),
    /// Train a preset network on a dataset's training split.
    Train(TrainArgs),
    /// Fit per-module class statistics on training embeddings.
    FitStats(FitStatsArgs),
    /// Score ID and OOD sets at every module.
    Score(ScoreArgs),
    /// Build weighted or multi-branch detectors from per-module scores.
    Combine(CombineArgs),
    /// Sweep FGSM step sizes against a validation OOD set.
    Fgsm(FgsmArgs),
    /// Per-module AUROC for every OOD set.
    Eval(EvalArgs),
    /// Grid-search OR-rule thresholds for the branch detectors.
    SweepThresholds(SweepArgs),
    /// Run the full multi-seed experiment described by a manifest.
    Profile(ProfileArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArtefactChoice {
    Square,
    Ring,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 600)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Artefact kinds to stamp; each yields one OOD set.
    #[arg(long, value_enum, default_values_t = [ArtefactChoice::Square])]
    pub artefact: Vec<ArtefactChoice>,
    /// Square area fraction (0.10, 0.075 or 0.05 for the standard protocol).
    #[arg(long, default_value_t = 0.10)]
    pub area: f64,
    #[arg(long, default_value_t = DEFAULT_RING_RADIUS_FRACTION)]
    pub ring_radius: f64,
    #[arg(long, default_value_t = DEFAULT_RING_THICKNESS)]
    pub ring_thickness: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "mini-resnet")]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitStatsArgs {
    /// Model and dataset: embeddings are computed from the training split.
    #[arg(long, requires = "data")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Labelled EMBEDDINGS or ACTIVATIONS container, e.g. from an external exporter.
    #[arg(long, conflicts_with_all = ["model", "data"])]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Share one pooled covariance across classes.
    #[arg(long)]
    pub tied: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long, requires = "data")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Score precomputed embeddings instead; `NAME=PATH`, repeatable.
    #[arg(long, conflicts_with_all = ["model", "data"], value_parser = parse_named_path)]
    pub embeddings: Vec<(String, PathBuf)>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write `<set>.csv` score files into this directory.
    #[arg(long)]
    pub csv_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CombineMode {
    Weighted,
    Mbm,
}

#[derive(Debug, Args)]
pub struct CombineArgs {
    /// SCORES container from `score`.
    #[arg(long, required_unless_present = "csv_dir")]
    pub scores: Option<PathBuf>,
    /// Directory of score CSVs (`id_test.csv`, `ood_*.csv`).
    #[arg(long, conflicts_with = "scores")]
    pub csv_dir: Option<PathBuf>,
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long, value_enum, default_value_t = CombineMode::Mbm)]
    pub mode: CombineMode,
    /// Module subset for the weighted combination (default: all scored modules).
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    /// Fit coefficients by logistic regression against this OOD set instead of using equal weights.
    #[arg(long)]
    pub fit_ood: Option<String>,
    #[arg(long)]
    pub exclude_lhl: bool,
    #[arg(long)]
    pub relu_only: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FgsmArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    /// `module:N` or `branch:B` (deepest module of branch B).
    #[arg(long, value_parser = parse_target)]
    pub target: FgsmTarget,
    /// OOD set used for validation (default: the first one).
    #[arg(long)]
    pub ood: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.002,0.005,0.01,0.02,0.05,0.1")]
    pub eps_grid: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Output directory for `auroc_<set>.csv` and `summary.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub relu_only: bool,
    #[arg(long, default_value_t = DEFAULT_GRID_RESOLUTION)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

fn parse_named_path(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected NAME=PATH, got '{s}'"))?;
    Ok((name.to_string(), PathBuf::from(path)))
}

fn parse_target(s: &str) -> std::result::Result<FgsmTarget, String> {
    let (kind, index) = s.split_once(':').ok_or_else(|| format!("expected module:N or branch:B, got '{s}'"))?;
    let index: usize = index.parse().map_err(|e| format!("bad index in '{s}': {e}"))?;
    match kind {
        "module" => Ok(FgsmTarget::Module(index)),
        "branch" => Ok(FgsmTarget::Branch(index)),
        other => Err(format!("unknown target kind '{other}'")),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(file, value)?;
    Ok(())
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_model(path: &Path) -> Result<NetworkGraph> {
    model_from_section(read_container(path)?.require(SectionKind::Model, MODEL_SECTION)?)
}

fn load_split(container: &Container, name: &str) -> Result<Vec<ImageSample>> {
    samples_from_section(container.require(SectionKind::Dataset, name)?)
}

fn ood_splits(container: &Container) -> Result<Vec<(String, Vec<ImageSample>)>> {
    let out: Vec<_> = container
        .of_kind(SectionKind::Dataset)
        .filter(|s| s.name.starts_with(OOD_PREFIX))
        .map(|s| Ok((s.name.clone(), samples_from_section(s)?)))
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::MissingArtifact(format!("DATASET sections named '{OOD_PREFIX}*'")));
    }
    Ok(out)
}

fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let c = read_container(path)?;
    if c.of_kind(SectionKind::Embeddings).any(|s| s.name != crate::artifacts::LABELS_SECTION) {
        embeddings_from_container(&c)
    } else {
        embeddings_from_activations(&c)
    }
}

/// ID table first, then every OOD table, from a SCORES container.
fn load_score_sets(path: &Path) -> Result<(ScoreTable, Vec<(String, ScoreTable)>)> {
    let c = read_container(path)?;
    let id = scores_from_section(c.require(SectionKind::Scores, ID_TEST_SPLIT)?)?;
    let ood: Vec<_> = c
        .of_kind(SectionKind::Scores)
        .filter(|s| s.name != ID_TEST_SPLIT)
        .map(|s| Ok((s.name.clone(), scores_from_section(s)?)))
        .collect::<Result<_>>()?;
    if ood.is_empty() {
        return Err(Error::MissingArtifact("OOD SCORES sections".into()));
    }
    Ok((id, ood))
}

fn load_score_csvs(dir: &Path, bundles: &[LayerStatsBundle]) -> Result<(ScoreTable, Vec<(String, ScoreTable)>)> {
    let meta = bundle_meta(bundles);
    let read = |path: &Path| -> Result<ScoreTable> {
        ScoreTable::read_csv(File::open(path).map_err(|e| Error::io(path, e))?)?.with_meta(&meta)
    };
    let id = read(&dir.join(format!("{ID_TEST_SPLIT}.csv")))?;
    let mut ood = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if stem.starts_with(OOD_PREFIX) && p.extension().is_some_and(|e| e == "csv") {
            ood.push((stem, read(&p)?));
        }
    }
    if ood.is_empty() {
        return Err(Error::MissingArtifact(format!("{OOD_PREFIX}*.csv in {}", dir.display())));
    }
    Ok((id, ood))
}

fn artefact_specs(args: &GenDataArgs) -> Vec<ArtefactSpec> {
    args.artefact
        .iter()
        .map(|a| match a {
            ArtefactChoice::Square => ArtefactSpec::square(args.area),
            ArtefactChoice::Ring => ArtefactSpec::Ring { outer_radius_fraction: args.ring_radius, thickness: args.ring_thickness },
        })
        .collect()
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let split = generate_id_dataset(args.n, args.size, args.seed)?;
    let mut container = Container::new(vec![
        dataset_section(TRAIN_SPLIT, &split.train)?,
        dataset_section(ID_TEST_SPLIT, &split.id_test)?,
    ]);
    for (k, spec) in artefact_specs(args).iter().enumerate() {
        let ood = make_ood_set(&split.id_test, spec, artefact_seed(args.seed, k))?;
        container.push(dataset_section(&format!("{OOD_PREFIX}{}", spec.label()), &ood)?);
    }
    write_container(&args.out, &container)
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let data = read_container(&args.data)?;
    let train = load_split(&data, TRAIN_SPLIT)?;
    let size = train[0].image.shape()[1];
    let split = crate::data::DatasetSplit { train, id_test: Vec::new(), ood_test: Vec::new(), seed: args.seed };
    let config = TrainConfig { epochs: args.epochs, learning_rate: args.lr, batch_size: args.batch_size, ..TrainConfig::default() };
    let (net, report) = train_model(args.preset, &split, size, &config, args.seed)?;
    write_container(&args.out, &Container::new(vec![model_section(&net)?]))?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn fit_stats_cmd(args: &FitStatsArgs) -> Result<()> {
    let config = StatsConfig { tied_covariance: args.tied };
    let bundles = match (&args.model, &args.data, &args.embeddings) {
        (Some(model), Some(data), None) => {
            let net = load_model(model)?;
            let train = load_split(&read_container(data)?, TRAIN_SPLIT)?;
            let split = crate::data::DatasetSplit { train, id_test: Vec::new(), ood_test: Vec::new(), seed: 0 };
            fit_stats(&net, &split, &config)?
        }
        (None, None, Some(path)) => fit_all_layers(&load_embeddings(path)?, args.classes, &config)?,
        _ => return Err(Error::invalid("give either --model and --data, or --embeddings")),
    };
    write_container(&args.out, &stats_container(&bundles)?)
}

fn score_cmd(args: &ScoreArgs) -> Result<()> {
    let bundles = bundles_from_container(&read_container(&args.stats)?)?;
    let mut tables: Vec<(String, ScoreTable)> = Vec::new();
    match (&args.model, &args.data) {
        (Some(model), Some(data)) => {
            let net = load_model(model)?;
            let data = read_container(data)?;
            tables.push((ID_TEST_SPLIT.into(), score_images(&net, &images(&load_split(&data, ID_TEST_SPLIT)?), &bundles)?));
            for (name, samples) in ood_splits(&data)? {
                tables.push((name, score_images(&net, &images(&samples), &bundles)?));
            }
        }
        _ => {
            if args.embeddings.is_empty() {
                return Err(Error::invalid("give --model and --data, or at least one --embeddings NAME=PATH"));
            }
            for (name, path) in &args.embeddings {
                tables.push((name.clone(), score_set(&load_embeddings(path)?, &bundles)?));
            }
        }
    }
    let sections = tables.iter().map(|(n, t)| scores_section(n, t)).collect::<Result<_>>()?;
    write_container(&args.out, &Container::new(sections))?;
    if let Some(dir) = &args.csv_dir {
        ensure_dir(dir)?;
        for (name, table) in &tables {
            table.write_csv(create(&dir.join(format!("{name}.csv")))?)?;
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct DetectorReport {
    mode: &'static str,
    relu_only: bool,
    weighted: Option<WeightedCombo>,
    branches: Option<BranchDetector>,
    /// AUROC of each detector output per OOD set.
    auroc: BTreeMap<String, Vec<f64>>,
}

fn combine_cmd(args: &CombineArgs) -> Result<()> {
    let bundles = bundles_from_container(&read_container(&args.stats)?)?;
    let (id, ood) = match (&args.scores, &args.csv_dir) {
        (Some(p), _) => load_score_sets(p)?,
        (None, Some(d)) => load_score_csvs(d, &bundles)?,
        (None, None) => return Err(Error::invalid("give --scores or --csv-dir")),
    };
    ensure_dir(&args.out)?;
    let mut report = DetectorReport { mode: "", relu_only: args.relu_only, weighted: None, branches: None, auroc: BTreeMap::new() };
    let id_out: Vec<Vec<f64>>;
    let mut ood_out: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    match args.mode {
        CombineMode::Weighted => {
            report.mode = "weighted";
            let lhl = lhl_index(id.modules.iter().map(|m| m.module_index).max().map_or(0, |m| m + 1))?;
            let layers: Vec<usize> = if args.layers.is_empty() {
                id.modules.iter().map(|m| m.module_index).collect()
            } else {
                args.layers.clone()
            };
            let combo = match &args.fit_ood {
                Some(name) => {
                    let target = &ood.iter().find(|(n, _)| n == name).ok_or_else(|| Error::MissingArtifact(format!("OOD set '{name}'")))?.1;
                    fit_alpha(&id, target, &layers, !args.exclude_lhl, lhl)?.0
                }
                None => WeightedCombo::equal(layers, !args.exclude_lhl, lhl)?,
            };
            id_out = combo.combine_table(&id)?.into_iter().map(|v| vec![v]).collect();
            for (name, t) in &ood {
                ood_out.push((name.clone(), combo.combine_table(t)?.into_iter().map(|v| vec![v]).collect()));
            }
            report.weighted = Some(combo);
        }
        CombineMode::Mbm => {
            report.mode = "mbm";
            let det = BranchDetector::new(&partition_modules(&bundle_meta(&bundles)), &bundles, args.relu_only)?;
            id_out = det.score_table(&id)?;
            for (name, t) in &ood {
                ood_out.push((name.clone(), det.score_table(t)?));
            }
            report.branches = Some(det);
        }
    }
    let width = id_out.first().map_or(0, Vec::len);
    for (name, rows) in &ood_out {
        let aurocs = (0..width)
            .map(|j| auroc(&id_out.iter().map(|r| r[j]).collect::<Vec<_>>(), &rows.iter().map(|r| r[j]).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        report.auroc.insert(name.clone(), aurocs);
    }
    let mut w = csv::Writer::from_writer(create(&args.out.join("combined_scores.csv"))?);
    let mut header = vec!["set".to_string(), "sample_id".to_string()];
    header.extend((0..width).map(|j| format!("detector_{j}")));
    w.write_record(&header)?;
    for (set, rows) in std::iter::once((ID_TEST_SPLIT.to_string(), &id_out)).chain(ood_out.iter().map(|(n, r)| (n.clone(), r))) {
        for (i, row) in rows.iter().enumerate() {
            let mut rec = vec![set.clone(), i.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(&args.out, e))?;
    write_json(&args.out.join("detector.json"), &report)
}

fn fgsm_cmd(args: &FgsmArgs) -> Result<()> {
    let net = load_model(&args.model)?;
    let data = read_container(&args.data)?;
    let bundles = bundles_from_container(&read_container(&args.stats)?)?;
    let partition = partition_modules(&bundle_meta(&bundles));
    let module = args.target.resolve(&partition)?;
    let bundle = bundles.iter().find(|b| b.module_index == module).ok_or(Error::MissingModule(module))?;
    let id = images(&load_split(&data, ID_TEST_SPLIT)?);
    let oods = ood_splits(&data)?;
    let ood = match &args.ood {
        Some(name) => oods.iter().find(|(n, _)| n == name).ok_or_else(|| Error::MissingArtifact(format!("OOD set '{name}'")))?,
        None => &oods[0],
    };
    let ood_images = images(&ood.1);
    let sweep = sweep_epsilon(&args.eps_grid, |eps| {
        Ok((perturbed_scores(&net, &id, bundle, eps)?, perturbed_scores(&net, &ood_images, bundle, eps)?))
    })?;
    #[derive(Serialize)]
    struct FgsmReport<'a> {
        target_module: usize,
        ood_set: &'a str,
        sweep: crate::fgsm::EpsilonSweep,
    }
    write_json(&args.out, &FgsmReport { target_module: module, ood_set: &ood.0, sweep })
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    ood_set: String,
    module_count: usize,
    best_module: usize,
    best_auroc: f64,
    lhl_module: usize,
    lhl_auroc: f64,
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let (id, ood) = load_score_sets(&args.scores)?;
    ensure_dir(&args.out)?;
    let mut summaries = Vec::new();
    for (name, table) in &ood {
        let profile = auroc_profile(&[(id.clone(), table.clone())])?;
        profile.write_csv(create(&args.out.join(format!("auroc_{name}.csv")))?)?;
        let best = argmax(&profile.mean);
        let lhl = lhl_index(id.modules.iter().map(|m| m.module_index).max().map_or(0, |m| m + 1))?;
        let lhl_col = id.column_of(lhl).ok_or(Error::MissingModule(lhl))?;
        summaries.push(EvalSummary {
            ood_set: name.clone(),
            module_count: profile.modules.len(),
            best_module: profile.modules[best].module_index,
            best_auroc: profile.mean[best],
            lhl_module: lhl,
            lhl_auroc: profile.mean[lhl_col],
        });
    }
    write_json(&args.out.join("summary.json"), &summaries)
}

fn sweep_cmd(args: &SweepArgs) -> Result<()> {
    let bundles = bundles_from_container(&read_container(&args.stats)?)?;
    let (id, ood) = load_score_sets(&args.scores)?;
    let det = BranchDetector::new(&partition_modules(&bundle_meta(&bundles)), &bundles, args.relu_only)?;
    let names = (0..det.branch_count()).map(|b| format!("branch_{b}")).collect();
    let ood_rows = ood.iter().map(|(_, t)| det.score_table(t)).collect::<Result<Vec<_>>>()?;
    let result = grid_search_thresholds(names, &det.score_table(&id)?, &ood_rows, args.resolution)?;
    #[derive(Serialize)]
    struct SweepReport {
        ood_sets: Vec<String>,
        result: crate::eval::GridSearchResult,
    }
    write_json(&args.out, &SweepReport { ood_sets: ood.into_iter().map(|(n, _)| n).collect(), result })
}

fn profile_cmd(args: &ProfileArgs) -> Result<()> {
    let manifest = RunManifest::load(&args.manifest)?;
    let (_, profiles) = run_profile(&manifest)?;
    for (label, p) in &profiles {
        let best = p.argmax();
        println!("{label}: best module {} (AUROC {:.4})", p.modules[best].module_index, p.mean[best]);
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::FitStats(a) => fit_stats_cmd(a),
        Command::Score(a) => score_cmd(a),
        Command::Combine(a) => combine_cmd(a),
        Command::Fgsm(a) => fgsm_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::SweepThresholds(a) => sweep_cmd(a),
        Command::Profile(a) => profile_cmd(a),
    }
}
