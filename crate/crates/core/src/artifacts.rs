//! Conversions between engine artifacts and container sections.
//!
//! Layouts (all records little-endian, see [`crate::container`]):
//!
//! * `MODEL "model"`: `i64 [rank]` input shape, `i64 [L, 8]` module table
//!   (`kind, p0, p1, p2, p3, downsamples, n_params, n_buffers`), then every
//!   module's params followed by its buffers as `f64` records.
//! * `DATASET <split>`: `f64 [N, 1, H, W]` images, `i64 [N]` labels,
//!   `i64 [N, 7]` artefact table (`is_ood, kind, row, col, size, thickness,
//!   degenerate`, kind `-1` when absent), `f64 [N]` artefact area fractions.
//! * `EMBEDDINGS module_NNN`: `f32|f64 [N, M]` vectors and `i64 [3]`
//!   (`module_index, kind, downsamples`). Optional `EMBEDDINGS labels`: `i64 [N]`.
//! * `ACTIVATIONS module_NNN`: `f32|f64 [N, ...]` raw activations and the same
//!   `i64 [3]` meta record.
//! * `STATS module_NNN`: `i64 [5]` (`module_index, kind, downsamples, classes,
//!   dim`), `f64 [2]` score mean/std, `f64 [C, M]` means, `f64 [C, M, M]`
//!   covariances, `f64 [C, M, M]` Cholesky factors, `f64 [C, 2]` (λ, count).
//! * `SCORES <set>`: `f64 [N, K]` scores, `i64 [N, K]` argmin classes,
//!   `i64 [K, 3]` module meta.

use nalgebra::{DMatrix, DVector};

use crate::container::{Container, Section, SectionKind, TensorRecord};
use crate::data::{Artefact, ArtefactKind, ImageSample};
use crate::embedding::{embed, EmbeddingSet, ModuleEmbeddings};
use crate::error::{Error, Result};
use crate::net::{build_network, ModuleSpec, ModuleTag, NetworkGraph};
use crate::scoring::{ModuleMeta, ScoreTable};
use crate::stats::{ClassStats, LayerStatsBundle};
use crate::tensor::Tensor;

pub const MODEL_SECTION: &str = "model";
pub const LABELS_SECTION: &str = "labels";

pub fn module_section_name(module_index: usize) -> String {
    format!("module_{module_index:03}")
}

fn bad(what: impl Into<String>) -> Error {
    Error::invalid(what.into())
}

fn to_usize(v: i64, what: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| bad(format!("negative {what}: {v}")))
}

fn expect_dims(rec: &TensorRecord, dims: &[usize], what: &str) -> Result<()> {
    if rec.dims_usize() != dims {
        return Err(bad(format!("{what}: expected dims {dims:?}, found {:?}", rec.dims)));
    }
    Ok(())
}

fn spec_row(spec: &ModuleSpec) -> [i64; 5] {
    let k = spec.tag().code();
    match *spec {
        ModuleSpec::Conv2d { out_channels, kernel, stride, padding } => {
            [k, out_channels as i64, kernel as i64, stride as i64, padding as i64]
        }
        ModuleSpec::ResidualAdd { source } => [k, source as i64, 0, 0, 0],
        ModuleSpec::MaxPool { window } | ModuleSpec::AvgPool { window } => [k, window as i64, 0, 0, 0],
        ModuleSpec::Dense { out_features } => [k, out_features as i64, 0, 0, 0],
        ModuleSpec::BatchNorm | ModuleSpec::ReLU | ModuleSpec::Flatten => [k, 0, 0, 0, 0],
    }
}

fn spec_from_row(row: &[i64], index: usize) -> Result<ModuleSpec> {
    let p = |i: usize| to_usize(row[i], "module parameter");
    Ok(match ModuleTag::from_code(row[0]) {
        ModuleTag::Conv2d => ModuleSpec::Conv2d { out_channels: p(1)?, kernel: p(2)?, stride: p(3)?, padding: p(4)? },
        ModuleTag::BatchNorm => ModuleSpec::BatchNorm,
        ModuleTag::ReLU => ModuleSpec::ReLU,
        ModuleTag::ResidualAdd => ModuleSpec::ResidualAdd { source: p(1)? },
        ModuleTag::MaxPool => ModuleSpec::MaxPool { window: p(1)? },
        ModuleTag::AvgPool => ModuleSpec::AvgPool { window: p(1)? },
        ModuleTag::Flatten => ModuleSpec::Flatten,
        ModuleTag::Dense => ModuleSpec::Dense { out_features: p(1)? },
        ModuleTag::Unknown => {
            return Err(Error::InvalidModule { index, reason: format!("unknown module kind code {}", row[0]) })
        }
    })
}

pub fn model_section(net: &NetworkGraph) -> Result<Section> {
    let input: Vec<i64> = net.input_shape().iter().map(|&d| d as i64).collect();
    let mut records = vec![TensorRecord::i64(&[input.len()], input)?];
    let mut table = Vec::with_capacity(net.len() * 8);
    for layer in net.layers() {
        table.extend(spec_row(&layer.spec));
        table.extend([layer.downsamples as i64, layer.params.len() as i64, layer.buffers.len() as i64]);
    }
    records.push(TensorRecord::i64(&[net.len(), 8], table)?);
    for layer in net.layers() {
        for t in layer.params.iter().chain(&layer.buffers) {
            records.push(TensorRecord::f64(t.shape(), t.data().to_vec())?);
        }
    }
    Ok(Section::new(SectionKind::Model, MODEL_SECTION, records))
}

pub fn model_from_section(section: &Section) -> Result<NetworkGraph> {
    let input: Vec<usize> = section
        .record(0)?
        .as_i64()?
        .iter()
        .map(|&v| to_usize(v, "input dim"))
        .collect::<Result<_>>()?;
    let table_rec = section.record(1)?;
    let dims = table_rec.dims_usize();
    if dims.len() != 2 || dims[1] != 8 {
        return Err(bad(format!("module table must be [L, 8], found {:?}", table_rec.dims)));
    }
    let table = table_rec.as_i64()?;
    let rows: Vec<&[i64]> = table.chunks_exact(8).collect();
    let specs = rows
        .iter()
        .enumerate()
        .map(|(i, r)| spec_from_row(r, i))
        .collect::<Result<Vec<_>>>()?;
    let mut net = build_network(&input, &specs, 0)?;
    let mut next = 2;
    for (i, row) in rows.iter().enumerate() {
        let (np, nb) = (to_usize(row[6], "param count")?, to_usize(row[7], "buffer count")?);
        let mut take = |count: usize| -> Result<Vec<Tensor>> {
            (0..count)
                .map(|_| {
                    let rec = section.record(next)?;
                    next += 1;
                    Tensor::new(rec.dims_usize(), rec.to_f64()?)
                })
                .collect()
        };
        let params = take(np)?;
        let buffers = take(nb)?;
        net.set_params(i, params)?;
        net.set_buffers(i, buffers)?;
        if net.layers()[i].downsamples != (row[5] != 0) {
            return Err(Error::InvalidModule { index: i, reason: "stored downsample flag disagrees with shapes".into() });
        }
    }
    if next != section.records.len() {
        return Err(bad(format!("model section has {} unused records", section.records.len() - next)));
    }
    Ok(net)
}

pub fn dataset_section(name: &str, samples: &[ImageSample]) -> Result<Section> {
    let first = samples.first().ok_or(Error::Empty("dataset split"))?;
    let shape = first.image.shape().to_vec();
    let mut pixels = Vec::with_capacity(samples.len() * first.image.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut table = Vec::with_capacity(samples.len() * 7);
    let mut areas = Vec::with_capacity(samples.len());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch { expected: shape.clone(), actual: s.image.shape().to_vec() });
        }
        pixels.extend_from_slice(s.image.data());
        labels.push(s.label as i64);
        match &s.artefact {
            Some(a) => {
                table.extend([
                    s.is_ood as i64,
                    a.kind.code(),
                    a.position.0 as i64,
                    a.position.1 as i64,
                    a.size as i64,
                    a.thickness as i64,
                    a.degenerate as i64,
                ]);
                areas.push(a.area_fraction);
            }
            None => {
                table.extend([s.is_ood as i64, -1, 0, 0, 0, 0, 0]);
                areas.push(0.0);
            }
        }
    }
    let mut dims = vec![samples.len()];
    dims.extend(&shape);
    Ok(Section::new(
        SectionKind::Dataset,
        name,
        vec![
            TensorRecord::f64(&dims, pixels)?,
            TensorRecord::i64(&[samples.len()], labels)?,
            TensorRecord::i64(&[samples.len(), 7], table)?,
            TensorRecord::f64(&[samples.len()], areas)?,
        ],
    ))
}

pub fn samples_from_section(section: &Section) -> Result<Vec<ImageSample>> {
    let img = section.record(0)?;
    let dims = img.dims_usize();
    let n = *dims.first().ok_or_else(|| bad("dataset images need a sample axis"))?;
    let shape = dims[1..].to_vec();
    let pixels = img.to_f64()?;
    let labels = section.record(1)?;
    expect_dims(labels, &[n], "dataset labels")?;
    let table = section.record(2)?;
    expect_dims(table, &[n, 7], "artefact table")?;
    let areas = section.record(3)?;
    expect_dims(areas, &[n], "artefact areas")?;
    let areas = areas.to_f64()?;
    let per = shape.iter().product::<usize>();
    labels
        .as_i64()?
        .iter()
        .zip(table.as_i64()?.chunks_exact(7))
        .enumerate()
        .map(|(i, (&label, row))| {
            let image = Tensor::new(shape.clone(), pixels[i * per..(i + 1) * per].to_vec())?;
            let artefact = if row[1] < 0 {
                None
            } else {
                Some(Artefact {
                    kind: ArtefactKind::from_code(row[1]).ok_or_else(|| bad(format!("unknown artefact kind {}", row[1])))?,
                    area_fraction: areas[i],
                    position: (to_usize(row[2], "artefact row")?, to_usize(row[3], "artefact col")?),
                    size: to_usize(row[4], "artefact size")?,
                    thickness: to_usize(row[5], "artefact thickness")?,
                    degenerate: row[6] != 0,
                })
            };
            Ok(ImageSample { image, label: to_usize(label, "label")?, is_ood: row[0] != 0, artefact })
        })
        .collect()
}

fn meta_record(module_index: usize, tag: ModuleTag, downsamples: bool) -> Result<TensorRecord> {
    TensorRecord::i64(&[3], vec![module_index as i64, tag.code(), downsamples as i64])
}

fn parse_meta(rec: &TensorRecord) -> Result<(usize, ModuleTag, bool)> {
    expect_dims(rec, &[3], "module meta")?;
    let v = rec.as_i64()?;
    Ok((to_usize(v[0], "module index")?, ModuleTag::from_code(v[1]), v[2] != 0))
}

pub fn embedding_sections(set: &EmbeddingSet) -> Result<Vec<Section>> {
    let mut out = Vec::with_capacity(set.modules.len() + 1);
    for m in &set.modules {
        let dim = m.vectors.first().map_or(0, Vec::len);
        let data: Vec<f64> = m.vectors.concat();
        out.push(Section::new(
            SectionKind::Embeddings,
            module_section_name(m.module_index),
            vec![TensorRecord::f64(&[m.vectors.len(), dim], data)?, meta_record(m.module_index, m.tag, m.downsamples)?],
        ));
    }
    if let Some(labels) = &set.labels {
        out.push(Section::new(
            SectionKind::Embeddings,
            LABELS_SECTION,
            vec![TensorRecord::i64(&[labels.len()], labels.iter().map(|&l| l as i64).collect())?],
        ));
    }
    Ok(out)
}

fn rows_of(rec: &TensorRecord) -> Result<(usize, Vec<f64>)> {
    let n = *rec.dims_usize().first().ok_or_else(|| bad("record needs a sample axis"))?;
    Ok((n, rec.to_f64()?))
}

/// Reads every `EMBEDDINGS` section (f32 or f64) into an embedding set sorted by module index.
pub fn embeddings_from_container(container: &Container) -> Result<EmbeddingSet> {
    let mut modules = Vec::new();
    let mut labels = None;
    for s in container.of_kind(SectionKind::Embeddings) {
        if s.name == LABELS_SECTION {
            let v = s.record(0)?.as_i64()?;
            labels = Some(v.iter().map(|&l| to_usize(l, "label")).collect::<Result<Vec<_>>>()?);
            continue;
        }
        let rec = s.record(0)?;
        let dims = rec.dims_usize();
        if dims.len() != 2 {
            return Err(bad(format!("EMBEDDINGS '{}' must be [N, M], found {:?}", s.name, rec.dims)));
        }
        let (module_index, tag, downsamples) = parse_meta(s.record(1)?)?;
        let data = rec.to_f64()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stored embedding"));
        }
        let vectors = if dims[1] == 0 { vec![Vec::new(); dims[0]] } else { data.chunks_exact(dims[1]).map(<[f64]>::to_vec).collect() };
        modules.push(ModuleEmbeddings { module_index, tag, downsamples, vectors });
    }
    finish_set(modules, labels)
}

fn finish_set(mut modules: Vec<ModuleEmbeddings>, labels: Option<Vec<usize>>) -> Result<EmbeddingSet> {
    if modules.is_empty() {
        return Err(Error::MissingArtifact("EMBEDDINGS or ACTIVATIONS sections".into()));
    }
    modules.sort_by_key(|m| m.module_index);
    let n = modules[0].vectors.len();
    if let Some(bad_module) = modules.iter().find(|m| m.vectors.len() != n) {
        return Err(Error::DimensionMismatch { expected: n, actual: bad_module.vectors.len() });
    }
    if labels.as_ref().is_some_and(|l| l.len() != n) {
        return Err(Error::DimensionMismatch { expected: n, actual: labels.map_or(0, |l| l.len()) });
    }
    Ok(EmbeddingSet { modules, labels })
}

pub fn activation_section(module_index: usize, tag: ModuleTag, downsamples: bool, activations: &[Tensor]) -> Result<Section> {
    let first = activations.first().ok_or(Error::Empty("activations"))?;
    let mut dims = vec![activations.len()];
    dims.extend(first.shape());
    let data: Vec<f64> = activations.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Section::new(
        SectionKind::Activations,
        module_section_name(module_index),
        vec![TensorRecord::f64(&dims, data)?, meta_record(module_index, tag, downsamples)?],
    ))
}

/// Embeds raw `ACTIVATIONS` sections with the engine's spatial mean.
pub fn embeddings_from_activations(container: &Container) -> Result<EmbeddingSet> {
    let mut modules = Vec::new();
    for s in container.of_kind(SectionKind::Activations) {
        let rec = s.record(0)?;
        let (n, data) = rows_of(rec)?;
        let shape = rec.dims_usize()[1..].to_vec();
        let per: usize = shape.iter().product();
        let (module_index, tag, downsamples) = parse_meta(s.record(1)?)?;
        let vectors = (0..n)
            .map(|i| embed(&Tensor::new(shape.clone(), data[i * per..(i + 1) * per].to_vec())?))
            .collect::<Result<Vec<_>>>()?;
        modules.push(ModuleEmbeddings { module_index, tag, downsamples, vectors });
    }
    let labels = container
        .find(SectionKind::Embeddings, LABELS_SECTION)
        .map(|s| s.record(0)?.as_i64()?.iter().map(|&l| to_usize(l, "label")).collect::<Result<Vec<_>>>())
        .transpose()?;
    finish_set(modules, labels)
}

pub fn stats_section(bundle: &LayerStatsBundle) -> Result<Section> {
    let c = bundle.classes.len();
    let m = bundle.dim();
    let mut means = Vec::with_capacity(c * m);
    let mut covs = Vec::with_capacity(c * m * m);
    let mut chols = Vec::with_capacity(c * m * m);
    let mut extra = Vec::with_capacity(c * 2);
    for class in &bundle.classes {
        means.extend(class.mean.iter());
        // row-major
        covs.extend(class.covariance.transpose().iter());
        chols.extend(class.cholesky.transpose().iter());
        extra.extend([class.shrinkage, class.count as f64]);
    }
    Ok(Section::new(
        SectionKind::Stats,
        module_section_name(bundle.module_index),
        vec![
            TensorRecord::i64(
                &[5],
                vec![bundle.module_index as i64, bundle.tag.code(), bundle.downsamples as i64, c as i64, m as i64],
            )?,
            TensorRecord::f64(&[2], vec![bundle.norm_mean, bundle.norm_std])?,
            TensorRecord::f64(&[c, m], means)?,
            TensorRecord::f64(&[c, m, m], covs)?,
            TensorRecord::f64(&[c, m, m], chols)?,
            TensorRecord::f64(&[c, 2], extra)?,
        ],
    ))
}

pub fn bundle_from_section(section: &Section) -> Result<LayerStatsBundle> {
    let meta = section.record(0)?;
    expect_dims(meta, &[5], "stats meta")?;
    let v = meta.as_i64()?;
    let (module_index, c, m) = (to_usize(v[0], "module index")?, to_usize(v[3], "class count")?, to_usize(v[4], "dim")?);
    let norm = section.record(1)?;
    expect_dims(norm, &[2], "score normalization")?;
    let norm = norm.to_f64()?;
    let means = section.record(2)?;
    expect_dims(means, &[c, m], "class means")?;
    let covs = section.record(3)?;
    expect_dims(covs, &[c, m, m], "covariances")?;
    let chols = section.record(4)?;
    expect_dims(chols, &[c, m, m], "Cholesky factors")?;
    let extra = section.record(5)?;
    expect_dims(extra, &[c, 2], "shrinkage and counts")?;
    let (means, covs, chols, extra) = (means.to_f64()?, covs.to_f64()?, chols.to_f64()?, extra.to_f64()?);
    let classes = (0..c)
        .map(|k| {
            let mut class = ClassStats::from_cholesky(
                k,
                extra[2 * k + 1] as usize,
                DVector::from_row_slice(&means[k * m..(k + 1) * m]),
                DMatrix::from_row_slice(m, m, &chols[k * m * m..(k + 1) * m * m]),
                extra[2 * k],
            )?;
            class.covariance = DMatrix::from_row_slice(m, m, &covs[k * m * m..(k + 1) * m * m]);
            Ok(class)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerStatsBundle {
        module_index,
        tag: ModuleTag::from_code(v[1]),
        downsamples: v[2] != 0,
        classes,
        norm_mean: norm[0],
        norm_std: norm[1],
    })
}

pub fn stats_container(bundles: &[LayerStatsBundle]) -> Result<Container> {
    Ok(Container::new(bundles.iter().map(stats_section).collect::<Result<_>>()?))
}

pub fn bundles_from_container(container: &Container) -> Result<Vec<LayerStatsBundle>> {
    let mut out: Vec<LayerStatsBundle> = container
        .of_kind(SectionKind::Stats)
        .map(bundle_from_section)
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::MissingArtifact("STATS sections".into()));
    }
    out.sort_by_key(|b| b.module_index);
    Ok(out)
}

pub fn scores_section(name: &str, table: &ScoreTable) -> Result<Section> {
    let (n, k) = (table.sample_count(), table.modules.len());
    let meta: Vec<i64> = table
        .modules
        .iter()
        .flat_map(|m| [m.module_index as i64, m.tag.code(), m.downsamples as i64])
        .collect();
    Ok(Section::new(
        SectionKind::Scores,
        name,
        vec![
            TensorRecord::f64(&[n, k], table.scores.concat())?,
            TensorRecord::i64(&[n, k], table.argmin.iter().flatten().map(|&a| a as i64).collect())?,
            TensorRecord::i64(&[k, 3], meta)?,
        ],
    ))
}

pub fn scores_from_section(section: &Section) -> Result<ScoreTable> {
    let meta = section.record(2)?;
    let k = *meta.dims_usize().first().ok_or_else(|| bad("score meta needs a module axis"))?;
    expect_dims(meta, &[k, 3], "score meta")?;
    let modules = meta
        .as_i64()?
        .chunks_exact(3)
        .map(|r| Ok(ModuleMeta { module_index: to_usize(r[0], "module index")?, tag: ModuleTag::from_code(r[1]), downsamples: r[2] != 0 }))
        .collect::<Result<Vec<_>>>()?;
    let scores_rec = section.record(0)?;
    let (n, scores) = rows_of(scores_rec)?;
    expect_dims(scores_rec, &[n, k], "scores")?;
    let argmin_rec = section.record(1)?;
    expect_dims(argmin_rec, &[n, k], "argmin classes")?;
    let argmin = argmin_rec.as_i64()?.iter().map(|&a| to_usize(a, "class")).collect::<Result<Vec<_>>>()?;
    let split = |v: &[f64]| -> Vec<Vec<f64>> { if k == 0 { vec![Vec::new(); n] } else { v.chunks_exact(k).map(<[f64]>::to_vec).collect() } };
    Ok(ScoreTable {
        modules,
        scores: split(&scores),
        argmin: if k == 0 { vec![Vec::new(); n] } else { argmin.chunks_exact(k).map(<[usize]>::to_vec).collect() },
    })
}
