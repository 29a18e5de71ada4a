use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use rayon::prelude::*;
use serde::Serialize;
use stqe::analysis::{run_experiment, Axis, StudyReport};
use stqe::loss_train::{enhance_frame, train as train_model, train_from, EpochStats, TrainConfig, TrainManifest};
use stqe::metrics::{evaluate_sequence, RateFrames, RateTable, SequenceReport};
use stqe::network::checkpoint::{self, CheckpointLayout};
use stqe::network::ModelParams;
use stqe::pcdata::{ColorMatrix, ColorMode, Encoding};
use stqe::rmc::recolor as recolor_frame;
use stqe::spatial_index::{brute_force_knn, SpatialIndex};
use stqe::{AttributeVector, Component, FrameTriplet, PointCloud};

use crate::io::{emit_json, file_name, list_ply, read_cloud, read_text, write_cloud};
use crate::{ReadArgs, WriteArgs};

/// Maps `items` in order, on the worker pool when `parallel`.
fn ordered_map<T, U, F>(items: &[T], parallel: bool, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> Result<U> + Sync + Send,
{
    if parallel {
        items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    } else {
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}

#[derive(Serialize)]
struct RecolorSummary<'a> {
    out: &'a Path,
    points: usize,
    reference_points: usize,
    mapped_points: usize,
    unmapped_points: usize,
}

pub fn recolor(
    current: &Path,
    reference: &Path,
    out: &Path,
    provenance: Option<&Path>,
    read: &ReadArgs,
    write: &WriteArgs,
) -> Result<()> {
    let cur = read_cloud(current, read)?;
    let reference_cloud = read_cloud(reference, read)?;
    let v = recolor_frame(&cur, &reference_cloud)?;
    write_cloud(&v.cloud, out, write, read)?;
    if let Some(p) = provenance {
        let text: String = v.provenance.iter().map(|c| format!("{c}\n")).collect();
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    let mapped = v.provenance.iter().filter(|&&c| c > 0).count();
    emit_json(
        &RecolorSummary {
            out,
            points: cur.len(),
            reference_points: reference_cloud.len(),
            mapped_points: mapped,
            unmapped_points: cur.len() - mapped,
        },
        None,
    )
}

#[derive(Serialize)]
struct ModelLog {
    path: PathBuf,
    component: Component,
    param_count: usize,
}

#[derive(Serialize)]
struct ComponentLog {
    component: Component,
    residual_mean_abs: f64,
    residual_max_abs: f64,
    /// Points whose enhanced value left [0, 255] and was clamped.
    clamped_points: usize,
}

#[derive(Serialize)]
struct FrameLog {
    index: usize,
    input: PathBuf,
    output: PathBuf,
    prev: usize,
    next: usize,
    points: usize,
    components: Vec<ComponentLog>,
}

#[derive(Serialize)]
struct EnhanceLog {
    models: Vec<ModelLog>,
    patch_size: usize,
    parallel: bool,
    encoding: Encoding,
    color: ColorMode,
    matrix: ColorMatrix,
    frames: Vec<FrameLog>,
}

/// Reference frame indices of frame `t` in a sequence of `n`; a missing
/// side mirrors the available neighbour.
pub fn neighbours(t: usize, n: usize) -> (usize, usize) {
    let prev = if t > 0 { t - 1 } else { (t + 1).min(n - 1) };
    let next = if t + 1 < n { t + 1 } else { t.saturating_sub(1) };
    (prev, next)
}

#[allow(clippy::too_many_arguments)]
pub fn enhance(
    model_paths: &[PathBuf],
    frame_paths: &[PathBuf],
    component: Option<Component>,
    out: &Path,
    patch_size: usize,
    read: &ReadArgs,
    write: &WriteArgs,
    parallel: bool,
) -> Result<()> {
    ensure!(!frame_paths.is_empty(), "no input frames");
    ensure!(patch_size > 0, "--patch-size must be positive");
    let models: Vec<ModelParams> = model_paths
        .iter()
        .map(|p| checkpoint::load(p).with_context(|| format!("loading model {}", p.display())))
        .collect::<Result<_>>()?;
    let mut seen = BTreeSet::new();
    for m in &models {
        ensure!(seen.insert(m.component.index()), "two models enhance component {}", m.component);
    }
    if let Some(c) = component {
        ensure!(models.len() == 1, "--component applies to a single --model");
        ensure!(
            models[0].component == c,
            "model was trained for {}, asked to enhance {c}",
            models[0].component
        );
    }

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let out_dir = out.canonicalize()?;
    let names: Vec<String> = frame_paths.iter().map(|p| file_name(p)).collect::<Result<_>>()?;
    let unique: BTreeSet<&String> = names.iter().collect();
    ensure!(unique.len() == names.len(), "input frames must have distinct file names");
    for p in frame_paths {
        let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let dir = dir.canonicalize().with_context(|| format!("missing frame {}", p.display()))?;
        ensure!(dir != out_dir, "output directory would overwrite input frame {}", p.display());
    }

    let frames: Vec<PointCloud> = ordered_map(frame_paths, parallel, |_, p| read_cloud(p, read))?;
    let n = frames.len();
    let logs = ordered_map(&frames, parallel, |t, cur| {
        let (p, q) = neighbours(t, n);
        let triplet = FrameTriplet::new(frames[p].clone(), cur.clone(), frames[q].clone())?;
        let mut result = cur.clone();
        let mut components = Vec::with_capacity(models.len());
        for m in &models {
            let e = enhance_frame(&triplet, m.component, m, patch_size, false)
                .with_context(|| format!("enhancing {} of {}", m.component, frame_paths[t].display()))?;
            let base = cur.component(m.component).values;
            let abs: Vec<f64> = e.residual.iter().map(|r| f64::from(r.abs()) * 255.0).collect();
            let clamped = base
                .iter()
                .zip(&e.residual)
                .filter(|(&c, &r)| !(0.0..=255.0).contains(&(c + 255.0 * r)))
                .count();
            components.push(ComponentLog {
                component: m.component,
                residual_mean_abs: abs.iter().sum::<f64>() / abs.len() as f64,
                residual_max_abs: abs.iter().copied().fold(0.0, f64::max),
                clamped_points: clamped,
            });
            let values = e.cloud.component(m.component);
            result = result.with_component(&AttributeVector { values: values.values, component: m.component })?;
        }
        let output = out.join(&names[t]);
        write_cloud(&result, &output, write, read)?;
        Ok(FrameLog { index: t, input: frame_paths[t].clone(), output, prev: p, next: q, points: cur.len(), components })
    })?;

    let log = EnhanceLog {
        models: model_paths
            .iter()
            .zip(&models)
            .map(|(p, m)| ModelLog { path: p.clone(), component: m.component, param_count: m.param_count() })
            .collect(),
        patch_size,
        parallel,
        encoding: write.encoding,
        color: write.color,
        matrix: read.matrix,
        frames: logs,
    };
    emit_json(&log, Some(&out.join("enhance_log.json")))
}

/// Command-line overrides of the JSON training configuration.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Weight of the correlation term in the loss.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Neighbourhood size.
    #[arg(long)]
    k: Option<usize>,
    /// Gaussian kernel variance for neighbour weights.
    #[arg(long)]
    sigma2: Option<f64>,
    /// Feed squared distances to the neighbour-weight kernel.
    #[arg(long)]
    squared_kernel: bool,
    /// Give the two temporal branches separate shallow weights.
    #[arg(long)]
    separate_branches: bool,
}

impl TrainOverrides {
    fn apply(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($($field:ident => $target:expr),*) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set!(
            epochs => c.epochs,
            batch_size => c.batch_size,
            learning_rate => c.learning_rate,
            alpha => c.alpha,
            patch_size => c.patch_size,
            seed => c.seed,
            k => c.model.k,
            sigma2 => c.model.sigma2
        );
        if self.squared_kernel {
            c.model.squared_kernel = true;
        }
        if self.separate_branches {
            c.model.shared_branch = false;
        }
    }
}

#[derive(Serialize)]
struct TrainLog<'a> {
    component: Component,
    manifest: &'a Path,
    init: Option<&'a Path>,
    samples: usize,
    config: &'a TrainConfig,
    param_count: usize,
    history: &'a [EpochStats],
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    out: &'a Path,
    log: &'a Path,
    component: Component,
    epochs: usize,
    first_loss: f64,
    final_loss: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    manifest_path: &Path,
    config_path: Option<&Path>,
    init: Option<&Path>,
    out: &Path,
    log: Option<&Path>,
    overrides: &TrainOverrides,
    read: &ReadArgs,
    parallel: bool,
) -> Result<()> {
    let mut config: TrainConfig = match config_path {
        Some(p) => serde_json::from_str(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig::default(),
    };
    overrides.apply(&mut config);
    config.parallel = parallel;
    let start = match init {
        Some(p) => {
            let params = checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            if params.config != config.model {
                log::warn!("continuing from {}: its model configuration replaces the requested one", p.display());
                config.model = params.config.clone();
            }
            Some(params)
        }
        None => None,
    };
    config.validate()?;

    let manifest = TrainManifest::load(manifest_path).with_context(|| format!("loading {}", manifest_path.display()))?;
    if let Some(p) = &start {
        ensure!(
            p.component == manifest.component,
            "checkpoint was trained for {}, manifest asks for {}",
            p.component,
            manifest.component
        );
    }
    let samples = manifest.read_samples(&read.options())?;
    let result = match start {
        Some(p) => train_from(p, &samples, &config)?,
        None => train_model(&samples, manifest.component, &config)?,
    };
    checkpoint::save(&result.params, out).with_context(|| format!("writing {}", out.display()))?;

    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    });
    emit_json(
        &TrainLog {
            component: manifest.component,
            manifest: manifest_path,
            init,
            samples: samples.len(),
            config: &config,
            param_count: result.params.param_count(),
            history: &result.history,
        },
        Some(&log_path),
    )?;
    emit_json(
        &TrainSummary {
            out,
            log: &log_path,
            component: manifest.component,
            epochs: result.history.len(),
            first_loss: result.history.first().map_or(f64::NAN, |e| e.loss),
            final_loss: result.history.last().map_or(f64::NAN, |e| e.loss),
        },
        None,
    )
}

#[derive(Serialize)]
struct EvalInputs<'a> {
    enhanced: &'a Path,
    anchor: &'a Path,
    original: &'a Path,
    rates: &'a Path,
    frames: Vec<String>,
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    inputs: EvalInputs<'a>,
    #[serde(flatten)]
    report: SequenceReport,
}

/// Frame files of a per-rate directory, checked against the original names.
fn rate_frames(dir: &Path, names: &[String]) -> Result<Vec<PathBuf>> {
    let found = list_ply(dir)?;
    let got: Vec<String> = found.iter().map(|p| file_name(p)).collect::<Result<_>>()?;
    if got != names {
        bail!(
            "{} holds frames {:?}, expected the original frame names {:?}",
            dir.display(),
            got,
            names
        );
    }
    Ok(found)
}

pub fn eval(
    enhanced: &Path,
    anchor: &Path,
    original: &Path,
    rates: &Path,
    out: Option<&Path>,
    read: &ReadArgs,
    parallel: bool,
) -> Result<()> {
    let table = RateTable::parse(&read_text(rates)?).with_context(|| format!("parsing {}", rates.display()))?;
    let original_paths = list_ply(original)?;
    let names: Vec<String> = original_paths.iter().map(|p| file_name(p)).collect::<Result<_>>()?;
    let load = |paths: &[PathBuf]| ordered_map(paths, parallel, |_, p| read_cloud(p, read));
    let originals = load(&original_paths)?;
    let mut per_rate = Vec::with_capacity(table.rates.len());
    for entry in &table.rates {
        let a = rate_frames(&anchor.join(&entry.label), &names)?;
        let e = rate_frames(&enhanced.join(&entry.label), &names)?;
        per_rate.push(RateFrames { entry: entry.clone(), anchor: load(&a)?, enhanced: load(&e)? });
    }
    let report = evaluate_sequence(&per_rate, &originals)?;
    emit_json(
        &EvalOutput { inputs: EvalInputs { enhanced, anchor, original, rates, frames: names }, report },
        out,
    )
}

#[derive(Serialize)]
struct AnalyzeOutput<'a> {
    input: &'a Path,
    points: usize,
    #[serde(flatten)]
    report: StudyReport,
}

pub fn analyze(
    input: &Path,
    g: usize,
    runs: usize,
    seed: u64,
    axes: &[Axis],
    out: Option<&Path>,
    read: &ReadArgs,
) -> Result<()> {
    let pc = read_cloud(input, read)?;
    let report = run_experiment(&pc, g, axes, runs, seed)?;
    for a in &report.axes {
        if let Some(e) = &a.error {
            log::warn!("axis {}: {e}", a.axis);
        }
    }
    emit_json(&AnalyzeOutput { input, points: pc.len(), report }, out)
}

#[derive(Serialize)]
struct KnnReport<'a> {
    input: &'a Path,
    points: usize,
    k: usize,
    queries: usize,
    identical: bool,
    first_mismatch: Option<usize>,
}

/// Returns whether the two searches agree on every query.
pub fn knn_check(input: &Path, k: usize, max_queries: Option<usize>, read: &ReadArgs) -> Result<bool> {
    let pc = read_cloud(input, read)?;
    let geo = pc.geometry();
    let queries = &geo[..max_queries.unwrap_or(geo.len()).min(geo.len())];
    let tree = SpatialIndex::build(geo)?.query_knn(queries, k)?;
    let brute = brute_force_knn(geo, queries, k)?;
    let first_mismatch = (0..queries.len())
        .find(|&i| tree.row(i) != brute.row(i) || tree.row_distances(i) != brute.row_distances(i));
    let identical = first_mismatch.is_none();
    emit_json(
        &KnnReport { input, points: geo.len(), k, queries: queries.len(), identical, first_mismatch },
        None,
    )?;
    Ok(identical)
}

#[derive(Serialize)]
struct DescribeOutput<'a> {
    path: &'a Path,
    #[serde(flatten)]
    layout: CheckpointLayout,
}

pub fn describe_checkpoint(model: &Path) -> Result<()> {
    let bytes = fs::read(model).with_context(|| format!("reading {}", model.display()))?;
    let layout = checkpoint::describe(&bytes).with_context(|| format!("decoding {}", model.display()))?;
    emit_json(&DescribeOutput { path: model, layout }, None)
}
