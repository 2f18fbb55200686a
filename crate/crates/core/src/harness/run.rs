//! Runs one [`ExperimentConfig`] end to end: resolve the model, load the
//! data, run the task and write its report.
//!
//! Everything written is a pure function of the config and its master
//! seed. The echoed config omits `out` and `workers`, so reports are
//! byte-identical across output locations and worker counts.

use std::fs;
use std::path::{Path, PathBuf};

use diffrep_tensor::rng::derive_seed;
use diffrep_tensor::Tensor;
use serde_json::json;

use crate::analysis::{
    cka_grid, grid_head_seed, grid_search, knn_classify, CkaAxis, GridReport, Split,
};
use crate::ddpm::{generate, NoiseSchedule, ScheduleParams};
use crate::diffeed::{build_feedback_net, choose_final_block, make_feedback_plan, DifFeedProbe};
use crate::error::{Error, Result};
use crate::features::{
    fit_standardizers, ExtractedFeatures, FeatureSource, LiveProbe, NoisedImages, Standardized,
};
use crate::harness::checkpoint::{load_checkpoint, load_features, save_features};
use crate::harness::config::{CkaAxisKind, DataSpec, DiffeedTask, ExperimentConfig, Task};
use crate::harness::data::{
    load_image_directory, synthesize_dataset, train_eval_split, DataSource, Dataset,
    DatasetDescriptor,
};
use crate::harness::report::{cell, curve_svg, emit_report, heatmap_svg, Figure, Table};
use crate::harness::train::train_diffusion;
use crate::heads::{
    build_difformer, build_head, train_probe, BlockInput, DifFormerConfig, ProbeMode, ProbeReport,
};
use crate::unet::{build_unet, DenoiserModel};

/// What a run produced.
#[derive(Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub result: serde_json::Value,
}

struct Outcome {
    result: serde_json::Value,
    tables: Vec<Table>,
    figures: Vec<Figure>,
}

impl Outcome {
    fn new(result: serde_json::Value) -> Self {
        Self {
            result,
            tables: Vec::new(),
            figures: Vec::new(),
        }
    }
}

/// Run `config`, writing into `out`. `config.workers` sizes the worker
/// pool (0 or absent = one per core).
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<RunOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Invalid(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_in_pool(config, out))
}

fn run_in_pool(config: &ExperimentConfig, out: &Path) -> Result<RunOutput> {
    let mut echoed = config.clone();
    echoed.out = None;
    echoed.workers = None;
    let config_toml = echoed.to_toml()?;

    let (model, schedule_params, model_info) = resolve_model(config)?;
    let schedule = schedule_params.build()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut outcome = match config.task {
        Task::TrainDiffusion => run_train(config, model, &schedule_params, out)?,
        Task::Sample => run_sample(config, &model, &schedule, out)?,
        Task::Extract => run_extract(config, &model, &schedule, out)?,
        Task::Probe => run_probe(config, model, &schedule)?,
        Task::Difformer => run_difformer(config, &model, &schedule)?,
        Task::Diffeed => run_diffeed(config, &model, &schedule)?,
        Task::Cka => run_cka(config, &model, &schedule)?,
        Task::Knn => run_knn(config, &model, &schedule)?,
        Task::Grid => run_grid(config, &model, &schedule)?,
    };
    if let serde_json::Value::Object(map) = &mut outcome.result {
        map.insert("model".into(), model_info);
        map.insert(
            "schedule".into(),
            serde_json::to_value(&schedule_params).unwrap_or_default(),
        );
    }
    let resolved = out.join("config.resolved.toml");
    fs::write(&resolved, &config_toml).map_err(|e| Error::io(&resolved, e))?;
    let mut files = emit_report(
        out,
        config.task.name(),
        config.seed,
        &config_toml,
        outcome.result.clone(),
        &outcome.tables,
        &outcome.figures,
    )?;
    files.push(resolved);
    Ok(RunOutput {
        dir: out.to_path_buf(),
        files,
        result: outcome.result,
    })
}

/// The model named by the config: a checkpoint, an explicit U-Net config,
/// or a preset initialized from `init_seed` (default: the master seed).
pub fn resolve_model(
    config: &ExperimentConfig,
) -> Result<(DenoiserModel, ScheduleParams, serde_json::Value)> {
    if let Some(path) = &config.model.checkpoint {
        let loaded = load_checkpoint(path)?;
        let info = json!({
            "source": "checkpoint",
            "checkpoint": path,
            "step": loaded.step,
            "parameters": loaded.model.parameter_count(),
        });
        return Ok((loaded.model, loaded.schedule, info));
    }
    let unet = config.unet()?;
    let seed = config.model.init_seed.unwrap_or(config.seed);
    let model = build_unet(&unet, seed)?;
    let info = json!({
        "source": if config.model.unet.is_some() { "config" } else { "preset" },
        "preset": config.model.preset,
        "init_seed": seed,
        "parameters": model.parameter_count(),
    });
    Ok((model, config.schedule.clone(), info))
}

/// Load the dataset described by `spec` at the model's image size and
/// apply its label file. Returns the dataset and any per-file warnings.
pub fn load_dataset(spec: &DataSpec, image_size: usize) -> Result<(Dataset, Vec<String>)> {
    let (mut dataset, warnings) = match &spec.source {
        DataSource::Synthetic(s) => {
            if s.size != image_size {
                return Err(Error::CountMismatch {
                    what: "synthetic image size vs model image size",
                    left: s.size,
                    right: image_size,
                });
            }
            (synthesize_dataset(s)?, Vec::new())
        }
        DataSource::ImageDirectory { path, flip } => {
            let loaded = load_image_directory(path, image_size, *flip)?;
            (loaded.dataset, loaded.warnings)
        }
        DataSource::PackedBinary { path } => {
            (load_packed(path, &spec.source, image_size)?, Vec::new())
        }
    };
    if let Some(path) = &spec.labels_file {
        let labels = read_labels(path)?;
        if labels.len() != dataset.len() {
            return Err(Error::CountMismatch {
                what: "label file entries vs images",
                left: labels.len(),
                right: dataset.len(),
            });
        }
        dataset.descriptor.classes = labels.iter().max().map_or(0, |m| m + 1);
        dataset.descriptor.class_names = (0..dataset.descriptor.classes)
            .map(|k| k.to_string())
            .collect();
        dataset.labels = labels;
    }
    Ok((dataset, warnings))
}

fn load_packed(path: &Path, source: &DataSource, image_size: usize) -> Result<Dataset> {
    let (tensors, labels, _) = load_features(path)?;
    let images = tensors
        .into_iter()
        .find(|(n, _)| n == "images")
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Format {
            what: "packed dataset",
            reason: "no `images` tensor".into(),
        })?;
    let expected = [labels.len(), 3, image_size, image_size];
    if images.shape() != expected {
        return Err(Error::shape("packed images", &expected, images.shape()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let descriptor = DatasetDescriptor {
        source: source.clone(),
        image_size,
        classes,
        class_names: (0..classes).map(|k| k.to_string()).collect(),
        count: labels.len(),
        range: (-1.0, 1.0),
    };
    Ok(Dataset {
        images,
        labels,
        descriptor,
    })
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse::<usize>().map_err(|_| Error::Format {
                what: "label file",
                reason: format!(
                    "{}: entry {} ({l:?}) is not a class index",
                    path.display(),
                    i + 1
                ),
            })
        })
        .collect()
}

/// The dataset with its stratified train/eval split.
struct Data {
    set: Dataset,
    train: Vec<usize>,
    eval: Vec<usize>,
    warnings: Vec<String>,
}

impl Data {
    fn train_images(&self) -> Tensor {
        self.set.images.gather_batch(&self.train)
    }

    fn eval_images(&self) -> Tensor {
        self.set.images.gather_batch(&self.eval)
    }

    fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|&i| self.set.labels[i]).collect()
    }

    fn eval_labels(&self) -> Vec<usize> {
        self.eval.iter().map(|&i| self.set.labels[i]).collect()
    }

    fn has_eval(&self) -> bool {
        !self.eval.is_empty()
    }

    fn classes(&self) -> usize {
        self.set
            .classes()
            .max(self.set.labels.iter().max().map_or(0, |m| m + 1))
    }

    fn describe(&self) -> serde_json::Value {
        json!({
            "descriptor": self.set.descriptor,
            "train": self.train.len(),
            "eval": self.eval.len(),
            "warnings": self.warnings,
        })
    }
}

fn data(config: &ExperimentConfig, model: &DenoiserModel) -> Result<Data> {
    let spec = config.data.as_ref().ok_or_else(|| Error::Format {
        what: "config",
        reason: format!("task {} needs a [data] table", config.task.name()),
    })?;
    let (set, warnings) = load_dataset(spec, model.config.image_size)?;
    if set.is_empty() {
        return Err(Error::Invalid("the dataset is empty".into()));
    }
    let (train, eval) = train_eval_split(&set.labels, spec.eval_fraction, config.seed)?;
    Ok(Data {
        set,
        train,
        eval,
        warnings,
    })
}

fn with_data(mut result: serde_json::Value, data: &Data) -> serde_json::Value {
    if let serde_json::Value::Object(map) = &mut result {
        map.insert("data".into(), data.describe());
    }
    result
}

fn epoch_table(report: &ProbeReport) -> Table {
    let mut t = Table::new("epochs", &["epoch", "lr", "loss"]);
    for (i, (lr, loss)) in report.lr_trace.iter().zip(&report.epoch_losses).enumerate() {
        t.push(vec![(i + 1).to_string(), lr.to_string(), loss.to_string()]);
    }
    t
}

fn probe_outcome(report: ProbeReport, data: &Data) -> Outcome {
    let mut outcome = Outcome::new(with_data(json!({ "probe": report }), data));
    outcome.tables.push(epoch_table(&report));
    outcome.figures.push(Figure {
        name: "loss".into(),
        svg: curve_svg("probe loss per epoch", &report.epoch_losses),
    });
    outcome
}

fn run_train(
    config: &ExperimentConfig,
    mut model: DenoiserModel,
    schedule: &ScheduleParams,
    out: &Path,
) -> Result<Outcome> {
    let data = data(config, &model)?;
    let train_config = config.train.clone().unwrap_or_default();
    let dir = out.join("checkpoints");
    let report = train_diffusion(
        &mut model,
        schedule,
        &data.train_images(),
        &train_config,
        config.seed,
        Some(&dir),
    )?;
    let names: Vec<String> = report
        .checkpoints
        .iter()
        .filter_map(|p| p.strip_prefix(out).ok())
        .map(|p| p.display().to_string())
        .collect();
    let mut table = Table::new("loss", &["step", "loss", "running"]);
    for (i, (l, r)) in report.losses.iter().zip(&report.running).enumerate() {
        table.push(vec![(i + 1).to_string(), l.to_string(), r.to_string()]);
    }
    let result = json!({
        "steps": train_config.steps,
        "train": train_config,
        "initial_running_loss": report.initial_running(),
        "final_running_loss": report.final_running(),
        "checkpoints": names,
    });
    let mut outcome = Outcome::new(with_data(result, &data));
    outcome.tables.push(table);
    outcome.figures.push(Figure {
        name: "loss".into(),
        svg: curve_svg("running training loss", &report.running),
    });
    Ok(outcome)
}

fn run_sample(
    config: &ExperimentConfig,
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    out: &Path,
) -> Result<Outcome> {
    let task = config.section(&config.sample)?;
    if task.count == 0 {
        return Err(Error::Parameter {
            field: "sample.count",
            reason: "must be positive".into(),
        });
    }
    let shape = [&[task.count][..], &model.image_shape()[..]].concat();
    let images = generate(
        model,
        schedule,
        &shape,
        derive_seed(config.seed, "sample", 0),
    )?;
    let path = out.join("samples.bin");
    save_features(
        &path,
        &[("images".into(), images.clone())],
        &vec![0; task.count],
        json!({ "content": "samples" }),
    )?;
    let grid = out.join("samples.png");
    write_png_grid(&grid, &images)?;
    let data = images.data();
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let std = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    Ok(Outcome::new(json!({
        "count": task.count,
        "files": ["samples.bin", "samples.png"],
        "pixel_mean": mean,
        "pixel_std": std,
        "pixel_min": lo,
        "pixel_max": hi,
    })))
}

/// Tile `[N, 3, S, S]` images in `[-1, 1]` into one row-major PNG.
fn write_png_grid(path: &Path, images: &Tensor) -> Result<()> {
    let (n, s) = (images.dim(0), images.dim(2));
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols);
    let mut canvas = image::RgbImage::new((cols * s) as u32, (rows * s) as u32);
    for (k, img) in images.data().chunks(3 * s * s).enumerate() {
        let (ox, oy) = ((k % cols) * s, (k / cols) * s);
        for y in 0..s {
            for x in 0..s {
                let px = |c: usize| {
                    ((img[c * s * s + y * s + x].clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
                };
                canvas.put_pixel(
                    (ox + x) as u32,
                    (oy + y) as u32,
                    image::Rgb([px(0), px(1), px(2)]),
                );
            }
        }
    }
    canvas.save(path).map_err(|e| Error::Format {
        what: "png",
        reason: e.to_string(),
    })
}

fn run_extract(
    config: &ExperimentConfig,
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    out: &Path,
) -> Result<Outcome> {
    let task = config.section(&config.extract)?;
    let data = data(config, model)?;
    let taps: Vec<(usize, usize)> = task.blocks.iter().map(|&b| (task.t, b)).collect();
    let source = ExtractedFeatures::new(
        model,
        schedule,
        data.set.images.clone(),
        data.set.labels.clone(),
        taps,
        config.seed,
    )?
    .pooled(task.pool);
    let maps = source.extract_all(0)?;
    let named: Vec<(String, Tensor)> = task
        .blocks
        .iter()
        .zip(maps)
        .map(|(b, m)| (format!("t{}-b{b}", task.t), m))
        .collect();
    let mut table = Table::new("features", &["name", "t", "block", "shape"]);
    for ((name, m), b) in named.iter().zip(&task.blocks) {
        table.push(vec![
            name.clone(),
            task.t.to_string(),
            b.to_string(),
            format!("{:?}", m.shape()),
        ]);
    }
    let meta = json!({ "t": task.t, "blocks": task.blocks, "pool": task.pool, "seed": config.seed, "noise": "fixed" });
    save_features(
        &out.join("features.bin"),
        &named,
        &data.set.labels,
        meta.clone(),
    )?;
    let mut outcome = Outcome::new(with_data(
        json!({ "file": "features.bin", "extracted": meta }),
        &data,
    ));
    outcome.tables.push(table);
    Ok(outcome)
}

fn run_probe(
    config: &ExperimentConfig,
    model: DenoiserModel,
    schedule: &NoiseSchedule,
) -> Result<Outcome> {
    let task = config.section(&config.probe)?;
    let data = data(config, &model)?;
    let entry = model.catalog.get(task.block)?.clone();
    let side = task.pool.map_or(entry.spatial, |p| p.min(entry.spatial));
    let mut head = build_head(
        &task.head,
        &[entry.channels, side, side],
        data.classes(),
        grid_head_seed(config.seed),
    )?;
    let report = match task.mode {
        ProbeMode::Frozen => {
            let taps = vec![(task.t, task.block)];
            let mut train = ExtractedFeatures::new(
                &model,
                schedule,
                data.train_images(),
                data.train_labels(),
                taps.clone(),
                config.seed,
            )?
            .with_ids(data.train.clone())
            .pooled(task.pool)
            .fresh(task.fresh_noise);
            let mut eval = ExtractedFeatures::new(
                &model,
                schedule,
                data.eval_images(),
                data.eval_labels(),
                taps,
                config.seed,
            )?
            .with_ids(data.eval.clone())
            .pooled(task.pool);
            if task.standardize {
                let maps = fit_standardizers(&mut train)?;
                let mut train = Standardized {
                    inner: train,
                    maps: maps.clone(),
                };
                let mut eval = Standardized { inner: eval, maps };
                let eval: Option<&mut dyn FeatureSource> = if data.has_eval() {
                    Some(&mut eval)
                } else {
                    None
                };
                train_probe(
                    &mut head,
                    &mut train,
                    eval,
                    &task.protocol,
                    task.mode,
                    config.seed,
                )?
            } else {
                let eval: Option<&mut dyn FeatureSource> = if data.has_eval() {
                    Some(&mut eval)
                } else {
                    None
                };
                train_probe(
                    &mut head,
                    &mut train,
                    eval,
                    &task.protocol,
                    task.mode,
                    config.seed,
                )?
            }
        }
        ProbeMode::Finetune if task.standardize => {
            return Err(Error::Parameter {
                field: "probe.standardize",
                reason: "only applies to frozen features".into(),
            })
        }
        ProbeMode::Finetune => {
            let mut train = NoisedImages::new(
                schedule,
                data.train_images(),
                data.train_labels(),
                task.t,
                config.seed,
            )?
            .with_ids(data.train.clone())
            .fresh(task.fresh_noise);
            let mut eval = NoisedImages::new(
                schedule,
                data.eval_images(),
                data.eval_labels(),
                task.t,
                config.seed,
            )?
            .with_ids(data.eval.clone());
            let mut live = LiveProbe::new(model, head, task.t, task.block, task.pool)?;
            let eval: Option<&mut dyn FeatureSource> = if data.has_eval() {
                Some(&mut eval)
            } else {
                None
            };
            train_probe(
                &mut live,
                &mut train,
                eval,
                &task.protocol,
                task.mode,
                config.seed,
            )?
        }
    };
    Ok(probe_outcome(report, &data))
}

fn run_difformer(
    config: &ExperimentConfig,
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
) -> Result<Outcome> {
    let task = config.section(&config.difformer)?;
    let data = data(config, model)?;
    let blocks = task
        .blocks
        .iter()
        .map(|&b| {
            model.catalog.get(b).map(|e| BlockInput {
                block: b,
                channels: e.channels,
                side: e.spatial,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fusion = DifFormerConfig {
        times: task.times.clone(),
        blocks,
        head: task.head.clone(),
        num_classes: data.classes(),
    };
    let mut head = build_difformer(&fusion, grid_head_seed(config.seed))?;
    let taps: Vec<(usize, usize)> = task
        .times
        .iter()
        .flat_map(|&t| task.blocks.iter().map(move |&b| (t, b)))
        .collect();
    let mut train = ExtractedFeatures::new(
        model,
        schedule,
        data.train_images(),
        data.train_labels(),
        taps.clone(),
        config.seed,
    )?
    .with_ids(data.train.clone())
    .fresh(task.fresh_noise);
    let mut eval = ExtractedFeatures::new(
        model,
        schedule,
        data.eval_images(),
        data.eval_labels(),
        taps,
        config.seed,
    )?
    .with_ids(data.eval.clone());
    let eval: Option<&mut dyn FeatureSource> = if data.has_eval() {
        Some(&mut eval)
    } else {
        None
    };
    let report = train_probe(
        &mut head,
        &mut train,
        eval,
        &task.protocol,
        ProbeMode::Frozen,
        config.seed,
    )?;
    let mut outcome = probe_outcome(report, &data);
    if let serde_json::Value::Object(map) = &mut outcome.result {
        map.insert(
            "pre_classifier_dim".into(),
            fusion.pre_classifier_dim().into(),
        );
        map.insert("tokens_per_time".into(), fusion.tokens_per_time().into());
    }
    Ok(outcome)
}

/// Train a feedback probe for `final_block`; `learn = false` keeps the
/// feedback at its zero initialization.
fn train_diffeed(
    config: &ExperimentConfig,
    task: &DiffeedTask,
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    data: &Data,
    final_block: usize,
    learn: bool,
) -> Result<ProbeReport> {
    let plan = make_feedback_plan(task.strategy, &model.catalog, final_block, task.t)?;
    let net = build_feedback_net(
        &plan,
        &model.catalog,
        derive_seed(config.seed, "feedback", 0),
    )?;
    let mut probe = DifFeedProbe::new(
        model,
        net,
        task.head.clone(),
        data.classes(),
        grid_head_seed(config.seed),
    )?;
    probe.train_feedback = learn;
    let mut train = NoisedImages::new(
        schedule,
        data.train_images(),
        data.train_labels(),
        task.t,
        config.seed,
    )?
    .with_ids(data.train.clone())
    .fresh(task.fresh_noise);
    let mut eval = NoisedImages::new(
        schedule,
        data.eval_images(),
        data.eval_labels(),
        task.t,
        config.seed,
    )?
    .with_ids(data.eval.clone());
    let eval: Option<&mut dyn FeatureSource> = if data.has_eval() {
        Some(&mut eval)
    } else {
        None
    };
    train_probe(
        &mut probe,
        &mut train,
        eval,
        &task.protocol,
        ProbeMode::Frozen,
        config.seed,
    )
}

fn score(report: &ProbeReport) -> f64 {
    report.eval.unwrap_or(report.train).top1
}

fn run_diffeed(
    config: &ExperimentConfig,
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
) -> Result<Outcome> {
    let task = config.section(&config.diffeed)?;
    let data = data(config, model)?;
    let mut tables = Vec::new();
    let mut sweep_json = serde_json::Value::Null;
    let final_block = match &task.candidates {
        Some(candidates) => {
            let sweep = choose_final_block(&model.catalog, candidates, |b| {
                train_diffeed(config, task, model, schedule, &data, b, true).map(|r| score(&r))
            })?;
            let mut t = Table::new("final-blocks", &["block", "top1"]);
            for row in &sweep.rows {
                t.push(vec![row.block.to_string(), row.accuracy.to_string()]);
            }
            tables.push(t);
            sweep_json = serde_json::to_value(&sweep).unwrap_or_default();
            sweep.selected
        }
        None => task.final_block,
    };
    let report = train_diffeed(config, task, model, schedule, &data, final_block, true)?;
    let baseline = if task.baseline {
        Some(train_diffeed(
            config,
            task,
            model,
            schedule,
            &data,
            final_block,
            false,
        )?)
    } else {
        None
    };
    if let Some(b) = &baseline {
        let mut t = Table::new("baseline", &["variant", "top1", "top5"]);
        for (name, r) in [("feedback", &report), ("zero-feedback", b)] {
            let acc = r.eval.unwrap_or(r.train);
            t.push(vec![
                name.into(),
                acc.top1.to_string(),
                acc.top5.to_string(),
            ]);
        }
        tables.push(t);
    }
    let mut outcome = probe_outcome(report, &data);
    if let serde_json::Value::Object(map) = &mut outcome.result {
        map.insert("final_block".into(), final_block.into());
        map.insert("sweep".into(), sweep_json);
        map.insert(
            "zero_feedback_baseline".into(),
            serde_json::to_value(&baseline).unwrap_or_default(),
        );
    }
    outcome.tables.extend(tables);
    Ok(outcome)
}

fn run_cka(
    config: &ExperimentConfig,
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
) -> Result<Outcome> {
    let task = config.section(&config.cka)?;
    let data = data(config, model)?;
    let pool = if data.has_eval() {
        data.eval.clone()
    } else {
        data.train.clone()
    };
    let ids: Vec<usize> = pool
        .into_iter()
        .take(task.samples.unwrap_or(usize::MAX))
        .collect();
    let images = data.set.images.gather_batch(&ids);
    let need_t = || {
        task.t.ok_or(Error::Parameter {
            field: "cka.t",
            reason: "required for this axis".into(),
        })
    };
    let axis = match task.axis {
        CkaAxisKind::Blocks => CkaAxis::Blocks {
            t: need_t()?,
            blocks: task.blocks.clone(),
        },
        CkaAxisKind::Timesteps => CkaAxis::Timesteps {
            block: task.block.ok_or(Error::Parameter {
                field: "cka.block",
                reason: "required for the timestep axis".into(),
            })?,
            times: task.times.clone(),
        },
        CkaAxisKind::External => {
            let path = task.features.as_ref().ok_or(Error::Parameter {
                field: "cka.features",
                reason: "required for the external axis".into(),
            })?;
            let (tensors, labels, _) = load_features(path)?;
            if labels.len() != data.set.len() {
                return Err(Error::CountMismatch {
                    what: "feature store rows vs images",
                    left: labels.len(),
                    right: data.set.len(),
                });
            }
            let features = tensors
                .into_iter()
                .map(|(n, t)| (n, t.gather_batch(&ids)))
                .collect();
            CkaAxis::External {
                t: need_t()?,
                blocks: task.blocks.clone(),
                features,
            }
        }
    };
    let matrix = cka_grid(model, schedule, &images, &ids, &axis, config.seed)?;
    let header: Vec<&str> = std::iter::once("row")
        .chain(matrix.cols.iter().map(String::as_str))
        .collect();
    let mut table = Table::new("cka", &header);
    for (r, values) in matrix.rows.iter().zip(&matrix.values) {
        table.push(
            std::iter::once(r.clone())
                .chain(values.iter().map(|v| v.to_string()))
                .collect(),
        );
    }
    let cells: Vec<Vec<Option<f64>>> = matrix
        .values
        .iter()
        .map(|r| r.iter().map(|&v| Some(v)).collect())
        .collect();
    let figure = Figure {
        name: "cka".into(),
        svg: heatmap_svg("linear CKA", &matrix.rows, &matrix.cols, &cells, (0.0, 1.0)),
    };
    let mut outcome = Outcome::new(with_data(json!({ "cka": matrix }), &data));
    outcome.tables.push(table);
    outcome.figures.push(figure);
    Ok(outcome)
}

fn run_knn(
    config: &ExperimentConfig,
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
) -> Result<Outcome> {
    let task = config.section(&config.knn)?;
    let data = data(config, model)?;
    if !data.has_eval() {
        return Err(Error::Parameter {
            field: "data.eval_fraction",
            reason: "kNN needs an evaluation split".into(),
        });
    }
    let taps = vec![(task.t, task.block)];
    let flat = |t: Tensor| {
        let n = t.dim(0);
        t.reshape([n, t.numel() / n.max(1)])
    };
    let train = ExtractedFeatures::new(
        model,
        schedule,
        data.train_images(),
        data.train_labels(),
        taps.clone(),
        config.seed,
    )?
    .with_ids(data.train.clone())
    .pooled(task.pool)
    .extract_all(0)?;
    let eval = ExtractedFeatures::new(
        model,
        schedule,
        data.eval_images(),
        data.eval_labels(),
        taps,
        config.seed,
    )?
    .with_ids(data.eval.clone())
    .pooled(task.pool)
    .extract_all(0)?;
    let (train, eval) = (flat(train[0].clone()), flat(eval[0].clone()));
    let (train_labels, eval_labels) = (data.train_labels(), data.eval_labels());
    let mut table = Table::new("knn", &["k", "metric", "top1", "top5"]);
    let mut rows = Vec::new();
    for &k in &task.k {
        let output = knn_classify(&train, &train_labels, &eval, k, task.metric)?;
        let acc = output.accuracy(&eval_labels)?;
        table.push(vec![
            k.to_string(),
            format!("{:?}", task.metric).to_lowercase(),
            acc.top1.to_string(),
            acc.top5.to_string(),
        ]);
        rows.push(json!({ "k": k, "accuracy": acc, "predictions": output.predictions }));
    }
    let result = json!({ "t": task.t, "block": task.block, "pool": task.pool, "metric": task.metric, "results": rows });
    let mut outcome = Outcome::new(with_data(result, &data));
    outcome.tables.push(table);
    Ok(outcome)
}

fn grid_figures(report: &GridReport) -> Vec<Figure> {
    let mut ts = report.spec.t_values.clone();
    ts.sort_unstable();
    ts.dedup();
    let mut bs = report.spec.b_values.clone();
    bs.sort_unstable();
    bs.dedup();
    let mut pools = report.spec.pool_sizes.clone();
    pools.sort();
    pools.dedup();
    pools
        .iter()
        .map(|pool| {
            let values: Vec<Vec<Option<f64>>> = bs
                .iter()
                .map(|&b| {
                    ts.iter()
                        .map(|&t| {
                            report
                                .rows
                                .iter()
                                .find(|r| r.t == t && r.block == b && r.pool == *pool)
                                .and_then(|r| r.top1)
                        })
                        .collect()
                })
                .collect();
            let label = pool.map_or("full".to_string(), |p| format!("pool{p}"));
            let rows: Vec<String> = bs.iter().map(|b| format!("b{b}")).collect();
            let cols: Vec<String> = ts.iter().map(|t| format!("t{t}")).collect();
            Figure {
                name: format!("grid-{label}"),
                svg: heatmap_svg(
                    &format!("top-1 accuracy ({label})"),
                    &rows,
                    &cols,
                    &values,
                    (0.0, 1.0),
                ),
            }
        })
        .collect()
}

fn run_grid(
    config: &ExperimentConfig,
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
) -> Result<Outcome> {
    let spec = config.section(&config.grid)?;
    let data = data(config, model)?;
    let (train_images, train_labels) = (data.train_images(), data.train_labels());
    let (eval_images, eval_labels) = (data.eval_images(), data.eval_labels());
    let train = Split {
        images: &train_images,
        labels: &train_labels,
    };
    let eval = data.has_eval().then_some(Split {
        images: &eval_images,
        labels: &eval_labels,
    });
    let report = grid_search(model, schedule, train, eval, spec, config.seed)?;
    let mut table = Table::new("grid", &["t", "block", "pool", "top1", "top5", "error"]);
    for r in &report.rows {
        table.push(vec![
            r.t.to_string(),
            r.block.to_string(),
            r.pool.map(|p| p.to_string()).unwrap_or_default(),
            cell(r.top1),
            cell(r.top5),
            r.error.clone().unwrap_or_default(),
        ]);
    }
    let figures = grid_figures(&report);
    let mut outcome = Outcome::new(with_data(json!({ "grid": report }), &data));
    outcome.tables.push(table);
    outcome.figures = figures;
    Ok(outcome)
}
