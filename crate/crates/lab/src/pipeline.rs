//! Stages of an experiment: data generation, training, evaluation, sampling and
//! propagation. Every stage reads and writes plain artifacts so it can be rerun
//! independently from the CLI.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;

use phirec_core::acquisition::{build_dataset, load_dataset, write_dataset, Dataset, Sample};
use phirec_core::baselines::ENSEMBLE_INDEX;
use phirec_core::evaluation::{evaluate_model, EvalOptions, Evaluation, ImageEvaluation};
use phirec_core::segmentation::{
    propagate, segmentation_error_map, train_segmenter, SegmentationSampleSet,
};
use phirec_core::train::{fit, spread_subset, validation_ssim, LogEntry, TrainConfig};
use phirec_core::{
    io, ComplexImage32, Provenance, ReconstructionSampleSet, ReconstructionSampler,
    Result as CoreResult,
};
use phirec_core::{Baseline32, Ensemble32, PhiRec32, SampleSet32, Segmenter32};

use crate::config::{ExperimentConfig, ModelKind};
use crate::error::{LabError, Result};
use crate::manifest::{
    claim_output, stage_dir, ModelRecord, RunLock, RunManifest, WeightsRecord, CONFIG_ECHO_FILE,
};

pub const DATASET_DIR: &str = "dataset";
pub const MODELS_DIR: &str = "models";
pub const SEGMENTER_DIR: &str = "segmenter";
pub const LOG_DIR: &str = "logs";
pub const EVAL_DIR: &str = "eval";
pub const MAPS_DIR: &str = "maps";

/// Map names stored per gallery image, in display order.
pub const GALLERY_MAPS: [&str; 4] = ["x_u", "mean", "variance", "squared_error"];

/// Any trained reconstruction model, as stored on disk.
#[derive(Clone, Debug)]
pub enum LoadedModel {
    PhiRec(PhiRec32),
    Baseline(Baseline32),
    Ensemble(Ensemble32),
}

impl LoadedModel {
    pub fn load(dir: &Path) -> Result<Self> {
        if dir.join(ENSEMBLE_INDEX).exists() {
            return Ok(LoadedModel::Ensemble(Ensemble32::load(dir)?));
        }
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(LabError::missing(
                dir,
                "no model weights (manifest.json or ensemble.json)",
            ));
        }
        let manifest: io::WeightsManifest = io::read_json(&manifest_path)?;
        Ok(if manifest.kind == "phirec" {
            LoadedModel::PhiRec(PhiRec32::load(dir)?)
        } else {
            LoadedModel::Baseline(Baseline32::load(dir)?)
        })
    }

    /// Persist and return a checksum covering every parameter.
    pub fn save(&self, dir: &Path) -> Result<String> {
        Ok(match self {
            LoadedModel::PhiRec(m) => m.save(dir)?.checksum,
            LoadedModel::Baseline(m) => m.save(dir)?.checksum,
            LoadedModel::Ensemble(m) => {
                m.save(dir)?;
                ensemble_checksum(m)
            }
        })
    }

    pub fn checksum(&self) -> String {
        match self {
            LoadedModel::PhiRec(m) => io::param_checksum(&m.params),
            LoadedModel::Baseline(m) => io::param_checksum(&m.params),
            LoadedModel::Ensemble(m) => ensemble_checksum(m),
        }
    }

    fn inner(&self) -> &dyn ReconstructionSampler<f32> {
        match self {
            LoadedModel::PhiRec(m) => m,
            LoadedModel::Baseline(m) => m,
            LoadedModel::Ensemble(m) => m,
        }
    }
}

fn ensemble_checksum(m: &Ensemble32) -> String {
    let joined: Vec<String> = m
        .members
        .iter()
        .map(|b| io::param_checksum(&b.params))
        .collect();
    io::digest_bytes(joined.join("\n").as_bytes())
}

impl ReconstructionSampler<f32> for LoadedModel {
    fn name(&self) -> String {
        self.inner().name()
    }

    fn sample(&self, x_u: &ComplexImage32, n: usize, seed: u64) -> CoreResult<SampleSet32> {
        self.inner().sample(x_u, n, seed)
    }

    fn quick_estimate(&self, x_u: &ComplexImage32, seed: u64) -> CoreResult<Array2<f32>> {
        self.inner().quick_estimate(x_u, seed)
    }
}

/// Best checkpoint and log of one training run (per member for ensembles).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_step: usize,
    pub best_score: f64,
    pub members: Vec<(usize, f64)>,
}

fn time_stage<R>(
    manifest: &mut RunManifest,
    stage: &str,
    f: impl FnOnce() -> Result<R>,
) -> Result<R> {
    let start = Instant::now();
    let out = f()?;
    manifest
        .timings
        .insert(stage.into(), start.elapsed().as_secs_f64());
    Ok(out)
}

fn write_log(path: &Path, log: &[LogEntry]) -> Result<()> {
    let mut text = String::new();
    for e in log {
        text.push_str(&serde_json::to_string(e).expect("log entry serializes"));
        text.push('\n');
    }
    io::write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogEntry>> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    text.lines()
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
        })
        .collect()
}

fn log_progress(what: &str) -> impl FnMut(&LogEntry) + '_ {
    move |e: &LogEntry| {
        if let Some(v) = e.val_score {
            info!(
                "{what} step {}: loss {:.5} validation {v:.4}",
                e.step, e.loss
            );
        }
    }
}

/// An experiment's run directory, locked for the lifetime of the value. The
/// dataset and segmenter are shared; each model kind gets `models/<kind>/`,
/// `logs/<kind>.jsonl` and `eval/<kind>.{csv,json}`.
pub struct Run {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    pub manifest: RunManifest,
    _lock: RunLock,
}

impl Run {
    /// Lock the run directory and open its manifest. With `force`, a manifest
    /// written by a different configuration is discarded instead of rejected.
    pub fn open(config: &ExperimentConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let dir = config.run_dir();
        let lock = RunLock::acquire(&dir)?;
        let manifest = match RunManifest::open(&dir, config) {
            Err(LabError::Config(_)) if force => RunManifest::new(config),
            other => other?,
        };
        Ok(Run {
            config: config.clone(),
            dir,
            manifest,
            _lock: lock,
        })
    }

    fn commit(&self) -> Result<()> {
        self.manifest.save(&self.dir)
    }

    fn kind(&self) -> &'static str {
        self.config.model.kind.name()
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dir.join(DATASET_DIR)
    }

    /// Weights of the configured model kind.
    pub fn model_dir(&self) -> PathBuf {
        self.dir.join(MODELS_DIR).join(self.kind())
    }

    pub fn segmenter_dir(&self) -> PathBuf {
        self.dir.join(SEGMENTER_DIR)
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.dir.join(EVAL_DIR)
    }

    /// Generate the dataset. Replacing it discards every model and evaluation
    /// of the run, which were derived from the old data.
    pub fn gen_data(&mut self, force: bool) -> Result<Dataset> {
        let out = self.dataset_dir();
        claim_output(&out, force)?;
        for stale in [MODELS_DIR, EVAL_DIR, SEGMENTER_DIR] {
            claim_output(&self.dir.join(stale), true)?;
        }
        self.manifest.models.clear();
        self.manifest.segmenter = None;
        let cfg = self.config.dataset_config();
        let ds = time_stage(&mut self.manifest, "gen-data", || {
            let ds = build_dataset(&cfg)?;
            stage_dir(&out, |tmp| Ok(write_dataset(&ds, tmp)?))?;
            Ok(ds)
        })?;
        self.manifest.dataset_hash = Some(ds.content_hash());
        self.commit()?;
        info!("dataset {} written to {}", ds.content_hash(), out.display());
        Ok(ds)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let dir = self.dataset_dir();
        if !dir.join("dataset.json").exists() {
            return Err(LabError::missing(&dir, "run gen-data first"));
        }
        Ok(load_dataset(&dir)?)
    }

    /// Train the shared segmenter; stored evaluations become stale.
    pub fn train_segmenter(&mut self, force: bool) -> Result<(Segmenter32, TrainSummary)> {
        let out = self.segmenter_dir();
        claim_output(&out, force)?;
        let ds = self.dataset()?;
        let cfg = self.config.segmenter_config();
        let tc = self.config.segmenter_train_config();
        let (seg, outcome) = time_stage(&mut self.manifest, "train-segmenter", || {
            Ok(train_segmenter::<f32>(
                &ds.train,
                &ds.val,
                cfg,
                &tc,
                log_progress("segmenter"),
            )?)
        })?;
        let manifest = stage_dir(&out, |tmp| Ok(seg.save(tmp)?))?;
        write_log(
            &self.dir.join(LOG_DIR).join("segmenter.jsonl"),
            &outcome.log,
        )?;
        let summary = TrainSummary {
            best_step: outcome.best_step,
            best_score: outcome.best_score,
            members: vec![(outcome.best_step, outcome.best_score)],
        };
        self.manifest.segmenter = Some(WeightsRecord {
            path: SEGMENTER_DIR.into(),
            checksum: manifest.checksum,
            best_step: summary.best_step,
            best_score: summary.best_score,
        });
        for record in self.manifest.models.values_mut() {
            record.evaluation_hash = None;
        }
        self.commit()?;
        Ok((seg, summary))
    }

    /// Train the configured model kind into `models/<kind>/`.
    pub fn train_model(&mut self, force: bool) -> Result<(LoadedModel, TrainSummary)> {
        let out = self.model_dir();
        claim_output(&out, force)?;
        let ds = self.dataset()?;
        let config = self.config.clone();
        let kind = self.kind();
        let (model, summary, logs) =
            time_stage(&mut self.manifest, &format!("train/{kind}"), || {
                train(&config, &ds)
            })?;
        let checksum = stage_dir(&out, |tmp| {
            let checksum = model.save(tmp)?;
            io::write_atomic(&tmp.join(CONFIG_ECHO_FILE), config.to_toml().as_bytes())?;
            Ok(checksum)
        })?;
        for (i, log) in logs.iter().enumerate() {
            let name = if logs.len() == 1 {
                format!("{kind}.jsonl")
            } else {
                format!("{kind}_member_{i:02}.jsonl")
            };
            write_log(&self.dir.join(LOG_DIR).join(name), log)?;
        }
        self.manifest.models.insert(
            kind.into(),
            ModelRecord {
                config: config.clone(),
                model_hash: config.model_hash(),
                weights: WeightsRecord {
                    path: format!("{MODELS_DIR}/{kind}"),
                    checksum,
                    best_step: summary.best_step,
                    best_score: summary.best_score,
                },
                evaluation_hash: None,
                metrics: Default::default(),
            },
        );
        self.commit()?;
        Ok((model, summary))
    }

    fn record(&self) -> Result<&ModelRecord> {
        let record = self
            .manifest
            .models
            .get(self.kind())
            .ok_or_else(|| LabError::missing(&self.model_dir(), "train the model first"))?;
        if record.model_hash != self.config.model_hash() {
            return Err(LabError::Config(format!(
                "{} was trained with different model settings; retrain with --force",
                self.model_dir().display()
            )));
        }
        Ok(record)
    }

    /// Evaluate the configured model on the test split, writing
    /// `eval/<kind>.{csv,json}` and the gallery maps.
    pub fn evaluate(&mut self) -> Result<Evaluation> {
        self.record()?;
        let model = LoadedModel::load(&self.model_dir())?;
        let seg = Segmenter32::load(&self.segmenter_dir())?;
        let ds = self.dataset()?;
        let opts = self.config.eval_options();
        let out = self.eval_dir();
        let gallery = self.config.evaluation.gallery_images;
        let kind = self.kind();
        claim_output(&out.join(MAPS_DIR).join(model.name()), true)?;
        let eval = time_stage(&mut self.manifest, &format!("evaluate/{kind}"), || {
            evaluate_to(&model, &ds.test, &seg, &opts, &out, gallery)
        })?;
        let stem = eval.model.clone();
        let evaluation_hash = self.config.evaluation_hash();
        let record = self.manifest.models.get_mut(kind).expect("checked above");
        record.evaluation_hash = Some(evaluation_hash);
        record
            .metrics
            .insert(format!("{stem}.csv"), format!("{EVAL_DIR}/{stem}.csv"));
        record
            .metrics
            .insert(format!("{stem}.json"), format!("{EVAL_DIR}/{stem}.json"));
        self.commit()?;
        Ok(eval)
    }

    /// The stored evaluation of the configured model, if it is current.
    pub fn stored_evaluation(&self) -> Result<Option<Evaluation>> {
        let record = match self.manifest.models.get(self.kind()) {
            Some(r) => r,
            None => return Ok(None),
        };
        if record.evaluation_hash.as_deref() != Some(self.config.evaluation_hash().as_str()) {
            return Ok(None);
        }
        let path = self.eval_dir().join(format!("{}.json", self.kind()));
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(io::read_json(&path)?))
    }

    /// Every stage of the experiment, skipping those whose outputs are current.
    /// `force` redoes all of them.
    pub fn complete(&mut self, force: bool) -> Result<Evaluation> {
        if force || self.manifest.dataset_hash.is_none() {
            self.gen_data(force)?;
        }
        if force || self.manifest.segmenter.is_none() {
            self.train_segmenter(force)?;
        }
        let trained = self
            .manifest
            .models
            .get(self.kind())
            .map(|r| r.model_hash.clone());
        match trained {
            Some(h) if !force && h == self.config.model_hash() => {
                info!("{}: weights are current", self.kind())
            }
            Some(_) if !force => return Err(self.record().expect_err("stale record")),
            _ => {
                self.train_model(force)?;
            }
        }
        if !force {
            if let Some(eval) = self.stored_evaluation()? {
                info!("{}: evaluation is current", self.kind());
                return Ok(eval);
            }
        }
        self.evaluate()
    }
}

/// Train the configured model; returns the best checkpoint, its summary and one log per trained network.
pub fn train(
    config: &ExperimentConfig,
    ds: &Dataset,
) -> Result<(LoadedModel, TrainSummary, Vec<Vec<LogEntry>>)> {
    let tc = config.train_config();
    let val = spread_subset(&ds.val, config.optimizer.val_limit);
    let seed = config.seeds.sampling;
    match config.model.kind {
        ModelKind::Phirec => {
            let mc = config.model_config();
            let mut m = PhiRec32::new(mc.clone(), config.seeds.model)?;
            let outcome = fit(
                &mut m,
                &ds.train,
                &tc,
                |m| validation_ssim(m, &val, 0, seed),
                log_progress("phirec"),
            )?;
            let best = PhiRec32::from_params(mc, &outcome.best_params)?;
            let summary = TrainSummary {
                best_step: outcome.best_step,
                best_score: outcome.best_score,
                members: vec![(outcome.best_step, outcome.best_score)],
            };
            Ok((LoadedModel::PhiRec(best), summary, vec![outcome.log]))
        }
        ModelKind::Ensemble => {
            let bc = config.baseline_config();
            let template = Ensemble32::new(bc.clone(), config.seeds.model)?;
            let mut members = Vec::new();
            let mut stats = Vec::new();
            let mut logs = Vec::new();
            for (i, (&s, mut m)) in template
                .seeds
                .iter()
                .zip(template.members.clone())
                .enumerate()
            {
                let member_tc = TrainConfig {
                    seed: s,
                    ..tc.clone()
                };
                let what = format!("ensemble member {i}");
                let outcome = fit(
                    &mut m,
                    &ds.train,
                    &member_tc,
                    |m| validation_ssim(m, &val, 0, seed),
                    log_progress(&what),
                )?;
                members.push(Baseline32::from_params(
                    template.config.clone(),
                    &outcome.best_params,
                )?);
                stats.push((outcome.best_step, outcome.best_score));
                logs.push(outcome.log);
            }
            let ensemble =
                Ensemble32::from_members(template.config.clone(), template.seeds.clone(), members)?;
            let best_score = validation_ssim(&ensemble, &val, 0, seed)?;
            let summary = TrainSummary {
                best_step: stats.iter().map(|s| s.0).max().unwrap_or(0),
                best_score,
                members: stats,
            };
            Ok((LoadedModel::Ensemble(ensemble), summary, logs))
        }
        _ => {
            let bc = config.baseline_config();
            let mut m = Baseline32::new(bc.clone(), config.seeds.model)?;
            let what = bc.kind.name();
            let outcome = fit(
                &mut m,
                &ds.train,
                &tc,
                |m| validation_ssim(m, &val, 0, seed),
                log_progress(what),
            )?;
            let best = Baseline32::from_params(bc, &outcome.best_params)?;
            let summary = TrainSummary {
                best_step: outcome.best_step,
                best_score: outcome.best_score,
                members: vec![(outcome.best_step, outcome.best_score)],
            };
            Ok((LoadedModel::Baseline(best), summary, vec![outcome.log]))
        }
    }
}

/// Phantoms whose maps are kept: the first `count` distinct ones of the split.
fn gallery_phantoms(samples: &[Sample], count: usize) -> BTreeSet<u64> {
    let mut seen = Vec::new();
    for s in samples {
        if seen.len() >= count {
            break;
        }
        if !seen.contains(&s.phantom_seed) {
            seen.push(s.phantom_seed);
        }
    }
    seen.into_iter().collect()
}

fn write_gallery(dir: &Path, sample: &Sample, ev: &ImageEvaluation<f32>) -> CoreResult<()> {
    let meta = json!({ "sample_id": sample.id, "phantom_seed": sample.phantom_seed, "accel": sample.accel });
    let var = ev
        .samples
        .variance_map()
        .unwrap_or_else(|| Array2::zeros(ev.samples.mean_map.dim()));
    io::write_grid(&dir.join("x_u"), &sample.x_u.magnitude(), meta.clone())?;
    io::write_grid(&dir.join("gt"), &sample.x.magnitude(), meta.clone())?;
    io::write_grid(&dir.join("mean"), &ev.samples.mean_map, meta.clone())?;
    io::write_grid(&dir.join("variance"), &var, meta.clone())?;
    io::write_grid(&dir.join("squared_error"), &ev.squared_error, meta.clone())?;
    io::write_grid(
        &dir.join("gamma"),
        &ev.segmentation.gamma_map.mapv(|v| v as f32),
        meta.clone(),
    )?;
    io::write_grid(
        &dir.join("segmentation_error"),
        &ev.segmentation_error.mapv(|v| v as f32),
        meta,
    )?;
    Ok(())
}

/// Evaluate `model` on `samples`; writes `<out>/<model>.{csv,json}` and maps of
/// the first `gallery` phantoms under `<out>/maps/<model>/<sample_id>/`.
pub fn evaluate_to(
    model: &LoadedModel,
    samples: &[Sample],
    seg: &Segmenter32,
    opts: &EvalOptions,
    out: &Path,
    gallery: usize,
) -> Result<Evaluation> {
    let keep = gallery_phantoms(samples, gallery);
    let maps = out.join(MAPS_DIR).join(model.name());
    let mut failure = None;
    let eval = evaluate_model(model, samples, seg, opts, |s, ev| {
        info!("{}: ssim {:.4}", s.id, ev.record.ssim);
        if keep.contains(&s.phantom_seed) && failure.is_none() {
            failure = write_gallery(&maps.join(&s.id), s, ev).err();
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    eval.write(out, &eval.model)?;
    Ok(eval)
}

/// Provenance of an evaluation run outside a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationProvenance {
    pub weights: PathBuf,
    pub weights_checksum: String,
    pub dataset: PathBuf,
    pub dataset_hash: String,
    pub segmenter: PathBuf,
    pub segmenter_checksum: String,
    pub options: EvalOptions,
}

/// Path-based evaluation of the test split of a stored dataset.
pub fn evaluate_paths(
    weights: &Path,
    dataset: &Path,
    seg_weights: &Path,
    out: &Path,
    opts: &EvalOptions,
    gallery: usize,
) -> Result<Evaluation> {
    let model = LoadedModel::load(weights)?;
    let seg = Segmenter32::load(seg_weights)?;
    let ds = load_dataset(dataset)?;
    let eval = evaluate_to(&model, &ds.test, &seg, opts, out, gallery)?;
    io::write_json(
        &out.join(format!("{}.provenance.json", eval.model)),
        &EvaluationProvenance {
            weights: weights.to_path_buf(),
            weights_checksum: model.checksum(),
            dataset: dataset.to_path_buf(),
            dataset_hash: ds.content_hash(),
            segmenter: seg_weights.to_path_buf(),
            segmenter_checksum: io::param_checksum(&seg.params),
            options: opts.clone(),
        },
    )?;
    Ok(eval)
}

/// Store a sample set as `<out>/samples` (`[n, H, W, 2]`) plus magnitude `mean` and `std` grids.
pub fn write_sample_set(out: &Path, set: &SampleSet32, meta: serde_json::Value) -> Result<()> {
    let (h, w) = set.mean_map.dim();
    let data: Vec<f32> = set
        .samples
        .iter()
        .flat_map(|s| {
            s.data()
                .iter()
                .flat_map(|c| [c.re, c.im])
                .collect::<Vec<_>>()
        })
        .collect();
    let mut meta = meta;
    if let serde_json::Value::Object(m) = &mut meta {
        m.insert("source".into(), json!(set.source));
        m.insert("n".into(), json!(set.n()));
    }
    io::write_tensor(
        &out.join("samples"),
        &[set.n(), h, w, 2],
        &data,
        true,
        meta.clone(),
    )?;
    io::write_grid(&out.join("mean"), &set.mean_map, meta.clone())?;
    let std = set.std_map.clone().unwrap_or_else(|| Array2::zeros((h, w)));
    io::write_grid(&out.join("std"), &std, meta)?;
    Ok(())
}

pub fn read_sample_set(dir: &Path) -> Result<SampleSet32> {
    let (side, data) = io::read_tensor::<f32>(&dir.join("samples"))?;
    let corrupt = |detail: &str| {
        LabError::Core(phirec_core::Error::Corrupt {
            path: dir.join("samples"),
            detail: detail.into(),
        })
    };
    if !side.complex || side.shape.len() != 4 {
        return Err(corrupt("expected complex [n, H, W, 2] payload"));
    }
    let (n, h, w) = (side.shape[0], side.shape[1], side.shape[2]);
    let per = h * w * 2;
    let samples = (0..n)
        .map(|i| {
            let vals = data[i * per..(i + 1) * per]
                .chunks_exact(2)
                .map(|c| num_complex::Complex::new(c[0], c[1]))
                .collect();
            let arr = Array2::from_shape_vec((h, w), vals).map_err(|_| corrupt("shape"))?;
            Ok(ComplexImage32::new(arr, Provenance::Sample)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let source = side
        .meta
        .get("source")
        .and_then(|v| v.as_str())
        .unwrap_or("unknown")
        .to_string();
    Ok(ReconstructionSampleSet::from_samples(samples, source)?)
}

/// Draw `n` samples for the zero-filled image stored at `input` and write them to `out`.
pub fn sample_to(
    weights: &Path,
    input: &Path,
    n: usize,
    seed: u64,
    out: &Path,
) -> Result<SampleSet32> {
    let model = LoadedModel::load(weights)?;
    let x_u: ComplexImage32 = io::read_complex_image(input)?;
    let set = model.sample(&x_u, n, seed)?;
    write_sample_set(
        out,
        &set,
        json!({ "weights_checksum": model.checksum(), "input": input, "seed": seed }),
    )?;
    Ok(set)
}

/// Segmentation spread of one stored sample set.
pub struct Propagated {
    pub segmentation: SegmentationSampleSet,
    pub error_map: Option<Array2<f64>>,
}

/// Propagate stored sample sets through the segmenter and write per-set
/// `gamma`, `mean_labels` (and `segmentation_error` when labels are given).
pub fn propagate_to(
    sample_dirs: &[PathBuf],
    seg_weights: &Path,
    labels: &[PathBuf],
    hard: bool,
    out: &Path,
) -> Result<Vec<Propagated>> {
    if !labels.is_empty() && labels.len() != sample_dirs.len() {
        return Err(LabError::Config(
            "give either no label maps or one per sample set".into(),
        ));
    }
    let seg = Segmenter32::load(seg_weights)?;
    let mut results = Vec::new();
    for (i, dir) in sample_dirs.iter().enumerate() {
        let set = read_sample_set(dir)?;
        let segmentation = propagate(&set, &seg, hard)?;
        let target = out.join(format!("set_{i:02}"));
        let meta = json!({ "samples": dir, "hard": hard });
        let pred = segmentation.mean_map.argmax();
        io::write_grid(
            &target.join("gamma"),
            &segmentation.gamma_map.mapv(|v| v as f32),
            meta.clone(),
        )?;
        io::write_grid(
            &target.join("mean_labels"),
            &pred.mapv(|v| v as f32),
            meta.clone(),
        )?;
        let error_map = match labels.get(i) {
            Some(path) => {
                let l: Array2<f32> = io::read_grid(path)?;
                let err = segmentation_error_map(&pred, &l.mapv(|v| v as u8))?;
                io::write_grid(
                    &target.join("segmentation_error"),
                    &err.mapv(|v| v as f32),
                    meta,
                )?;
                Some(err)
            }
            None => None,
        };
        results.push(Propagated {
            segmentation,
            error_map,
        });
    }
    Ok(results)
}

/// Model kinds in a fixed order, for reports.
pub const MODEL_ORDER: [ModelKind; 6] = [
    ModelKind::Phirec,
    ModelKind::McDropout,
    ModelKind::Heteroscedastic,
    ModelKind::McDropoutHetero,
    ModelKind::Ensemble,
    ModelKind::ProbUnet,
];

pub fn kind_of(name: &str) -> Option<ModelKind> {
    MODEL_ORDER.into_iter().find(|k| k.name() == name)
}
