//! Task-per-batch training with Adam, periodic validation and early stopping
//! on validation emotion CCC.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{self, AudioError, WaveformClip};
use crate::dataset::{
    self, denormalize_age, normalize_age, DatasetError, DatasetManifest, LabelConfig, Split,
    SynthDataset, SynthMedia,
};
use crate::diffcore::{AdamConfig, AdamState, Graph, Tensor};
use crate::evalkit::{self, EvalError, MetricsReport, PredictionSet};
use crate::losses::{
    self, BatchTargets, LossError, LossWeights, ObjectiveOptions, TargetNodes, TaskBatchLoss,
};
use crate::model::{
    Burst2Vec, EncoderConfig, EncoderInput, EncoderMode, FrameBatch, ModelCheckpoint, ModelConfig,
    ModelError, TaskId,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("config line {line}: {detail}")]
    ConfigSyntax { line: usize, detail: String },
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite loss at iteration {iteration} ({task} batch): {detail}")]
    NonFinite {
        iteration: u64,
        task: TaskId,
        detail: String,
    },
    #[error("media {path}: {detail}")]
    Media { path: PathBuf, detail: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMetric {
    EmoCcc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Validate every this many iterations.
    pub val_every: u64,
    /// Validations without improvement before stopping.
    pub patience: usize,
    pub early_stop_metric: EarlyStopMetric,
    pub lr: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub seed: u64,
    pub oversample: bool,
    pub adversarial: bool,
    pub encoder_mode: EncoderMode,
    pub proj_dim: usize,
    pub hidden_dim: usize,
    /// Record elapsed seconds in the log. Off by default so logs are
    /// reproducible byte for byte.
    pub log_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 100,
            val_every: 800,
            patience: 20,
            early_stop_metric: EarlyStopMetric::EmoCcc,
            lr: 1e-5,
            alpha1: 0.5,
            alpha2: 0.25,
            seed: 0,
            oversample: false,
            adversarial: true,
            encoder_mode: EncoderMode::Feature,
            proj_dim: 32,
            hidden_dim: 64,
            log_wall_clock: false,
        }
    }
}

fn parse_bool(value: &str) -> Option<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

/// Splits `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>, TrainError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| TrainError::ConfigSyntax {
            line: i + 1,
            detail: format!("expected key=value, got `{line}`"),
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl TrainConfig {
    pub const KEYS: [&'static str; 15] = [
        "batch_size",
        "max_epochs",
        "val_every",
        "patience",
        "early_stop_metric",
        "lr",
        "alpha1",
        "alpha2",
        "seed",
        "oversample",
        "adversarial",
        "encoder_mode",
        "proj_dim",
        "hidden_dim",
        "log_wall_clock",
    ];

    pub fn weights(&self) -> LossWeights {
        if self.adversarial {
            LossWeights {
                alpha1: self.alpha1,
                alpha2: self.alpha2,
            }
        } else {
            LossWeights::DISABLED
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2");
        }
        if self.max_epochs == 0 || self.val_every == 0 || self.patience == 0 {
            return fail("max_epochs, val_every and patience must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail("lr must be positive");
        }
        for a in [self.alpha1, self.alpha2] {
            if !(a.is_finite() && a >= 0.0) {
                return fail("alpha1 and alpha2 must be finite and nonnegative");
            }
        }
        if self.proj_dim == 0 || self.hidden_dim == 0 {
            return fail("proj_dim and hidden_dim must be positive");
        }
        Ok(())
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
            value
                .parse()
                .map_err(|_| TrainError::Config(format!("{key}: cannot parse `{value}`")))
        }
        let flag = |v: &str| {
            parse_bool(v).ok_or_else(|| TrainError::Config(format!("{key}: expected a boolean")))
        };
        match key {
            "batch_size" => self.batch_size = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "val_every" => self.val_every = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "early_stop_metric" => {
                if !matches!(value, "emo_ccc" | "emo-ccc") {
                    return Err(TrainError::Config(format!(
                        "early_stop_metric: only emo_ccc is supported, got `{value}`"
                    )));
                }
                self.early_stop_metric = EarlyStopMetric::EmoCcc;
            }
            "lr" => self.lr = num(key, value)?,
            "alpha1" => self.alpha1 = num(key, value)?,
            "alpha2" => self.alpha2 = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "oversample" => self.oversample = flag(value)?,
            "adversarial" => self.adversarial = flag(value)?,
            "encoder_mode" => {
                self.encoder_mode = EncoderMode::parse(value).ok_or_else(|| {
                    TrainError::Config(format!("encoder_mode: unknown mode `{value}`"))
                })?
            }
            "proj_dim" => self.proj_dim = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "log_wall_clock" => self.log_wall_clock = flag(value)?,
            _ => return Err(TrainError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses a flat key=value file. Unknown keys are errors.
    pub fn from_kv(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        for (line, k, v) in parse_key_values(text)? {
            cfg.set(&k, &v).map_err(|e| TrainError::ConfigSyntax {
                line,
                detail: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let metric = match self.early_stop_metric {
            EarlyStopMetric::EmoCcc => "emo_ccc",
        };
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("batch_size", self.batch_size.to_string());
        put("max_epochs", self.max_epochs.to_string());
        put("val_every", self.val_every.to_string());
        put("patience", self.patience.to_string());
        put("early_stop_metric", metric.into());
        put("lr", self.lr.to_string());
        put("alpha1", self.alpha1.to_string());
        put("alpha2", self.alpha2.to_string());
        put("seed", self.seed.to_string());
        put("oversample", self.oversample.to_string());
        put("adversarial", self.adversarial.to_string());
        put("encoder_mode", self.encoder_mode.name().into());
        put("proj_dim", self.proj_dim.to_string());
        put("hidden_dim", self.hidden_dim.to_string());
        put("log_wall_clock", self.log_wall_clock.to_string());
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Media {
    Frames { frames: usize, data: Vec<f64> },
    Waveform(WaveformClip),
}

/// Labels plus media held in memory, ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingData {
    pub manifest: DatasetManifest,
    media: Vec<Media>,
    feature_dim: Option<usize>,
}

fn frames_media(f: &dataset::FeatureFrames) -> Media {
    Media::Frames {
        frames: f.frames,
        data: f.data.iter().map(|&v| v as f64).collect(),
    }
}

impl TrainingData {
    /// Loads every media file of a manifest: `.wav` files as waveforms
    /// (resampled and normalized), anything else as feature files.
    pub fn load(manifest: DatasetManifest) -> Result<Self, TrainError> {
        let media = manifest
            .media
            .par_iter()
            .map(|path| -> Result<Media, TrainError> {
                let is_wav = path
                    .extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
                if is_wav {
                    let clip = audio_io::load_wav(path)?;
                    Ok(Media::Waveform(audio_io::preprocess(&clip)?))
                } else {
                    Ok(frames_media(&dataset::read_feature_file(path)?))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::assemble(manifest, media)
    }

    /// Wraps an in-memory synthetic dataset without touching the disk.
    pub fn from_synth(ds: &SynthDataset) -> Result<Self, TrainError> {
        let media = ds
            .media
            .iter()
            .map(|m| match m {
                SynthMedia::Frames(f) => frames_media(f),
                SynthMedia::Waveform(w) => Media::Waveform(w.clone()),
            })
            .collect();
        let manifest = DatasetManifest {
            records: ds.records.clone(),
            media: ds
                .records
                .iter()
                .map(|r| PathBuf::from(&r.clip_id))
                .collect(),
            labels: ds.labels.clone(),
        };
        Self::assemble(manifest, media)
    }

    fn assemble(manifest: DatasetManifest, media: Vec<Media>) -> Result<Self, TrainError> {
        let mut feature_dim = None;
        let mut kinds = (false, false);
        for (i, m) in media.iter().enumerate() {
            match m {
                Media::Frames { frames, data } => {
                    kinds.0 = true;
                    let dim = data.len() / (*frames).max(1);
                    if *frames == 0 || *feature_dim.get_or_insert(dim) != dim {
                        return Err(TrainError::Media {
                            path: manifest.media[i].clone(),
                            detail: format!("{frames} frames of dimension {dim} do not match the dataset"),
                        });
                    }
                }
                Media::Waveform(_) => kinds.1 = true,
            }
        }
        if kinds.0 && kinds.1 {
            return Err(TrainError::Config(
                "a manifest must not mix feature files and waveforms".into(),
            ));
        }
        Ok(Self {
            manifest,
            media,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.media.len()
    }

    pub fn is_empty(&self) -> bool {
        self.media.is_empty()
    }

    pub fn labels(&self) -> &LabelConfig {
        &self.manifest.labels
    }

    /// Encoder the media supports: feature frames or raw waveforms.
    pub fn encoder_mode(&self) -> EncoderMode {
        if self.feature_dim.is_some() {
            EncoderMode::Feature
        } else {
            EncoderMode::Conv
        }
    }

    pub fn model_config(&self, config: &TrainConfig) -> Result<ModelConfig, TrainError> {
        if config.encoder_mode != self.encoder_mode() {
            return Err(TrainError::Config(format!(
                "encoder_mode {} does not match the {} media of this manifest",
                config.encoder_mode.name(),
                self.encoder_mode().name()
            )));
        }
        let encoder = match self.feature_dim {
            Some(dim) => EncoderConfig::feature(dim),
            None => EncoderConfig::conv_default(),
        };
        let cfg = ModelConfig {
            encoder,
            proj_dim: config.proj_dim,
            hidden_dim: config.hidden_dim,
            num_countries: self.labels().num_countries(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn input(&self, indices: &[usize]) -> Result<EncoderInput, TrainError> {
        match self.feature_dim {
            Some(dim) => {
                let clips: Vec<(&[f64], usize)> = indices
                    .iter()
                    .map(|&i| match &self.media[i] {
                        Media::Frames { frames, data } => (data.as_slice(), *frames),
                        Media::Waveform(_) => unreachable!("mixed media rejected on load"),
                    })
                    .collect();
                Ok(EncoderInput::Frames(FrameBatch::from_clips(&clips, dim)))
            }
            None => {
                let clips: Vec<&WaveformClip> = indices
                    .iter()
                    .map(|&i| match &self.media[i] {
                        Media::Waveform(w) => w,
                        Media::Frames { .. } => unreachable!("mixed media rejected on load"),
                    })
                    .collect();
                Ok(EncoderInput::Waveform(audio_io::pad_batch(&clips)?))
            }
        }
    }

    pub fn targets(&self, indices: &[usize]) -> Result<BatchTargets, TrainError> {
        let labels = self.labels();
        let recs: Vec<_> = indices.iter().map(|&i| &self.manifest.records[i]).collect();
        let emotions = Tensor::from_rows(&recs.iter().map(|r| r.emotions).collect::<Vec<_>>());
        let age = recs
            .iter()
            .map(|r| normalize_age(r.age, labels.age_min, labels.age_max))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BatchTargets {
            emotions,
            age: Tensor::vector(age),
            country: recs.iter().map(|r| r.country).collect(),
        })
    }
}

/// One scheduled batch: every record has labels for all tasks, so `task`
/// only selects which loss pathway is active.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScheduledBatch {
    pub epoch: usize,
    pub task: TaskId,
    pub indices: Vec<usize>,
}

/// Endless sequence of shuffled epochs over `pool`, tasks cycling
/// Emotion → Age → Country across consecutive batches.
#[derive(Clone, Debug)]
pub struct Schedule {
    pool: Vec<usize>,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    counter: usize,
    pending: std::vec::IntoIter<Vec<usize>>,
}

/// Builds the batch schedule over the training pool (with repeats if the
/// pool was oversampled).
pub fn schedule_batches(pool: Vec<usize>, batch_size: usize, seed: u64) -> Schedule {
    Schedule {
        pool,
        batch_size: batch_size.max(1),
        seed,
        epoch: 0,
        counter: 0,
        pending: Vec::new().into_iter(),
    }
}

impl Schedule {
    fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order = self.pool.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut batches: Vec<Vec<usize>> =
            order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        // A lone leftover record cannot form a concordance estimate.
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let last = batches.pop().unwrap();
            batches.last_mut().unwrap().extend(last);
        }
        batches
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.epoch_batches(0).len()
    }
}

impl Iterator for Schedule {
    type Item = ScheduledBatch;

    fn next(&mut self) -> Option<ScheduledBatch> {
        if self.pool.is_empty() {
            return None;
        }
        let indices = match self.pending.next() {
            Some(b) => b,
            None => {
                self.epoch += 1;
                self.pending = self.epoch_batches(self.epoch - 1).into_iter();
                self.pending.next()?
            }
        };
        let task = TaskId::ALL[self.counter % 3];
        self.counter += 1;
        Some(ScheduledBatch {
            epoch: self.epoch - 1,
            task,
            indices,
        })
    }
}

/// Stops after `patience` validations without strict improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records a validation score; returns whether it is a new best.
    pub fn observe(&mut self, score: f64) -> bool {
        let improved = match self.best {
            None => !score.is_nan(),
            Some(b) => score > b,
        };
        if improved {
            self.best = Some(score);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        improved
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub iteration: u64,
    pub epoch: usize,
    pub task: TaskId,
    pub l_o: f64,
    pub l_d: f64,
    pub l_adv: f64,
    pub l_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationLogEntry {
    pub iteration: u64,
    pub emo_ccc: f64,
    pub cou_uar: f64,
    pub age_mae: f64,
    pub s_mtl: Option<f64>,
    pub improved: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
    pub validations: Vec<ValidationLogEntry>,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), TrainError> {
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row).expect("log rows serialize");
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(io)
}

impl TrainLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<(), TrainError> {
        write_jsonl(path, &self.entries)
    }

    pub fn write_validation_jsonl(&self, path: &Path) -> Result<(), TrainError> {
        write_jsonl(path, &self.validations)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation emotion CCC.
    pub best: ModelCheckpoint,
    /// Parameters after the last iteration.
    pub last: ModelCheckpoint,
    pub best_metrics: MetricsReport,
    pub log: TrainLog,
    pub iterations: u64,
    pub stopped_early: bool,
}

/// One optimization step on one task batch. Only parameters the objective
/// reaches receive an Adam update; the rest stay bitwise unchanged.
pub fn train_step(
    model: &mut Burst2Vec,
    adam: &mut AdamState,
    input: &EncoderInput,
    targets: &BatchTargets,
    task: TaskId,
    options: ObjectiveOptions,
) -> Result<TaskBatchLoss, TrainError> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let bundle = model.represent(&mut g, &bound, input)?;
    let target_nodes = TargetNodes::insert(&mut g, targets);
    let objective =
        losses::task_objective(&mut g, model, &bound, task, bundle, &target_nodes, options)?;
    let values = objective.values(&g, options.weights);
    let realized = g.value(objective.realized).item();
    if !realized.is_finite() || !values.total.is_finite() {
        return Err(TrainError::NonFinite {
            iteration: adam.step_count() + 1,
            task,
            detail: format!("{values:?}"),
        });
    }
    let grads = g.backward(objective.realized).map_err(ModelError::from)?;
    let mut updates = BTreeMap::new();
    for (name, id) in bound.iter() {
        if let Some(gr) = grads.get(id) {
            if !gr.all_finite() {
                return Err(TrainError::NonFinite {
                    iteration: adam.step_count() + 1,
                    task,
                    detail: format!("gradient of {name}"),
                });
            }
            updates.insert(name.to_string(), gr.clone());
        }
    }
    adam.step(&mut model.params, &updates)
        .map_err(ModelError::from)?;
    Ok(values)
}

const PREDICT_CHUNK: usize = 64;

/// Inference over `indices`, chunked and run in parallel; rows come back in
/// the order of `indices`.
pub fn predict_indices(
    model: &Burst2Vec,
    data: &TrainingData,
    indices: &[usize],
) -> Result<PredictionSet, TrainError> {
    let labels = data.labels();
    let parts = indices
        .par_chunks(PREDICT_CHUNK)
        .map(|chunk| -> Result<_, TrainError> {
            let input = data.input(chunk)?;
            Ok(model.predict(&input)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut set = PredictionSet {
        ids: indices
            .iter()
            .map(|&i| data.manifest.records[i].clip_id.clone())
            .collect(),
        emotions: Vec::with_capacity(indices.len()),
        age_years: Vec::with_capacity(indices.len()),
        country_probs: Vec::with_capacity(indices.len()),
    };
    for p in parts {
        set.emotions.extend(p.emotions);
        for a in p.age_norm {
            set.age_years
                .push(denormalize_age(a, labels.age_min, labels.age_max)?);
        }
        set.country_probs.extend(p.country_probs);
    }
    Ok(set)
}

/// Metrics of `model` on one split, using the concatenated representations.
pub fn validate(
    model: &Burst2Vec,
    data: &TrainingData,
    split: Split,
) -> Result<MetricsReport, TrainError> {
    let indices = data.manifest.split_indices(split);
    if indices.is_empty() {
        return Err(TrainError::EmptySplit(split.as_str()));
    }
    let predictions = predict_indices(model, data, &indices)?;
    let refs: Vec<_> = indices.iter().map(|&i| &data.manifest.records[i]).collect();
    Ok(evalkit::evaluate(
        &predictions,
        &refs,
        data.labels().num_countries(),
    )?)
}

/// Runs training until `max_epochs` or early stopping and returns the
/// checkpoint with the best validation emotion CCC.
pub fn train(config: &TrainConfig, data: &TrainingData) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let model_config = data.model_config(config)?;
    let train_idx = data.manifest.split_indices(Split::Train);
    if train_idx.len() < 2 {
        return Err(TrainError::EmptySplit("train"));
    }
    if data.manifest.split_indices(Split::Validation).is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let pool = if config.oversample {
        dataset::oversample(
            &data.manifest,
            &dataset::default_age_bin_edges(),
            config.seed.wrapping_add(1),
        )
    } else {
        train_idx
    };

    let mut model = Burst2Vec::new(model_config, config.seed)?;
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(config.lr));
    let mut options = ObjectiveOptions::new(config.weights());
    options.adversarial = config.adversarial;
    let schedule = schedule_batches(pool, config.batch_size, config.seed.wrapping_add(2));
    let total_iterations = (schedule.batches_per_epoch() * config.max_epochs) as u64;

    let started = Instant::now();
    let mut log = TrainLog::default();
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best: Option<(Burst2Vec, u64, MetricsReport)> = None;
    let mut stopped_early = false;
    let mut iteration = 0u64;

    let mut run_validation =
        |model: &Burst2Vec, iteration: u64, log: &mut TrainLog| -> Result<bool, TrainError> {
            let report = validate(model, data, Split::Validation)?;
            let improved = stopper.observe(report.emo_ccc);
            log.validations.push(ValidationLogEntry {
                iteration,
                emo_ccc: report.emo_ccc,
                cou_uar: report.cou_uar,
                age_mae: report.age_mae,
                s_mtl: report.s_mtl,
                improved,
            });
            if improved || best.is_none() {
                best = Some((model.clone(), iteration, report));
            }
            Ok(stopper.should_stop())
        };

    for batch in schedule.take(total_iterations as usize) {
        iteration += 1;
        let input = data.input(&batch.indices)?;
        let targets = data.targets(&batch.indices)?;
        let loss = train_step(&mut model, &mut adam, &input, &targets, batch.task, options)
            .map_err(|e| match e {
                TrainError::NonFinite { task, detail, .. } => TrainError::NonFinite {
                    iteration,
                    task,
                    detail,
                },
                other => other,
            })?;
        log.entries.push(TrainLogEntry {
            iteration,
            epoch: batch.epoch,
            task: batch.task,
            l_o: loss.output,
            l_d: loss.discriminator,
            l_adv: loss.adversarial,
            l_total: loss.total,
            wall_clock: config
                .log_wall_clock
                .then(|| started.elapsed().as_secs_f64()),
        });
        if iteration.is_multiple_of(config.val_every) && run_validation(&model, iteration, &mut log)? {
            stopped_early = true;
            break;
        }
    }
    if log.validations.last().map(|v| v.iteration) != Some(iteration) {
        run_validation(&model, iteration, &mut log)?;
    }

    let labels = data.labels().clone();
    let (best_model, best_step, best_metrics) = best.expect("at least one validation ran");
    Ok(TrainOutcome {
        best: ModelCheckpoint::new(best_model, labels.clone(), best_step),
        last: ModelCheckpoint::new(model, labels, iteration),
        best_metrics,
        log,
        iterations: iteration,
        stopped_early,
    })
}
