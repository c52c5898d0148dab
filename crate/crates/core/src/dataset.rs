//! Label manifests, age normalization, cross-label oversampling and the
//! synthetic biased-dataset generator.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{self, AudioError, WaveformClip};

pub const NUM_EMOTIONS: usize = 10;
pub const DEFAULT_COUNTRIES: [&str; 4] = ["United States", "China", "South Africa", "Venezuela"];
pub const FEATURE_MAGIC: [u8; 4] = *b"B2VF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest header must be `clip_id,media,split,age,country,e0..e9`, got `{0}`")]
    BadHeader(String),
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("duplicate clip id {0}")]
    DuplicateId(String),
    #[error("clip {clip}: {detail}")]
    OutOfRange { clip: String, detail: String },
    #[error("line {line}: country `{country}` is not in the configured vocabulary")]
    UnknownCountry { line: usize, country: String },
    #[error("media file {0} does not exist")]
    MissingMedia(String),
    #[error("feature file {path}: {detail}")]
    FeatureFile { path: String, detail: String },
    #[error("degenerate age range [{0}, {1}]")]
    DegenerateRange(f64, f64),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "validation" | "val" | "valid" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Scale of emotion intensities in a manifest file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionScale {
    /// Self-report intensities in [1, 100]; divided by 100 on load.
    Raw,
    /// Already in [0, 1].
    Normalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub age_min: f64,
    pub age_max: f64,
    pub emotion_scale: EmotionScale,
    pub countries: Vec<String>,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            age_min: 20.0,
            age_max: 39.0,
            emotion_scale: EmotionScale::Normalized,
            countries: DEFAULT_COUNTRIES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl LabelConfig {
    pub fn num_countries(&self) -> usize {
        self.countries.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelRecord {
    pub clip_id: String,
    /// Normalized to [0, 1].
    pub emotions: [f64; NUM_EMOTIONS],
    pub age: f64,
    pub country: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<LabelRecord>,
    /// Absolute (or manifest-relative resolved) media paths, one per record.
    pub media: Vec<PathBuf>,
    pub labels: LabelConfig,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn manifest_header() -> Vec<String> {
    let mut h: Vec<String> = ["clip_id", "media", "split", "age", "country"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..NUM_EMOTIONS).map(|i| format!("e{i}")));
    h
}

/// Parses and validates a manifest CSV. Relative media paths are resolved
/// against the manifest's directory.
pub fn load_manifest(path: &Path, labels: &LabelConfig) -> Result<DatasetManifest, DatasetError> {
    if labels.age_max <= labels.age_min {
        return Err(DatasetError::DegenerateRange(labels.age_min, labels.age_max));
    }
    let root = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != manifest_header() {
        return Err(DatasetError::BadHeader(header.join(",")));
    }

    let mut records = Vec::new();
    let mut media = Vec::new();
    let mut seen = HashSet::new();
    for (row, result) in reader.records().enumerate() {
        let line = row + 2;
        let rec = result?;
        let parse_f64 = |idx: usize, what: &str| -> Result<f64, DatasetError> {
            rec[idx].parse::<f64>().map_err(|_| DatasetError::Parse {
                line,
                detail: format!("{what} `{}` is not a number", &rec[idx]),
            })
        };
        let clip_id = rec[0].to_string();
        if !seen.insert(clip_id.clone()) {
            return Err(DatasetError::DuplicateId(clip_id));
        }
        let split = Split::parse(&rec[2]).ok_or_else(|| DatasetError::Parse {
            line,
            detail: format!("unknown split `{}`", &rec[2]),
        })?;
        let age = parse_f64(3, "age")?;
        if !(labels.age_min..=labels.age_max).contains(&age) {
            return Err(DatasetError::OutOfRange {
                clip: clip_id,
                detail: format!("age {age} outside [{}, {}]", labels.age_min, labels.age_max),
            });
        }
        let country = labels
            .countries
            .iter()
            .position(|c| c == &rec[4])
            .ok_or_else(|| DatasetError::UnknownCountry {
                line,
                country: rec[4].to_string(),
            })?;
        let mut emotions = [0.0; NUM_EMOTIONS];
        for (k, e) in emotions.iter_mut().enumerate() {
            let raw = parse_f64(5 + k, "emotion")?;
            let (value, lo, hi) = match labels.emotion_scale {
                EmotionScale::Raw => (raw / 100.0, 1.0, 100.0),
                EmotionScale::Normalized => (raw, 0.0, 1.0),
            };
            if !(lo..=hi).contains(&raw) {
                return Err(DatasetError::OutOfRange {
                    clip: clip_id,
                    detail: format!("emotion e{k} = {raw} outside [{lo}, {hi}]"),
                });
            }
            *e = value;
        }
        let media_path = root.join(&rec[1]);
        if !media_path.exists() {
            return Err(DatasetError::MissingMedia(media_path.display().to_string()));
        }
        records.push(LabelRecord {
            clip_id,
            emotions,
            age,
            country,
            split,
        });
        media.push(media_path);
    }
    Ok(DatasetManifest {
        records,
        media,
        labels: labels.clone(),
    })
}

/// Writes `manifest` as CSV with media paths relative to `path`'s directory
/// when possible. Emotions are written on the normalized scale.
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), DatasetError> {
    let root = path.parent().unwrap_or(Path::new("."));
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(manifest_header())?;
    for (rec, media) in manifest.records.iter().zip(&manifest.media) {
        let rel = media.strip_prefix(root).unwrap_or(media);
        let mut row = vec![
            rec.clip_id.clone(),
            rel.display().to_string(),
            rec.split.as_str().to_string(),
            format!("{}", rec.age),
            manifest.labels.countries[rec.country].clone(),
        ];
        row.extend(rec.emotions.iter().map(|e| format!("{e}")));
        writer.write_record(row)?;
    }
    writer.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn normalize_age(age: f64, age_min: f64, age_max: f64) -> Result<f64, DatasetError> {
    if age_max <= age_min {
        return Err(DatasetError::DegenerateRange(age_min, age_max));
    }
    Ok((age - age_min) / (age_max - age_min))
}

pub fn denormalize_age(norm: f64, age_min: f64, age_max: f64) -> Result<f64, DatasetError> {
    if age_max <= age_min {
        return Err(DatasetError::DegenerateRange(age_min, age_max));
    }
    Ok(age_min + norm * (age_max - age_min))
}

/// Default age bins: four 5-year bins over [20, 40).
pub fn default_age_bin_edges() -> Vec<f64> {
    vec![20.0, 25.0, 30.0, 35.0, 40.0]
}

/// Bin index for `age`; values outside the edges fall into the nearest end bin.
pub fn age_bin(age: f64, edges: &[f64]) -> usize {
    let bins = edges.len().saturating_sub(1).max(1);
    let pos = edges[1..].iter().position(|&hi| age < hi).unwrap_or(bins - 1);
    pos.min(bins - 1)
}

/// Equalizes country × age-bin cells of the training split by sampling with
/// replacement up to the largest cell. The result lists every original
/// training index once, in manifest order, followed by the added duplicates
/// grouped by cell. Empty cells stay empty.
pub fn oversample(manifest: &DatasetManifest, age_bin_edges: &[f64], seed: u64) -> Vec<usize> {
    let train = manifest.split_indices(Split::Train);
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for &i in &train {
        let r = &manifest.records[i];
        cells
            .entry((r.country, age_bin(r.age, age_bin_edges)))
            .or_default()
            .push(i);
    }
    let target = cells.values().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = train;
    for members in cells.values() {
        for _ in members.len()..target {
            out.push(members[rng.random_range(0..members.len())]);
        }
    }
    out
}

/// `T × D` frame matrix stored in a feature file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFrames {
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

pub fn write_feature_file(path: &Path, feats: &FeatureFrames) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::with_capacity(16 + feats.data.len() * 4);
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(feats.frames as u32).to_le_bytes());
    buf.extend_from_slice(&(feats.dim as u32).to_le_bytes());
    for v in &feats.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureFrames, DatasetError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let bad = |detail: String| DatasetError::FeatureFile {
        path: path.display().to_string(),
        detail,
    };
    if bytes.len() < 16 {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != FEATURE_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (frames, dim) = (word(8) as usize, word(12) as usize);
    let expected = 16 + frames * dim * 4;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FeatureFrames { frames, dim, data })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    Waveform,
    Feature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub countries: usize,
    /// Target correlation between age and the older-country (index 0) indicator.
    pub rho: f64,
    pub mode: SynthMode,
    pub age_min: f64,
    pub age_max: f64,
    pub frames_min: usize,
    pub frames_max: usize,
    pub feature_dim: usize,
    /// Amplitude of the per-clip nuisance component shared by all tasks.
    pub nuisance_scale: f64,
    pub age_scale: f64,
    pub country_scale: f64,
    pub emotion_scale: f64,
    /// Standard deviation of per-frame noise.
    pub frame_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            countries: 4,
            rho: 0.6,
            mode: SynthMode::Feature,
            age_min: 20.0,
            age_max: 39.0,
            frames_min: 16,
            frames_max: 24,
            feature_dim: 64,
            nuisance_scale: 0.5,
            age_scale: 1.0,
            country_scale: 1.0,
            emotion_scale: 1.0,
            frame_noise: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let fail = |m: &str| Err(DatasetError::InvalidConfig(m.to_string()));
        if self.n == 0 {
            return fail("n must be positive");
        }
        if self.countries < 2 {
            return fail("at least two countries are required");
        }
        if !(-1.0..=1.0).contains(&self.rho) || !self.rho.is_finite() {
            return fail("rho must lie in [-1, 1]");
        }
        if self.age_max <= self.age_min {
            return fail("age_max must exceed age_min");
        }
        if self.frames_min == 0 || self.frames_max < self.frames_min {
            return fail("frame range must satisfy 1 <= frames_min <= frames_max");
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive");
        }
        let scales = [
            self.nuisance_scale,
            self.age_scale,
            self.country_scale,
            self.emotion_scale,
            self.frame_noise,
        ];
        if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return fail("component scales must be finite and nonnegative");
        }
        Ok(())
    }

    pub fn labels(&self) -> LabelConfig {
        let countries = (0..self.countries)
            .map(|c| match DEFAULT_COUNTRIES.get(c) {
                Some(name) if self.countries <= DEFAULT_COUNTRIES.len() => name.to_string(),
                _ => format!("country{c}"),
            })
            .collect();
        LabelConfig {
            age_min: self.age_min,
            age_max: self.age_max,
            emotion_scale: EmotionScale::Normalized,
            countries,
        }
    }

    /// Mixture weight `w` in `age_norm = w·J + (1 − w)·U` that yields
    /// correlation `rho` with the indicator `J`, `U ~ Uniform(0, 1)`.
    fn mixture_weight(&self) -> f64 {
        let p = 1.0 / self.countries as f64;
        let s = (p * (1.0 - p)).sqrt();
        let r = self.rho.abs();
        let u_sd = 1.0 / 12f64.sqrt();
        if r == 0.0 {
            return 0.0;
        }
        r * u_sd / (s * (1.0 - r * r).sqrt() + r * u_sd)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SynthMedia {
    Frames(FeatureFrames),
    Waveform(WaveformClip),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub records: Vec<LabelRecord>,
    pub media: Vec<SynthMedia>,
    pub labels: LabelConfig,
}

fn split_for(index: usize) -> Split {
    match index % 20 {
        0..=13 => Split::Train,
        14..=16 => Split::Validation,
        _ => Split::Test,
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let scale = 1.0 / (rows as f64).sqrt();
    (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>()
}

/// Directions that map task labels into feature space, shared by all clips.
struct FeatureMixing {
    nuisance: Vec<f64>,
    age: Vec<f64>,
    country: Vec<f64>,
    emotion: Vec<f64>,
}

const NUISANCE_RANK: usize = 4;

/// Generates labels and media. Clip `i` draws from its own stream seeded with
/// `seed + i`, so the output is a pure function of `(config, seed)`.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<SynthDataset, DatasetError> {
    config.validate()?;
    let d = config.feature_dim;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    master.set_stream(1);
    let mixing = FeatureMixing {
        nuisance: gaussian_matrix(&mut master, d, NUISANCE_RANK),
        age: gaussian_matrix(&mut master, d, 1),
        country: gaussian_matrix(&mut master, d, config.countries),
        emotion: gaussian_matrix(&mut master, d, NUM_EMOTIONS),
    };
    let weight = config.mixture_weight();
    let labels = config.labels();

    let mut records = Vec::with_capacity(config.n);
    let mut media = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let country = rng.random_range(0..config.countries);
        let older = (country == 0) as u8 as f64;
        let indicator = if config.rho >= 0.0 { older } else { 1.0 - older };
        let u: f64 = rng.random();
        let age_norm = weight * indicator + (1.0 - weight) * u;
        let age = config.age_min + age_norm * (config.age_max - config.age_min);
        let mut emotions = [0.0; NUM_EMOTIONS];
        for e in emotions.iter_mut() {
            *e = rng.random();
        }
        let record = LabelRecord {
            clip_id: format!("synth_{i:06}"),
            emotions,
            age,
            country,
            split: split_for(i),
        };
        let clip = match config.mode {
            SynthMode::Feature => {
                SynthMedia::Frames(feature_clip(config, &mixing, &record, age_norm, &mut rng))
            }
            SynthMode::Waveform => SynthMedia::Waveform(waveform_clip(&record, age_norm, &mut rng)),
        };
        records.push(record);
        media.push(clip);
    }
    Ok(SynthDataset {
        records,
        media,
        labels,
    })
}

fn feature_clip(
    config: &SynthConfig,
    mixing: &FeatureMixing,
    record: &LabelRecord,
    age_norm: f64,
    rng: &mut ChaCha8Rng,
) -> FeatureFrames {
    let d = config.feature_dim;
    let c = config.countries;
    let frames = rng.random_range(config.frames_min..=config.frames_max);
    let z: Vec<f64> = (0..NUISANCE_RANK)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let mut clip = vec![0.0; d];
    for (row, v) in clip.iter_mut().enumerate() {
        let nuisance: f64 = (0..NUISANCE_RANK)
            .map(|k| mixing.nuisance[row * NUISANCE_RANK + k] * z[k])
            .sum();
        let emotion: f64 = (0..NUM_EMOTIONS)
            .map(|k| mixing.emotion[row * NUM_EMOTIONS + k] * 2.0 * (record.emotions[k] - 0.5))
            .sum();
        *v = config.nuisance_scale * nuisance
            + config.age_scale * mixing.age[row] * 2.0 * (age_norm - 0.5)
            + config.country_scale * mixing.country[row * c + record.country]
            + config.emotion_scale * emotion;
    }
    let mut data = Vec::with_capacity(frames * d);
    for _ in 0..frames {
        for &v in &clip {
            let noise: f64 = StandardNormal.sample(rng);
            data.push((v + config.frame_noise * noise) as f32);
        }
    }
    FeatureFrames {
        frames,
        dim: d,
        data,
    }
}

/// 0.5–1.5 s at 16 kHz: harmonic source whose fundamental falls with age,
/// a country-specific partial, emotion-driven amplitude modulation and
/// white noise at 20 dB SNR.
fn waveform_clip(record: &LabelRecord, age_norm: f64, rng: &mut ChaCha8Rng) -> WaveformClip {
    use std::f64::consts::PI;
    let rate = audio_io::TARGET_SAMPLE_RATE as f64;
    let duration: f64 = rng.random_range(0.5..=1.5);
    let n = (duration * rate).round() as usize;
    let f0 = 280.0 - 140.0 * age_norm;
    let bump = 900.0 + 500.0 * record.country as f64;
    let phases: Vec<f64> = (0..NUM_EMOTIONS).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let mut samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let source: f64 = (1..=4)
                .map(|h| (2.0 * PI * f0 * h as f64 * t).sin() / h as f64)
                .sum::<f64>()
                + 0.4 * (2.0 * PI * bump * t).sin();
            let envelope = 1.0
                + 0.1
                    * (0..NUM_EMOTIONS)
                        .map(|k| {
                            let rate_hz = 3.0 + 2.0 * k as f64;
                            record.emotions[k] * (2.0 * PI * rate_hz * t + phases[k]).sin()
                        })
                        .sum::<f64>();
            source * envelope
        })
        .collect();
    let noise_sd = audio_io::rms(&samples) / 10.0;
    for s in samples.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *s += noise_sd * z;
    }
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        for s in samples.iter_mut() {
            *s *= 0.5 / peak;
        }
    }
    WaveformClip::new(samples, audio_io::TARGET_SAMPLE_RATE, record.clip_id.clone())
}

impl SynthDataset {
    /// Writes media files and `manifest.csv` under `dir`; returns the manifest.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest, DatasetError> {
        let media_dir = dir.join("media");
        fs::create_dir_all(&media_dir).map_err(io_err(&media_dir))?;
        let mut paths = Vec::with_capacity(self.records.len());
        for (rec, m) in self.records.iter().zip(&self.media) {
            let path = match m {
                SynthMedia::Frames(f) => {
                    let p = media_dir.join(format!("{}.b2vf", rec.clip_id));
                    write_feature_file(&p, f)?;
                    p
                }
                SynthMedia::Waveform(w) => {
                    let p = media_dir.join(format!("{}.wav", rec.clip_id));
                    audio_io::write_wav_i16(&p, w)?;
                    p
                }
            };
            paths.push(path);
        }
        let manifest = DatasetManifest {
            records: self.records.clone(),
            media: paths,
            labels: self.labels.clone(),
        };
        write_manifest(&dir.join("manifest.csv"), &manifest)?;
        Ok(manifest)
    }
}

/// Pearson correlation of two equally long samples.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}
