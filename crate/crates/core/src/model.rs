//! The multi-task network: encoder → valid-frame average pooling →
//! projection → one shared and three task-specific extractors → per-task
//! concatenation projections → output heads, plus the task discriminator that
//! sits behind a gradient reversal node on the shared representation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio_io::PaddedBatch;
use crate::dataset::{LabelConfig, NUM_EMOTIONS};
use crate::diffcore::{conv_output_len, DiffError, Graph, NodeId, ParamStore, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("encoder is in {expected} mode but received {got} input")]
    ModeMismatch {
        expected: &'static str,
        got: &'static str,
    },
    #[error("feature dimension {got} does not match encoder output dimension {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("clip {row} has no valid frames ({samples} valid samples)")]
    ZeroValidFrames { row: usize, samples: usize },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Emotion,
    Age,
    Country,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Emotion, TaskId::Age, TaskId::Country];

    pub fn index(self) -> usize {
        match self {
            TaskId::Emotion => 0,
            TaskId::Age => 1,
            TaskId::Country => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Emotion => "emotion",
            TaskId::Age => "age",
            TaskId::Country => "country",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        TaskId::ALL.into_iter().find(|t| t.name() == s)
    }

    /// The two tasks other than `self`, in canonical order.
    pub fn others(self) -> [TaskId; 2] {
        match self {
            TaskId::Emotion => [TaskId::Age, TaskId::Country],
            TaskId::Age => [TaskId::Emotion, TaskId::Country],
            TaskId::Country => [TaskId::Emotion, TaskId::Age],
        }
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    /// Strided 1-D convolutions over raw 16 kHz samples.
    Conv,
    /// Precomputed frame features read from feature files.
    Feature,
}

impl EncoderMode {
    pub fn name(self) -> &'static str {
        match self {
            EncoderMode::Conv => "conv",
            EncoderMode::Feature => "feature",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conv" => Some(EncoderMode::Conv),
            "feature" | "feature-file" => Some(EncoderMode::Feature),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    pub layers: Vec<ConvLayer>,
    /// Frame feature width `D_enc`.
    pub output_dim: usize,
}

impl EncoderConfig {
    /// Kernels 10, 8, 4, 4 with strides 5, 4, 2, 2: a total stride of 320
    /// samples, i.e. 50 frames per second at 16 kHz.
    pub fn conv_default() -> Self {
        let spec = [(10, 5, 16), (8, 4, 32), (4, 2, 64), (4, 2, 64)];
        Self {
            mode: EncoderMode::Conv,
            layers: spec
                .iter()
                .map(|&(kernel, stride, channels)| ConvLayer {
                    kernel,
                    stride,
                    channels,
                })
                .collect(),
            output_dim: 64,
        }
    }

    pub fn feature(output_dim: usize) -> Self {
        Self {
            mode: EncoderMode::Feature,
            layers: Vec::new(),
            output_dim,
        }
    }

    /// Frames whose receptive field lies entirely within `samples` valid samples.
    pub fn valid_frames(&self, samples: usize) -> usize {
        self.layers
            .iter()
            .fold(samples, |len, l| conv_output_len(len, l.kernel, l.stride))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Width `d` of the projection and every representation.
    pub proj_dim: usize,
    /// Hidden width `h` of extractors and the discriminator.
    pub hidden_dim: usize,
    pub num_countries: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::conv_default(),
            proj_dim: 32,
            hidden_dim: 64,
            num_countries: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.encoder.output_dim == 0 || self.proj_dim == 0 || self.hidden_dim == 0 {
            return fail("dimensions must be positive".into());
        }
        if self.num_countries < 2 {
            return fail("at least two country classes are required".into());
        }
        if self.encoder.mode == EncoderMode::Conv {
            if self.encoder.layers.is_empty() {
                return fail("conv encoder needs at least one layer".into());
            }
            if self
                .encoder
                .layers
                .iter()
                .any(|l| l.stride == 0 || l.kernel == 0 || l.channels == 0)
            {
                return fail("conv kernels, strides and channels must be >= 1".into());
            }
            let last = self.encoder.layers.last().unwrap().channels;
            if last != self.encoder.output_dim {
                return fail(format!(
                    "last conv layer has {last} channels but output_dim is {}",
                    self.encoder.output_dim
                ));
            }
        }
        Ok(())
    }

    pub fn head_width(&self, task: TaskId) -> usize {
        match task {
            TaskId::Emotion => NUM_EMOTIONS,
            TaskId::Age => 1,
            TaskId::Country => self.num_countries,
        }
    }

    /// Parameter names and shapes, in name order.
    pub fn parameter_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (d, h) = (self.proj_dim, self.hidden_dim);
        let mut shapes = BTreeMap::new();
        let mut linear = |prefix: String, fan_in: usize, fan_out: usize| {
            shapes.insert(format!("{prefix}.weight"), vec![fan_in, fan_out]);
            shapes.insert(format!("{prefix}.bias"), vec![fan_out]);
        };
        linear("projection".into(), self.encoder.output_dim, d);
        for name in ["shared", "emotion", "age", "country"] {
            linear(format!("extractor.{name}.fc1"), d, h);
            linear(format!("extractor.{name}.fc2"), h, d);
        }
        for task in TaskId::ALL {
            linear(format!("concat.{task}"), 2 * d, d);
            linear(format!("head.{task}"), d, self.head_width(task));
        }
        linear("discriminator.fc1".into(), d, h);
        linear("discriminator.fc2".into(), h, TaskId::ALL.len());
        if self.encoder.mode == EncoderMode::Conv {
            let mut cin = 1;
            for (i, l) in self.encoder.layers.iter().enumerate() {
                shapes.insert(format!("encoder.conv{i}.weight"), vec![l.kernel, cin, l.channels]);
                shapes.insert(format!("encoder.conv{i}.bias"), vec![l.channels]);
                cin = l.channels;
            }
        }
        shapes
    }
}

/// Frame features for a batch, zero padded to the longest clip.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBatch {
    /// `B × T_max × D`, row-major.
    pub data: Vec<f64>,
    pub batch: usize,
    pub max_frames: usize,
    pub dim: usize,
    pub valid_frames: Vec<usize>,
}

impl FrameBatch {
    /// Pads per-clip `T_i × D` matrices (row-major) into one batch.
    pub fn from_clips(clips: &[(&[f64], usize)], dim: usize) -> Self {
        let max_frames = clips.iter().map(|c| c.1).max().unwrap_or(0);
        let mut data = vec![0.0; clips.len() * max_frames * dim];
        for (i, (values, frames)) in clips.iter().enumerate() {
            let start = i * max_frames * dim;
            data[start..start + frames * dim].copy_from_slice(&values[..frames * dim]);
        }
        Self {
            data,
            batch: clips.len(),
            max_frames,
            dim,
            valid_frames: clips.iter().map(|c| c.1).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncoderInput {
    Waveform(PaddedBatch),
    Frames(FrameBatch),
}

impl EncoderInput {
    pub fn batch_size(&self) -> usize {
        match self {
            EncoderInput::Waveform(b) => b.rows,
            EncoderInput::Frames(f) => f.batch,
        }
    }
}

/// Graph nodes of every representation for one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RepresentationBundle {
    pub shared: NodeId,
    /// Indexed by [`TaskId::index`].
    pub spec: [NodeId; 3],
    pub concat: [NodeId; 3],
}

impl RepresentationBundle {
    pub fn spec(&self, task: TaskId) -> NodeId {
        self.spec[task.index()]
    }

    pub fn concat(&self, task: TaskId) -> NodeId {
        self.concat[task.index()]
    }
}

/// Parameter leaves inserted into a graph, by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    nodes: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn node(&self, name: &str) -> NodeId {
        *self
            .nodes
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Burst2Vec {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Burst2Vec {
    /// Uniform(±1/√fan_in) weights and zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.parameter_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { config, params })
    }

    /// All parameters zero.
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in config.parameter_shapes() {
            params.insert(name, Tensor::zeros(&shape));
        }
        Ok(Self { config, params })
    }

    /// Inserts every parameter as a leaf; trainable leaves receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let nodes = self
            .params
            .iter()
            .map(|(name, t)| {
                let id = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.to_string(), id)
            })
            .collect();
        Bound { nodes }
    }

    fn linear(
        &self,
        g: &mut Graph,
        b: &Bound,
        prefix: &str,
        x: NodeId,
    ) -> Result<NodeId, ModelError> {
        let y = g.matmul(x, b.node(&format!("{prefix}.weight")))?;
        Ok(g.add_bias(y, b.node(&format!("{prefix}.bias")))?)
    }

    /// `B×T'×D_enc` frames and the valid-frame count of each clip.
    pub fn encode(
        &self,
        g: &mut Graph,
        b: &Bound,
        input: &EncoderInput,
    ) -> Result<(NodeId, Vec<usize>), ModelError> {
        let enc = &self.config.encoder;
        match (enc.mode, input) {
            (EncoderMode::Feature, EncoderInput::Frames(f)) => {
                if f.dim != enc.output_dim {
                    return Err(ModelError::FeatureDim {
                        expected: enc.output_dim,
                        got: f.dim,
                    });
                }
                let x = g.constant(Tensor::new(
                    vec![f.batch, f.max_frames, f.dim],
                    f.data.clone(),
                )?);
                Ok((x, f.valid_frames.clone()))
            }
            (EncoderMode::Conv, EncoderInput::Waveform(w)) => {
                let mut valid = Vec::with_capacity(w.rows);
                for (row, &samples) in w.valid_lengths.iter().enumerate() {
                    let frames = enc.valid_frames(samples);
                    if frames == 0 {
                        return Err(ModelError::ZeroValidFrames { row, samples });
                    }
                    valid.push(frames);
                }
                let mut x = g.constant(Tensor::new(vec![w.rows, w.max_len, 1], w.samples.clone())?);
                for i in 0..enc.layers.len() {
                    let y = g.conv1d(
                        x,
                        b.node(&format!("encoder.conv{i}.weight")),
                        enc.layers[i].stride,
                    )?;
                    let y = g.add_bias(y, b.node(&format!("encoder.conv{i}.bias")))?;
                    x = g.relu(y);
                }
                Ok((x, valid))
            }
            (mode, input) => Err(ModelError::ModeMismatch {
                expected: mode.name(),
                got: match input {
                    EncoderInput::Waveform(_) => "waveform",
                    EncoderInput::Frames(_) => "frame",
                },
            }),
        }
    }

    /// Mean over valid frames followed by the `D_enc → d` projection.
    pub fn pool_and_project(
        &self,
        g: &mut Graph,
        b: &Bound,
        frames: NodeId,
        valid: &[usize],
    ) -> Result<NodeId, ModelError> {
        if let Some(row) = valid.iter().position(|&c| c == 0) {
            return Err(ModelError::ZeroValidFrames { row, samples: 0 });
        }
        let pooled = g.masked_mean_pool(frames, valid)?;
        self.linear(g, b, "projection", pooled)
    }

    fn extractor(
        &self,
        g: &mut Graph,
        b: &Bound,
        name: &str,
        x: NodeId,
    ) -> Result<NodeId, ModelError> {
        let hdn = self.linear(g, b, &format!("extractor.{name}.fc1"), x)?;
        let hdn = g.relu(hdn);
        self.linear(g, b, &format!("extractor.{name}.fc2"), hdn)
    }

    pub fn extract(
        &self,
        g: &mut Graph,
        b: &Bound,
        projected: NodeId,
    ) -> Result<RepresentationBundle, ModelError> {
        let shared = self.extractor(g, b, "shared", projected)?;
        let mut spec = [shared; 3];
        let mut concat = [shared; 3];
        for task in TaskId::ALL {
            let s = self.extractor(g, b, task.name(), projected)?;
            let joined = g.concat(shared, s)?;
            spec[task.index()] = s;
            concat[task.index()] = self.linear(g, b, &format!("concat.{task}"), joined)?;
        }
        Ok(RepresentationBundle {
            shared,
            spec,
            concat,
        })
    }

    /// Raw head outputs: `B×10` for emotion, `B` (normalized age) for age,
    /// `B×C` logits for country.
    pub fn head_forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        task: TaskId,
        rep: NodeId,
    ) -> Result<NodeId, ModelError> {
        let out = self.linear(g, b, &format!("head.{task}"), rep)?;
        if task == TaskId::Age {
            let rows = g.shape(out)[0];
            return Ok(g.reshape(out, vec![rows])?);
        }
        Ok(out)
    }

    /// `B×3` task logits from the shared representation. With
    /// `Some(lambda)` the input first passes a gradient reversal node.
    pub fn discriminate(
        &self,
        g: &mut Graph,
        b: &Bound,
        shared: NodeId,
        reversal: Option<f64>,
    ) -> Result<NodeId, ModelError> {
        let input = match reversal {
            Some(lambda) => g.gradient_reversal(shared, lambda),
            None => shared,
        };
        let hdn = self.linear(g, b, "discriminator.fc1", input)?;
        let hdn = g.relu(hdn);
        self.linear(g, b, "discriminator.fc2", hdn)
    }

    /// Encoder through extractors in one call.
    pub fn represent(
        &self,
        g: &mut Graph,
        b: &Bound,
        input: &EncoderInput,
    ) -> Result<RepresentationBundle, ModelError> {
        let (frames, valid) = self.encode(g, b, input)?;
        let projected = self.pool_and_project(g, b, frames, &valid)?;
        self.extract(g, b, projected)
    }

    /// Inference through the concatenated representations only, with emotion
    /// and age outputs clamped to [0, 1].
    pub fn predict(&self, input: &EncoderInput) -> Result<Predictions, ModelError> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let bundle = self.represent(&mut g, &b, input)?;
        let emo = self.head_forward(&mut g, &b, TaskId::Emotion, bundle.concat(TaskId::Emotion))?;
        let age = self.head_forward(&mut g, &b, TaskId::Age, bundle.concat(TaskId::Age))?;
        let cty = self.head_forward(&mut g, &b, TaskId::Country, bundle.concat(TaskId::Country))?;
        let probs = g.softmax(cty);
        let rows = input.batch_size();
        let emotions = (0..rows)
            .map(|r| {
                let mut e = [0.0; NUM_EMOTIONS];
                for (dst, &v) in e.iter_mut().zip(g.value(emo).row(r)) {
                    *dst = v.clamp(0.0, 1.0);
                }
                e
            })
            .collect();
        let age_norm = g.value(age).data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let country_probs = (0..rows).map(|r| g.value(probs).row(r).to_vec()).collect();
        Ok(Predictions {
            emotions,
            age_norm,
            country_probs,
        })
    }

    /// Forward values of every representation, for probing.
    pub fn representations(&self, input: &EncoderInput) -> Result<Representations, ModelError> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let bundle = self.represent(&mut g, &b, input)?;
        Ok(Representations {
            shared: g.value(bundle.shared).clone(),
            spec: bundle.spec.map(|id| g.value(id).clone()),
            concat: bundle.concat.map(|id| g.value(id).clone()),
        })
    }
}

/// Inference outputs for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub emotions: Vec<[f64; NUM_EMOTIONS]>,
    pub age_norm: Vec<f64>,
    pub country_probs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Representations {
    pub shared: Tensor,
    pub spec: [Tensor; 3],
    pub concat: [Tensor; 3],
}

// Checkpoint file: b"B2VC", u32 version, u64 index length, JSON index, then
// the f32 little-endian blob. All integers little-endian.
const CKPT_MAGIC: [u8; 4] = *b"B2VC";
const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: usize,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointIndex {
    fingerprint: String,
    step: u64,
    model: ModelConfig,
    labels: LabelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Burst2Vec,
    pub labels: LabelConfig,
    pub step: u64,
}

/// SHA-256 over the architecture, label normalization and parameter layout.
pub fn config_fingerprint(config: &ModelConfig, labels: &LabelConfig) -> String {
    let canonical = serde_json::json!({
        "model": config,
        "labels": labels,
        "parameters": config.parameter_shapes(),
    });
    let digest = Sha256::digest(canonical.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl ModelCheckpoint {
    pub fn new(model: Burst2Vec, labels: LabelConfig, step: u64) -> Self {
        Self {
            model,
            labels,
            step,
        }
    }

    pub fn fingerprint(&self) -> String {
        config_fingerprint(&self.model.config, &self.labels)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let mut tensors = Vec::new();
        let mut blob = Vec::with_capacity(self.model.params.numel() * 4);
        for (name, t) in self.model.params.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                offset,
                shape: t.shape().to_vec(),
            });
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
            offset += t.len();
        }
        let index = CheckpointIndex {
            fingerprint: self.fingerprint(),
            step: self.step,
            model: self.model.config.clone(),
            labels: self.labels.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&index).expect("index serializes");
        let mut out = Vec::with_capacity(16 + json.len() + blob.len());
        out.extend_from_slice(&CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self, ModelError> {
        let bad = |detail: String| ModelError::Checkpoint {
            path: origin.to_string(),
            detail,
        };
        if bytes.len() < 16 || bytes[..4] != CKPT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let index_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let index_end = 16usize
            .checked_add(index_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated index".into()))?;
        let index: CheckpointIndex = serde_json::from_slice(&bytes[16..index_end])
            .map_err(|e| bad(format!("index: {e}")))?;
        index.model.validate()?;
        let expected_fp = config_fingerprint(&index.model, &index.labels);
        if index.fingerprint != expected_fp {
            return Err(bad("config fingerprint does not match the stored config".into()));
        }
        let blob = &bytes[index_end..];
        if !blob.len().is_multiple_of(4) {
            return Err(bad("blob length is not a multiple of 4".into()));
        }
        let values: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let expected = index.model.parameter_shapes();
        let mut params = ParamStore::new();
        for entry in &index.tensors {
            let Some(shape) = expected.get(&entry.name) else {
                return Err(bad(format!("unexpected parameter {}", entry.name)));
            };
            if shape != &entry.shape {
                return Err(bad(format!(
                    "{} has shape {:?}, expected {:?}",
                    entry.name, entry.shape, shape
                )));
            }
            let n: usize = shape.iter().product();
            let slice = values
                .get(entry.offset..entry.offset + n)
                .ok_or_else(|| bad(format!("{} extends past the blob", entry.name)))?;
            let data = slice.iter().map(|&v| v as f64).collect();
            if params.insert(entry.name.clone(), Tensor::new(shape.clone(), data)?).is_some() {
                return Err(bad(format!("parameter {} appears twice", entry.name)));
            }
        }
        if let Some(missing) = expected.keys().find(|k| !params.contains(k)) {
            return Err(bad(format!("missing parameter {missing}")));
        }
        Ok(Self {
            model: Burst2Vec {
                config: index.model,
                params,
            },
            labels: index.labels,
            step: index.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
