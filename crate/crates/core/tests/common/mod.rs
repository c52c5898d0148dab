#![allow(dead_code)]

use std::collections::BTreeMap;

use burst2vec::audio_io::{pad_batch, WaveformClip};
use burst2vec::dataset::NUM_EMOTIONS;
use burst2vec::diffcore::{Graph, Tensor};
use burst2vec::losses::{
    task_objective, BatchTargets, LossWeights, ObjectiveOptions, TargetNodes, TaskBatchLoss,
};
use burst2vec::model::{
    Burst2Vec, ConvLayer, EncoderConfig, EncoderInput, EncoderMode, FrameBatch, ModelConfig,
    TaskId,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOY_BATCH: usize = 4;
pub const TOY_D: usize = 8;
pub const TOY_COUNTRIES: usize = 4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Toy model: even seeds use feature frames, odd seeds a small conv stack.
pub fn toy_config(seed: u64) -> ModelConfig {
    let encoder = if seed.is_multiple_of(2) {
        EncoderConfig::feature(6)
    } else {
        EncoderConfig {
            mode: EncoderMode::Conv,
            layers: vec![
                ConvLayer { kernel: 4, stride: 2, channels: 3 },
                ConvLayer { kernel: 3, stride: 1, channels: 5 },
            ],
            output_dim: 5,
        }
    };
    ModelConfig {
        encoder,
        proj_dim: TOY_D,
        hidden_dim: TOY_D,
        num_countries: TOY_COUNTRIES,
    }
}

/// Random input matching `config`, with unequal clip lengths so padding and
/// valid-frame pooling are exercised.
pub fn toy_input(config: &ModelConfig, rng: &mut ChaCha8Rng) -> EncoderInput {
    match config.encoder.mode {
        EncoderMode::Feature => {
            let dim = config.encoder.output_dim;
            let clips: Vec<(Vec<f64>, usize)> = (0..TOY_BATCH)
                .map(|_| {
                    let t = rng.random_range(2..6);
                    ((0..t * dim).map(|_| rng.random_range(-1.0..1.0)).collect(), t)
                })
                .collect();
            let refs: Vec<(&[f64], usize)> = clips.iter().map(|(v, t)| (v.as_slice(), *t)).collect();
            EncoderInput::Frames(FrameBatch::from_clips(&refs, dim))
        }
        EncoderMode::Conv => {
            let clips: Vec<WaveformClip> = (0..TOY_BATCH)
                .map(|i| {
                    let n = rng.random_range(16..28);
                    let s = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                    WaveformClip::new(s, 16_000, format!("toy{i}"))
                })
                .collect();
            let refs: Vec<&WaveformClip> = clips.iter().collect();
            EncoderInput::Waveform(pad_batch(&refs).unwrap())
        }
    }
}

pub fn toy_targets(rng: &mut ChaCha8Rng, rows: usize, countries: usize) -> BatchTargets {
    BatchTargets {
        emotions: uniform(rng, &[rows, NUM_EMOTIONS], 0.0, 1.0),
        age: uniform(rng, &[rows], 0.0, 1.0),
        country: (0..rows).map(|_| rng.random_range(0..countries)).collect(),
    }
}

/// Forward-only loss values of a task batch.
pub fn objective_values(
    model: &Burst2Vec,
    input: &EncoderInput,
    targets: &BatchTargets,
    task: TaskId,
    weights: LossWeights,
) -> TaskBatchLoss {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let bundle = model.represent(&mut g, &b, input).unwrap();
    let t = TargetNodes::insert(&mut g, targets);
    let obj = task_objective(&mut g, model, &b, task, bundle, &t, ObjectiveOptions::new(weights))
        .unwrap();
    obj.values(&g, weights)
}

/// Gradients the training graph delivers for every parameter (zeros where
/// the objective does not reach).
pub fn analytic_gradients(
    model: &Burst2Vec,
    input: &EncoderInput,
    targets: &BatchTargets,
    task: TaskId,
    weights: LossWeights,
) -> BTreeMap<String, Tensor> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let bundle = model.represent(&mut g, &b, input).unwrap();
    let t = TargetNodes::insert(&mut g, targets);
    let obj = task_objective(&mut g, model, &b, task, bundle, &t, ObjectiveOptions::new(weights))
        .unwrap();
    let grads = g.backward(obj.realized).unwrap();
    b.iter()
        .map(|(name, id)| (name.to_string(), grads.wrt(id)))
        .collect()
}

/// Parameters sitting downstream of a reversal node for a task-`j` batch:
/// they descend their own losses instead of the logged objective.
pub fn descends_own_loss(name: &str, task: TaskId) -> bool {
    name.starts_with("discriminator.") || name.starts_with(&format!("head.{task}."))
}

/// Central-difference oracle. Head `j` and the discriminator are checked
/// against `L_O + L_D + L_Adv`; everything else against the logged
/// `L_O − α1·L_D − α2·L_Adv`.
pub fn numeric_gradients(
    model: &Burst2Vec,
    input: &EncoderInput,
    targets: &BatchTargets,
    task: TaskId,
    weights: LossWeights,
    step: f64,
) -> BTreeMap<String, Tensor> {
    let mut probe = model.clone();
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let mut out = BTreeMap::new();
    for name in names {
        let own = descends_own_loss(&name, task);
        let value = |m: &Burst2Vec| {
            let v = objective_values(m, input, targets, task, weights);
            if own {
                v.output + v.discriminator + v.adversarial
            } else {
                v.total
            }
        };
        let base = model.params.get(&name).unwrap().clone();
        let mut grad = Tensor::zeros(base.shape());
        for k in 0..base.len() {
            probe.params.get_mut(&name).unwrap().data_mut()[k] = base.data()[k] + step;
            let up = value(&probe);
            probe.params.get_mut(&name).unwrap().data_mut()[k] = base.data()[k] - step;
            let down = value(&probe);
            probe.params.get_mut(&name).unwrap().data_mut()[k] = base.data()[k];
            grad.data_mut()[k] = (up - down) / (2.0 * step);
        }
        out.insert(name, grad);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)` over the concatenation of all tensors.
pub fn relative_error(
    a: &BTreeMap<String, Tensor>,
    b: &BTreeMap<String, Tensor>,
    floor: f64,
) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (name, ta) in a {
        let tb = &b[name];
        for (x, y) in ta.data().iter().zip(tb.data()) {
            diff += (x - y) * (x - y);
            na += x * x;
            nb += y * y;
        }
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(floor)
}

/// Toy model at a generic point: biases are drawn at random instead of zero,
/// so no ReLU sits exactly on its kink (zero inputs times zero biases).
pub fn toy_model(seed: u64) -> Burst2Vec {
    let mut model = Burst2Vec::new(toy_config(seed), seed).unwrap();
    let mut r = rng(seed.wrapping_add(0x5bd1_e995));
    for (name, t) in model.params.iter_mut() {
        if name.ends_with(".bias") {
            for v in t.data_mut() {
                *v = r.random_range(-0.1..0.1);
            }
        }
    }
    model
}

/// One end-to-end gradient comparison; returns the relative error.
pub fn end_to_end_gradient_error(seed: u64) -> f64 {
    let config = toy_config(seed);
    let model = toy_model(seed);
    let mut r = rng(seed ^ 0x9e37_79b9);
    let input = toy_input(&config, &mut r);
    let targets = toy_targets(&mut r, TOY_BATCH, TOY_COUNTRIES);
    let task = TaskId::ALL[(seed % 3) as usize];
    let weights = LossWeights::default();
    let analytic = analytic_gradients(&model, &input, &targets, task, weights);
    let numeric = numeric_gradients(&model, &input, &targets, task, weights, 1e-6);
    relative_error(&analytic, &numeric, 1e-12)
}
