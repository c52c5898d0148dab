mod common;

use burst2vec::dataset::{synth_generate, Split, SynthConfig};
use burst2vec::diffcore::{AdamConfig, AdamState};
use burst2vec::evalkit::{evaluate, PredictionSet};
use burst2vec::losses::{LossWeights, ObjectiveOptions};
use burst2vec::model::{Burst2Vec, TaskId};
use burst2vec::trainer::{predict_indices, train, train_step, TrainConfig, TrainingData};
use common::{toy_config, toy_input, toy_model, toy_targets, TOY_BATCH, TOY_COUNTRIES};

fn small_data(n: usize, seed: u64) -> TrainingData {
    let cfg = SynthConfig {
        n,
        feature_dim: 16,
        frames_min: 4,
        frames_max: 8,
        ..SynthConfig::default()
    };
    TrainingData::from_synth(&synth_generate(&cfg, seed).unwrap()).unwrap()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 16,
        max_epochs: 2,
        val_every: 1000,
        proj_dim: 8,
        hidden_dim: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn other_heads_are_untouched_by_a_step() {
    for seed in 0..6u64 {
        let task = TaskId::ALL[(seed % 3) as usize];
        let config = toy_config(seed);
        let mut model = toy_model(seed);
        let before = model.clone();
        let mut r = common::rng(seed);
        let input = toy_input(&config, &mut r);
        let targets = toy_targets(&mut r, TOY_BATCH, TOY_COUNTRIES);
        let mut adam = AdamState::new(AdamConfig::with_learning_rate(1e-2));
        let options = ObjectiveOptions::new(LossWeights::default());
        train_step(&mut model, &mut adam, &input, &targets, task, options).unwrap();
        for (name, t) in model.params.iter() {
            let old = before.params.get(name).unwrap();
            let other_head = name.starts_with("head.") && !name.starts_with(&format!("head.{task}."));
            if other_head {
                assert_eq!(t, old, "{name} moved on a {task} batch");
            }
        }
        for name in [format!("head.{task}.weight"), "discriminator.fc1.weight".to_string()] {
            assert_ne!(model.params.get(&name), before.params.get(&name), "{name}");
        }
    }
}

#[test]
fn zero_weights_match_the_plain_graph() {
    for seed in 0..4u64 {
        let config = toy_config(seed);
        let mut r = common::rng(seed + 100);
        let input = toy_input(&config, &mut r);
        let targets = toy_targets(&mut r, TOY_BATCH, TOY_COUNTRIES);
        let task = TaskId::ALL[(seed % 3) as usize];

        let run = |options: ObjectiveOptions| {
            let mut model = toy_model(seed);
            let mut adam = AdamState::new(AdamConfig::with_learning_rate(1e-2));
            let mut losses = Vec::new();
            for _ in 0..3 {
                losses.push(train_step(&mut model, &mut adam, &input, &targets, task, options).unwrap());
            }
            (model, losses)
        };
        let zero = run(ObjectiveOptions::new(LossWeights::DISABLED));
        let plain = run(ObjectiveOptions {
            adversarial: false,
            ..ObjectiveOptions::new(LossWeights::default())
        });
        assert_eq!(zero.0.params, plain.0.params);
        for (a, b) in zero.1.iter().zip(&plain.1) {
            assert_eq!(a.output, b.output);
            assert_eq!(a.total, b.total);
        }
    }
}

#[test]
fn training_reduces_the_output_loss() {
    let data = small_data(512, 3);
    let config = TrainConfig { max_epochs: 100, ..quick_config() };
    let mut short = config.clone();
    // 200 iterations: cap epochs so the schedule ends there.
    let per_epoch = data.manifest.split_indices(Split::Train).len().div_ceil(16);
    short.max_epochs = 200usize.div_ceil(per_epoch);
    let out = train(&short, &data).unwrap();
    assert!(out.iterations >= 200);
    let mean = |slice: &[burst2vec::trainer::TrainLogEntry]| {
        slice.iter().map(|e| e.l_o).sum::<f64>() / slice.len() as f64
    };
    let entries = &out.log.entries;
    let (head, tail) = (mean(&entries[..30]), mean(&entries[entries.len() - 30..]));
    assert!(tail < head, "first {head}, last {tail}");
    assert!(entries.iter().all(|e| e.l_total.is_finite()));
}

#[test]
fn training_is_deterministic() {
    let data = small_data(160, 5);
    let config = TrainConfig { val_every: 7, oversample: true, ..quick_config() };
    let a = train(&config, &data).unwrap();
    let b = train(&config, &data).unwrap();
    assert_eq!(a.best.to_bytes(), b.best.to_bytes());
    assert_eq!(a.last.to_bytes(), b.last.to_bytes());

    let dir = tempfile::tempdir().unwrap();
    let write = |out: &burst2vec::trainer::TrainOutcome, tag: &str| {
        let p = dir.path().join(format!("{tag}.jsonl"));
        let v = dir.path().join(format!("{tag}_val.jsonl"));
        out.log.write_jsonl(&p).unwrap();
        out.log.write_validation_jsonl(&v).unwrap();
        (std::fs::read(p).unwrap(), std::fs::read(v).unwrap())
    };
    assert_eq!(write(&a, "a"), write(&b, "b"));

    let other = train(&TrainConfig { seed: 1, ..config }, &data).unwrap();
    assert_ne!(a.last.to_bytes(), other.last.to_bytes());
}

#[test]
fn oracle_predictions_score_perfectly() {
    let data = small_data(200, 8);
    let idx = data.manifest.split_indices(Split::Validation);
    let records: Vec<_> = idx.iter().map(|&i| &data.manifest.records[i]).collect();
    let classes = data.labels().num_countries();
    let oracle = PredictionSet {
        ids: records.iter().map(|r| r.clip_id.clone()).collect(),
        emotions: records.iter().map(|r| r.emotions).collect(),
        age_years: records.iter().map(|r| r.age).collect(),
        country_probs: records
            .iter()
            .map(|r| (0..classes).map(|c| (c == r.country) as u8 as f64).collect())
            .collect(),
    };
    let m = evaluate(&oracle, &records, classes).unwrap();
    assert!((m.emo_ccc - 1.0).abs() < 1e-12);
    assert_eq!(m.cou_uar, 1.0);
    assert_eq!(m.age_mae, 0.0);
}

#[test]
fn patience_one_stops_after_a_flat_validation() {
    let data = small_data(200, 9);
    // A vanishing learning rate keeps the validation score flat.
    let config = TrainConfig {
        lr: 1e-300,
        val_every: 2,
        patience: 1,
        max_epochs: 50,
        ..quick_config()
    };
    let out = train(&config, &data).unwrap();
    assert_eq!(out.log.validations.len(), 2);
    assert!(out.stopped_early);
    assert_eq!(out.iterations, 4);
    assert!(out.log.validations[0].improved);
    assert!(!out.log.validations[1].improved);
    assert_eq!(out.best.step, 2);
}

#[test]
fn predictions_ignore_the_discriminator() {
    let data = small_data(120, 10);
    let out = train(&quick_config(), &data).unwrap();
    let model: Burst2Vec = out.last.model;
    let mut blind = model.clone();
    for (name, t) in blind.params.iter_mut() {
        if name.starts_with("discriminator.") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    assert_eq!(
        predict_indices(&model, &data, &idx).unwrap(),
        predict_indices(&blind, &data, &idx).unwrap()
    );
}
