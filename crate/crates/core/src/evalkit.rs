//! Challenge metrics, significance tests, ensembling and linear probes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::dataset::{LabelRecord, NUM_EMOTIONS};
use crate::diffcore::Tensor;
use crate::losses::{self, LossError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("prediction sets disagree: {0}")]
    Mismatch(String),
    #[error("class {0} is absent from the probe's training split")]
    ClassAbsent(usize),
    #[error("degenerate age range [{0}, {1}]")]
    DegenerateRange(f64, f64),
    #[error("prediction file: {0}")]
    Format(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_emotion_ccc: Vec<f64>,
    pub emo_ccc: f64,
    pub cou_uar: f64,
    /// In years.
    pub age_mae: f64,
    /// `None` when the score is undefined (nonpositive CCC or UAR).
    pub s_mtl: Option<f64>,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub probes: BTreeMap<String, f64>,
}

/// Mean recall over the classes that occur in `truth`.
pub fn uar(predicted: &[usize], truth: &[usize], classes: usize) -> Result<f64, EvalError> {
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch(predicted.len(), truth.len()));
    }
    if let Some(&class) = predicted.iter().chain(truth).find(|&&c| c >= classes) {
        return Err(EvalError::ClassOutOfRange { class, classes });
    }
    let mut support = vec![0usize; classes];
    let mut hits = vec![0usize; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        support[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    let recalls: Vec<f64> = support
        .iter()
        .zip(&hits)
        .filter(|(&s, _)| s > 0)
        .map(|(&s, &h)| h as f64 / s as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Mean absolute error in years of normalized age predictions.
pub fn mae_years(
    predicted_norm: &[f64],
    truth_years: &[f64],
    age_min: f64,
    age_max: f64,
) -> Result<f64, EvalError> {
    if age_max <= age_min {
        return Err(EvalError::DegenerateRange(age_min, age_max));
    }
    let years: Vec<f64> = predicted_norm
        .iter()
        .map(|p| age_min + p * (age_max - age_min))
        .collect();
    mean_abs_error(&years, truth_years)
}

fn mean_abs_error(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.is_empty() {
        return Err(EvalError::Empty);
    }
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Harmonic mean of CCC, UAR and 1/MAE: `3 / (1/ccc + 1/uar + mae)`.
/// Undefined for nonpositive CCC or UAR, or negative MAE.
pub fn s_mtl(ccc: f64, uar: f64, mae_years: f64) -> Option<f64> {
    if !(ccc > 0.0 && uar > 0.0 && mae_years >= 0.0) {
        return None;
    }
    Some(3.0 / (1.0 / ccc + 1.0 / uar + mae_years))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let ss = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (mean, ss)
}

/// Student's two-sample t-test with pooled variance, two-sided.
pub fn ttest_ind(a: &[f64], b: &[f64]) -> Result<TTest, EvalError> {
    let (na, nb) = (a.len(), b.len());
    if na < 2 || nb < 2 {
        return Err(EvalError::TooFewSamples {
            needed: 2,
            got: na.min(nb),
        });
    }
    let (ma, ssa) = mean_var(a);
    let (mb, ssb) = mean_var(b);
    let df = (na + nb - 2) as f64;
    let pooled = (ssa + ssb) / df;
    let se = (pooled * (1.0 / na as f64 + 1.0 / nb as f64)).sqrt();
    let diff = ma - mb;
    if se == 0.0 {
        return Ok(if diff == 0.0 {
            TTest { t: 0.0, df, p: 1.0 }
        } else {
            TTest {
                t: f64::INFINITY.copysign(diff),
                df,
                p: 0.0,
            }
        });
    }
    let t = diff / se;
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, df, p })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CochranQ {
    pub q: f64,
    pub df: usize,
    pub p: f64,
}

/// Cochran's Q over an `N × k` matrix of binary outcomes (rows = subjects).
pub fn cochran_q(rows: &[Vec<bool>]) -> Result<CochranQ, EvalError> {
    let k = rows.first().map(Vec::len).ok_or(EvalError::Empty)?;
    if k < 2 {
        return Err(EvalError::TooFewSamples { needed: 2, got: k });
    }
    if let Some(r) = rows.iter().find(|r| r.len() != k) {
        return Err(EvalError::LengthMismatch(r.len(), k));
    }
    let mut col_totals = vec![0.0; k];
    let (mut sum_l, mut sum_l2) = (0.0, 0.0);
    for row in rows {
        let l = row.iter().filter(|&&v| v).count() as f64;
        sum_l += l;
        sum_l2 += l * l;
        for (g, &v) in col_totals.iter_mut().zip(row) {
            if v {
                *g += 1.0;
            }
        }
    }
    let kf = k as f64;
    let denom = kf * sum_l - sum_l2;
    let df = k - 1;
    if denom <= 0.0 {
        return Ok(CochranQ { q: 0.0, df, p: 1.0 });
    }
    let mean_g = col_totals.iter().sum::<f64>() / kf;
    let spread: f64 = col_totals.iter().map(|g| (g - mean_g) * (g - mean_g)).sum();
    let q = kf * (kf - 1.0) * spread / denom;
    let chi = ChiSquared::new(df as f64).expect("df > 0");
    Ok(CochranQ {
        q,
        df,
        p: chi.sf(q),
    })
}

/// McNemar's statistic without continuity correction from the discordant
/// counts `b` (first right, second wrong) and `c` (first wrong, second right).
pub fn mcnemar(b: usize, c: usize) -> f64 {
    if b + c == 0 {
        return 0.0;
    }
    let (b, c) = (b as f64, c as f64);
    (b - c) * (b - c) / (b + c)
}

/// Per-clip predictions from one model.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub ids: Vec<String>,
    pub emotions: Vec<[f64; NUM_EMOTIONS]>,
    pub age_years: Vec<f64>,
    pub country_probs: Vec<Vec<f64>>,
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_countries(&self) -> usize {
        self.country_probs.first().map(Vec::len).unwrap_or(0)
    }

    pub fn predicted_countries(&self) -> Vec<usize> {
        self.country_probs.iter().map(|r| argmax(r)).collect()
    }

    fn header(countries: usize) -> Vec<String> {
        let mut h = vec!["clip_id".to_string()];
        h.extend((0..NUM_EMOTIONS).map(|i| format!("e{i}")));
        h.push("age_years".into());
        h.extend((0..countries).map(|i| format!("p{i}")));
        h
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::header(self.num_countries()))?;
        for i in 0..self.len() {
            let mut row = vec![self.ids[i].clone()];
            row.extend(self.emotions[i].iter().map(|v| v.to_string()));
            row.push(self.age_years[i].to_string());
            row.extend(self.country_probs[i].iter().map(|v| v.to_string()));
            w.write_record(row)?;
        }
        w.flush().map_err(|e| EvalError::Format(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, EvalError> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let countries = header.len().saturating_sub(NUM_EMOTIONS + 2);
        if countries < 2 || header != Self::header(countries) {
            return Err(EvalError::Format(format!(
                "unexpected header `{}`",
                header.join(",")
            )));
        }
        let mut set = PredictionSet {
            ids: Vec::new(),
            emotions: Vec::new(),
            age_years: Vec::new(),
            country_probs: Vec::new(),
        };
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64, EvalError> {
                rec[i].parse().map_err(|_| {
                    EvalError::Format(format!("line {}: `{}` is not a number", line + 2, &rec[i]))
                })
            };
            let mut e = [0.0; NUM_EMOTIONS];
            for (k, v) in e.iter_mut().enumerate() {
                *v = num(1 + k)?;
            }
            set.ids.push(rec[0].to_string());
            set.emotions.push(e);
            set.age_years.push(num(1 + NUM_EMOTIONS)?);
            set.country_probs.push(
                (0..countries)
                    .map(|c| num(2 + NUM_EMOTIONS + c))
                    .collect::<Result<_, _>>()?,
            );
        }
        set.validate()?;
        Ok(set)
    }

    /// Unique ids and probability rows summing to 1 ± 1e-6.
    pub fn validate(&self) -> Result<(), EvalError> {
        let n = self.ids.len();
        for len in [self.emotions.len(), self.age_years.len(), self.country_probs.len()] {
            if len != n {
                return Err(EvalError::LengthMismatch(len, n));
            }
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(EvalError::Mismatch(format!("duplicate clip id {dup}")));
        }
        let c = self.num_countries();
        for (id, row) in self.ids.iter().zip(&self.country_probs) {
            let total: f64 = row.iter().sum();
            if row.len() != c || (total - 1.0).abs() > 1e-6 {
                return Err(EvalError::Mismatch(format!(
                    "{id}: country probabilities sum to {total}"
                )));
            }
        }
        Ok(())
    }
}

/// Averages emotion intensities, ages and country probabilities across
/// models. Rows follow the first set's order; the final country class is
/// the argmax of the averaged probabilities.
pub fn ensemble(sets: &[PredictionSet]) -> Result<PredictionSet, EvalError> {
    let first = sets.first().ok_or(EvalError::Empty)?;
    let c = first.num_countries();
    let mut lookups = Vec::with_capacity(sets.len());
    for s in sets {
        if s.len() != first.len() {
            return Err(EvalError::Mismatch(format!(
                "{} clips vs {} clips",
                s.len(),
                first.len()
            )));
        }
        if s.num_countries() != c {
            return Err(EvalError::Mismatch(format!(
                "{} country classes vs {c}",
                s.num_countries()
            )));
        }
        let index: HashMap<&str, usize> =
            s.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        lookups.push(index);
    }
    let k = sets.len() as f64;
    let mut out = PredictionSet {
        ids: first.ids.clone(),
        emotions: Vec::with_capacity(first.len()),
        age_years: Vec::with_capacity(first.len()),
        country_probs: Vec::with_capacity(first.len()),
    };
    for id in &first.ids {
        let mut e = [0.0; NUM_EMOTIONS];
        let mut age = 0.0;
        let mut probs = vec![0.0; c];
        for (s, index) in sets.iter().zip(&lookups) {
            let i = *index
                .get(id.as_str())
                .ok_or_else(|| EvalError::Mismatch(format!("clip {id} missing from a set")))?;
            for (dst, v) in e.iter_mut().zip(&s.emotions[i]) {
                *dst += v;
            }
            age += s.age_years[i];
            for (dst, v) in probs.iter_mut().zip(&s.country_probs[i]) {
                *dst += v;
            }
        }
        out.emotions.push(e.map(|v| v / k));
        out.age_years.push(age / k);
        out.country_probs.push(probs.into_iter().map(|v| v / k).collect());
    }
    Ok(out)
}

/// Scores predictions against reference labels (matched by clip id).
pub fn evaluate(
    predictions: &PredictionSet,
    references: &[&LabelRecord],
    classes: usize,
) -> Result<MetricsReport, EvalError> {
    let truth: HashMap<&str, &LabelRecord> =
        references.iter().map(|r| (r.clip_id.as_str(), *r)).collect();
    let mut matched = Vec::with_capacity(predictions.len());
    for id in &predictions.ids {
        let rec = truth
            .get(id.as_str())
            .ok_or_else(|| EvalError::Mismatch(format!("no reference labels for {id}")))?;
        matched.push(*rec);
    }
    let pred_e = Tensor::from_rows(&predictions.emotions);
    let true_e = Tensor::from_rows(&matched.iter().map(|r| r.emotions).collect::<Vec<_>>());
    let conc = losses::ccc(&pred_e, &true_e)?;
    let true_c: Vec<usize> = matched.iter().map(|r| r.country).collect();
    let cou_uar = uar(&predictions.predicted_countries(), &true_c, classes)?;
    let true_age: Vec<f64> = matched.iter().map(|r| r.age).collect();
    let age_mae = mean_abs_error(&predictions.age_years, &true_age)?;
    Ok(MetricsReport {
        s_mtl: s_mtl(conc.mean, cou_uar, age_mae),
        per_emotion_ccc: conc.per_dim,
        emo_ccc: conc.mean,
        cou_uar,
        age_mae,
        samples: predictions.len(),
        probes: BTreeMap::new(),
    })
}

/// Per-clip statistics used by the significance tests of two models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTests {
    /// On per-clip mean squared emotion error.
    pub emotion: TTest,
    /// On per-clip absolute age error in years.
    pub age: TTest,
    /// On per-clip country correctness.
    pub country: CochranQ,
}

/// Compares two prediction sets on the same reference clips.
pub fn compare_models(
    a: &PredictionSet,
    b: &PredictionSet,
    references: &[&LabelRecord],
) -> Result<PairedTests, EvalError> {
    let truth: HashMap<&str, &LabelRecord> =
        references.iter().map(|r| (r.clip_id.as_str(), *r)).collect();
    let b_index: HashMap<&str, usize> =
        b.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    if a.len() != b.len() {
        return Err(EvalError::Mismatch(format!("{} vs {} clips", a.len(), b.len())));
    }
    let (pa, pb) = (a.predicted_countries(), b.predicted_countries());
    let mut emo = (Vec::new(), Vec::new());
    let mut age = (Vec::new(), Vec::new());
    let mut correct = Vec::new();
    for (i, id) in a.ids.iter().enumerate() {
        let j = *b_index
            .get(id.as_str())
            .ok_or_else(|| EvalError::Mismatch(format!("clip {id} missing from second set")))?;
        let rec = truth
            .get(id.as_str())
            .ok_or_else(|| EvalError::Mismatch(format!("no reference labels for {id}")))?;
        let sq = |e: &[f64; NUM_EMOTIONS]| {
            e.iter()
                .zip(&rec.emotions)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / NUM_EMOTIONS as f64
        };
        emo.0.push(sq(&a.emotions[i]));
        emo.1.push(sq(&b.emotions[j]));
        age.0.push((a.age_years[i] - rec.age).abs());
        age.1.push((b.age_years[j] - rec.age).abs());
        correct.push(vec![pa[i] == rec.country, pb[j] == rec.country]);
    }
    Ok(PairedTests {
        emotion: ttest_ind(&emo.0, &emo.1)?,
        age: ttest_ind(&age.0, &age.1)?,
        country: cochran_q(&correct)?,
    })
}

const PROBE_ITERATIONS: usize = 300;
const PROBE_LEARNING_RATE: f64 = 0.05;
const PROBE_L2: f64 = 1e-4;

/// Held-out accuracy of a multinomial logistic-regression probe trained on
/// a seeded 80/20 split of `B×d` representations.
pub fn probe(
    representations: &Tensor,
    labels: &[usize],
    classes: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    if representations.rank() != 2 || representations.shape()[0] != labels.len() {
        return Err(EvalError::LengthMismatch(
            representations.shape().first().copied().unwrap_or(0),
            labels.len(),
        ));
    }
    let n = labels.len();
    if n < 10 * classes {
        return Err(EvalError::TooFewSamples {
            needed: 10 * classes,
            got: n,
        });
    }
    if let Some(&class) = labels.iter().find(|&&c| c >= classes) {
        return Err(EvalError::ClassOutOfRange { class, classes });
    }
    let d = representations.shape()[1];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n * 4) / 5;
    let (train, test) = order.split_at(n_train);
    let mut present = vec![false; classes];
    for &i in train {
        present[labels[i]] = true;
    }
    if let Some(absent) = present.iter().position(|&p| !p) {
        return Err(EvalError::ClassAbsent(absent));
    }

    // Standardize with training statistics.
    let x = representations.data();
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in train {
        for (m, v) in mean.iter_mut().zip(&x[i * d..(i + 1) * d]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_train as f64);
    for &i in train {
        for ((s, m), v) in sd.iter_mut().zip(&mean).zip(&x[i * d..(i + 1) * d]) {
            *s += (v - m) * (v - m);
        }
    }
    sd.iter_mut()
        .for_each(|s| *s = (*s / n_train as f64).sqrt().max(1e-12));
    let feature = |i: usize| -> Vec<f64> {
        x[i * d..(i + 1) * d]
            .iter()
            .zip(&mean)
            .zip(&sd)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    };
    let train_x: Vec<Vec<f64>> = train.iter().map(|&i| feature(i)).collect();

    // Full-batch Adam on the softmax cross-entropy.
    let width = d + 1;
    let mut w = vec![0.0; classes * width];
    let mut m1 = vec![0.0; w.len()];
    let mut m2 = vec![0.0; w.len()];
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let logits = |w: &[f64], f: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| {
                let row = &w[c * width..(c + 1) * width];
                row[d] + row[..d].iter().zip(f).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    };
    for step in 1..=PROBE_ITERATIONS {
        let mut grad = vec![0.0; w.len()];
        for (f, &i) in train_x.iter().zip(train) {
            let z = logits(&w, f);
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = e.iter().sum();
            for c in 0..classes {
                let delta = e[c] / total - if labels[i] == c { 1.0 } else { 0.0 };
                let row = &mut grad[c * width..(c + 1) * width];
                for (g, v) in row[..d].iter_mut().zip(f) {
                    *g += delta * v;
                }
                row[d] += delta;
            }
        }
        let c1 = 1.0 - b1.powi(step as i32);
        let c2 = 1.0 - b2.powi(step as i32);
        for j in 0..w.len() {
            let g = grad[j] / n_train as f64 + PROBE_L2 * w[j];
            m1[j] = b1 * m1[j] + (1.0 - b1) * g;
            m2[j] = b2 * m2[j] + (1.0 - b2) * g * g;
            w[j] -= PROBE_LEARNING_RATE * (m1[j] / c1) / ((m2[j] / c2).sqrt() + eps);
        }
    }

    let hits = test
        .iter()
        .filter(|&&i| argmax(&logits(&w, &feature(i))) == labels[i])
        .count();
    Ok(hits as f64 / test.len() as f64)
}
