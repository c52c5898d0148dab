//! Audio ingestion and preprocessing: WAV decoding with mono mixdown,
//! band-limited resampling, RMS loudness normalization and batch padding.

use std::path::Path;

use thiserror::Error;

/// Sample rate every clip is brought to before encoding.
pub const TARGET_SAMPLE_RATE: u32 = 16_000;
/// Loudness target in dB relative to full scale 1.0.
pub const TARGET_RMS_DB: f64 = -3.0;
const SILENCE_RMS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("failed to read {path}: {source}")]
    Read { path: String, source: hound::Error },
    #[error("failed to write {path}: {source}")]
    Write { path: String, source: hound::Error },
    #[error("unsupported WAV format in {path}: {detail}")]
    Unsupported { path: String, detail: String },
    #[error("clip {0} is silent (RMS below 1e-8)")]
    SilentClip(String),
    #[error("batch mixes sample rates {0} and {1}")]
    MixedSampleRates(u32, u32),
    #[error("empty batch")]
    EmptyBatch,
    #[error("clip {0} has no samples")]
    EmptyClip(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaveformClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source_id: String,
}

impl WaveformClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32, source_id: impl Into<String>) -> Self {
        Self {
            samples,
            sample_rate,
            source_id: source_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }
}

pub fn rms(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt()
}

/// Zero-padded `B × T_max` batch with per-row valid lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub samples: Vec<f64>,
    pub rows: usize,
    pub max_len: usize,
    pub valid_lengths: Vec<usize>,
    pub sample_rate: u32,
}

impl PaddedBatch {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.samples[i * self.max_len..(i + 1) * self.max_len]
    }
}

/// Reads a PCM WAV (8/16/24/32-bit integer or 32-bit float) and mixes it
/// down to mono. Integer samples are scaled by `2^(bits-1)`.
pub fn load_wav(path: &Path) -> Result<WaveformClip, AudioError> {
    let display = path.display().to_string();
    let read_err = |source| AudioError::Read {
        path: display.clone(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(read_err)?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(AudioError::Unsupported {
            path: display,
            detail: format!("{} channels", spec.channels),
        });
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(read_err)?,
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(read_err)?
        }
        (format, bits) => {
            return Err(AudioError::Unsupported {
                path: display,
                detail: format!("{format:?} with {bits} bits"),
            })
        }
    };
    let channels = spec.channels as usize;
    let samples: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| display.clone());
    if samples.is_empty() {
        return Err(AudioError::EmptyClip(source_id));
    }
    Ok(WaveformClip::new(samples, spec.sample_rate, source_id))
}

fn quantize_i16(sample: f64) -> i16 {
    (sample * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes a mono 16-bit PCM WAV; samples beyond full scale are clipped.
pub fn write_wav_i16(path: &Path, clip: &WaveformClip) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let write_err = |source| AudioError::Write {
        path: path.display().to_string(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(write_err)?;
    for &s in &clip.samples {
        writer.write_sample(quantize_i16(s)).map_err(write_err)?;
    }
    writer.finalize().map_err(write_err)
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Kaiser-windowed sinc interpolator with cutoff at 0.45 × the lower of the
/// two rates. Filter phases repeat with period `target / gcd`, so they are
/// tabulated once when that period is small.
struct SincResampler {
    ratio_num: u64,
    ratio_den: u64,
    /// Cutoff in cycles per input sample.
    cutoff: f64,
    half_width: usize,
    beta: f64,
    i0_beta: f64,
    table: Option<Vec<Vec<f64>>>,
}

const ZERO_CROSSINGS: f64 = 24.0;
const KAISER_BETA: f64 = 9.0;
const MAX_TABLE_PHASES: u64 = 4096;

impl SincResampler {
    fn new(source_rate: u32, target_rate: u32) -> Self {
        let g = gcd(source_rate as u64, target_rate as u64);
        let (num, den) = (source_rate as u64 / g, target_rate as u64 / g);
        let cutoff = 0.45 * source_rate.min(target_rate) as f64 / source_rate as f64;
        let half_width = (ZERO_CROSSINGS / (2.0 * cutoff)).ceil() as usize;
        let mut r = Self {
            ratio_num: num,
            ratio_den: den,
            cutoff,
            half_width,
            beta: KAISER_BETA,
            i0_beta: bessel_i0(KAISER_BETA),
            table: None,
        };
        if den <= MAX_TABLE_PHASES {
            let table = (0..den).map(|p| r.taps(p as f64 / den as f64)).collect();
            r.table = Some(table);
        }
        r
    }

    fn kernel(&self, tau: f64) -> f64 {
        let w = self.half_width as f64;
        if tau.abs() >= w {
            return 0.0;
        }
        let x = 2.0 * self.cutoff * tau;
        let sinc = if x.abs() < 1e-12 {
            1.0
        } else {
            (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
        };
        let r = tau / w;
        let window = bessel_i0(self.beta * (1.0 - r * r).max(0.0).sqrt()) / self.i0_beta;
        2.0 * self.cutoff * sinc * window
    }

    /// Taps for input offsets `-half_width+1 ..= half_width` around the
    /// integer position, for a fractional output position `frac`.
    fn taps(&self, frac: f64) -> Vec<f64> {
        let hw = self.half_width as i64;
        (-hw + 1..=hw).map(|k| self.kernel(frac - k as f64)).collect()
    }

    fn run(&self, input: &[f64], out_len: usize) -> Vec<f64> {
        let hw = self.half_width as i64;
        let n_in = input.len() as i64;
        let mut out = Vec::with_capacity(out_len);
        for n in 0..out_len as u64 {
            let pos = n * self.ratio_num;
            let base = (pos / self.ratio_den) as i64;
            let phase = pos % self.ratio_den;
            let owned;
            let taps: &[f64] = match &self.table {
                Some(t) => &t[phase as usize],
                None => {
                    owned = self.taps(phase as f64 / self.ratio_den as f64);
                    &owned
                }
            };
            let mut acc = 0.0;
            for (j, &h) in taps.iter().enumerate() {
                let idx = base - hw + 1 + j as i64;
                if idx >= 0 && idx < n_in {
                    acc += input[idx as usize] * h;
                }
            }
            out.push(acc);
        }
        out
    }
}

/// Resamples to `target_rate`; output length is `ceil(N · target / source)`.
/// Equal rates return the clip unchanged.
pub fn resample(clip: &WaveformClip, target_rate: u32) -> WaveformClip {
    if clip.sample_rate == target_rate {
        return clip.clone();
    }
    let n = clip.samples.len() as u64;
    let out_len = (n * target_rate as u64).div_ceil(clip.sample_rate as u64) as usize;
    let resampler = SincResampler::new(clip.sample_rate, target_rate);
    WaveformClip {
        samples: resampler.run(&clip.samples, out_len),
        sample_rate: target_rate,
        source_id: clip.source_id.clone(),
    }
}

/// Applies the single gain that brings the clip's full-length RMS to
/// `target_db` dBFS.
pub fn rms_normalize(clip: &WaveformClip, target_db: f64) -> Result<WaveformClip, AudioError> {
    let current = clip.rms();
    if current < SILENCE_RMS {
        return Err(AudioError::SilentClip(clip.source_id.clone()));
    }
    let gain = 10f64.powf(target_db / 20.0) / current;
    Ok(WaveformClip {
        samples: clip.samples.iter().map(|s| s * gain).collect(),
        sample_rate: clip.sample_rate,
        source_id: clip.source_id.clone(),
    })
}

/// Full chain: resample to 16 kHz, then normalize to −3 dBFS.
pub fn preprocess(clip: &WaveformClip) -> Result<WaveformClip, AudioError> {
    rms_normalize(&resample(clip, TARGET_SAMPLE_RATE), TARGET_RMS_DB)
}

/// Right-pads clips with zeros to the longest length.
pub fn pad_batch(clips: &[&WaveformClip]) -> Result<PaddedBatch, AudioError> {
    let first = clips.first().ok_or(AudioError::EmptyBatch)?;
    if let Some(other) = clips.iter().find(|c| c.sample_rate != first.sample_rate) {
        return Err(AudioError::MixedSampleRates(first.sample_rate, other.sample_rate));
    }
    let max_len = clips.iter().map(|c| c.len()).max().unwrap_or(0);
    let mut samples = vec![0.0; clips.len() * max_len];
    for (row, clip) in samples.chunks_mut(max_len.max(1)).zip(clips) {
        row[..clip.len()].copy_from_slice(&clip.samples);
    }
    Ok(PaddedBatch {
        samples,
        rows: clips.len(),
        max_len,
        valid_lengths: clips.iter().map(|c| c.len()).collect(),
        sample_rate: first.sample_rate,
    })
}
