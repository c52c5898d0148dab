//! The shared key=value run config. Keys carry a subcommand prefix
//! (`train.lr`, `synth.n`, `labels.age_min`); each subcommand reads its own
//! section and ignores the rest.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use burst2vec::dataset::{EmotionScale, LabelConfig, SynthConfig, SynthMode};
use burst2vec::trainer::{parse_key_values, TrainConfig};

const SECTIONS: [&str; 8] = [
    "labels",
    "preprocess",
    "synth",
    "train",
    "eval",
    "ensemble",
    "probe",
    "stats",
];

#[derive(Debug, Default, Clone)]
pub struct RunConfig {
    sections: BTreeMap<String, Vec<(String, String)>>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
        for (line, key, value) in parse_key_values(text)? {
            let Some((section, name)) = key.split_once('.') else {
                bail!("line {line}: key `{key}` needs a section prefix such as `train.`");
            };
            if !SECTIONS.contains(&section) {
                bail!("line {line}: unknown section `{section}`");
            }
            sections
                .entry(section.to_string())
                .or_default()
                .push((name.to_string(), value));
        }
        Ok(Self { sections })
    }

    pub fn section(&self, name: &str) -> &[(String, String)] {
        self.sections.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn has(&self, section: &str, key: &str) -> bool {
        self.section(section).iter().any(|(k, _)| k == key)
    }

    pub fn labels(&self) -> Result<LabelConfig> {
        let mut labels = LabelConfig::default();
        for (key, value) in self.section("labels") {
            match key.as_str() {
                "age_min" => labels.age_min = number(key, value)?,
                "age_max" => labels.age_max = number(key, value)?,
                "emotion_scale" => {
                    labels.emotion_scale = match value.as_str() {
                        "raw" => EmotionScale::Raw,
                        "normalized" => EmotionScale::Normalized,
                        other => bail!("labels.emotion_scale: unknown scale `{other}`"),
                    }
                }
                "countries" => {
                    labels.countries = value.split(',').map(|c| c.trim().to_string()).collect()
                }
                other => bail!("unknown key `labels.{other}`"),
            }
        }
        if labels.age_max <= labels.age_min {
            bail!("labels.age_max must exceed labels.age_min");
        }
        Ok(labels)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (key, value) in self.section("train") {
            cfg.set(key, value)
                .with_context(|| format!("train.{key}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let mut cfg = SynthConfig::default();
        for (key, value) in self.section("synth") {
            match key.as_str() {
                "n" => cfg.n = number(key, value)?,
                "countries" => cfg.countries = number(key, value)?,
                "rho" => cfg.rho = number(key, value)?,
                "mode" => {
                    cfg.mode = match value.as_str() {
                        "feature" => SynthMode::Feature,
                        "waveform" => SynthMode::Waveform,
                        other => bail!("synth.mode: unknown mode `{other}`"),
                    }
                }
                "age_min" => cfg.age_min = number(key, value)?,
                "age_max" => cfg.age_max = number(key, value)?,
                "frames_min" => cfg.frames_min = number(key, value)?,
                "frames_max" => cfg.frames_max = number(key, value)?,
                "feature_dim" => cfg.feature_dim = number(key, value)?,
                "nuisance_scale" => cfg.nuisance_scale = number(key, value)?,
                "age_scale" => cfg.age_scale = number(key, value)?,
                "country_scale" => cfg.country_scale = number(key, value)?,
                "emotion_scale" => cfg.emotion_scale = number(key, value)?,
                "frame_noise" => cfg.frame_noise = number(key, value)?,
                other => bail!("unknown key `synth.{other}`"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Optional `<section>.split` value.
    pub fn split(&self, section: &str) -> Option<&str> {
        self.section(section)
            .iter()
            .find(|(k, _)| k == "split")
            .map(|(_, v)| v.as_str())
    }

    /// Rejects keys in `section` other than `allowed`.
    pub fn check_keys(&self, section: &str, allowed: &[&str]) -> Result<()> {
        for (key, _) in self.section(section) {
            if !allowed.contains(&key.as_str()) {
                bail!("unknown key `{section}.{key}`");
            }
        }
        Ok(())
    }
}

fn number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow::anyhow!("{key}: cannot parse `{value}`"))
}
