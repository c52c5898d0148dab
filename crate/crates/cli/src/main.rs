mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use burst2vec::audio_io;
use burst2vec::dataset::{self, load_manifest, write_manifest, DatasetManifest, Split};
use burst2vec::evalkit::{self, PredictionSet};
use burst2vec::model::{ModelCheckpoint, TaskId};
use burst2vec::trainer::{self, TrainingData};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "b2v", version, about = "Adversarial multi-task learning for vocal bursts")]
struct Cli {
    #[command(flatten)]
    run: RunArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// key=value config file with section prefixes (train.lr, synth.n, ...).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory for every output.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Overrides the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Allow writing into a non-empty run directory.
    #[arg(long, global = true)]
    force: bool,
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Resample to 16 kHz mono and normalize loudness for every manifest clip.
    Preprocess {
        /// Directory holding manifest.csv.
        input: PathBuf,
    },
    /// Generate a synthetic dataset (manifest plus media).
    Synth,
    /// Train a model on a manifest.
    Train { manifest: PathBuf },
    /// Score a checkpoint on one split.
    Eval {
        checkpoint: PathBuf,
        manifest: PathBuf,
        /// train, validation, test or all (default test).
        #[arg(long)]
        split: Option<String>,
    },
    /// Average prediction files.
    Ensemble {
        #[arg(required = true)]
        predictions: Vec<PathBuf>,
        /// Reference manifest; when given, metrics are reported too.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Linear probes of country and age bin on every representation.
    Probe {
        checkpoint: PathBuf,
        manifest: PathBuf,
        /// train, validation, test or all (default all).
        #[arg(long)]
        split: Option<String>,
    },
    /// Significance tests between two prediction files.
    Stats {
        a: PathBuf,
        b: PathBuf,
        manifest: PathBuf,
    },
}

struct Run {
    args: RunArgs,
    config: RunConfig,
}

impl Run {
    fn log(&self, msg: impl AsRef<str>) {
        if self.args.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.args.out.join(name)
    }

    fn write_json(&self, name: &str, value: &impl serde::Serialize) -> Result<PathBuf> {
        let path = self.out(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Creates the run directory, refusing a non-empty one unless forced.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if occupied && !force {
            bail!(
                "{} already exists and is not empty; pass --force to write into it",
                dir.display()
            );
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn parse_split(value: Option<&str>, default: &str) -> Result<Option<Split>> {
    let value = value.unwrap_or(default);
    if value == "all" {
        return Ok(None);
    }
    Split::parse(value)
        .map(Some)
        .ok_or_else(|| anyhow::anyhow!("unknown split `{value}`"))
}

fn split_indices(manifest: &DatasetManifest, split: Option<Split>) -> Result<Vec<usize>> {
    let idx = match split {
        Some(s) => manifest.split_indices(s),
        None => (0..manifest.len()).collect(),
    };
    if idx.is_empty() {
        bail!("the selected split is empty");
    }
    Ok(idx)
}

fn configure_threads() -> Result<()> {
    if let Ok(value) = std::env::var("B2V_THREADS") {
        let n: usize = value
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("B2V_THREADS must be a positive integer, got `{value}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main(cli: Cli) -> Result<ExitCode> {
    configure_threads()?;
    let config = RunConfig::load(cli.run.config.as_deref())?;
    let run = Run {
        args: cli.run,
        config,
    };
    prepare_out_dir(&run.args.out, run.args.force)?;
    if let Some(path) = &run.args.config {
        fs::copy(path, run.out("run_config.txt")).context("snapshotting the config")?;
    }
    match cli.command {
        Command::Preprocess { input } => cmd_preprocess(&run, &input),
        Command::Synth => cmd_synth(&run).map(|_| ExitCode::SUCCESS),
        Command::Train { manifest } => cmd_train(&run, &manifest).map(|_| ExitCode::SUCCESS),
        Command::Eval {
            checkpoint,
            manifest,
            split,
        } => cmd_eval(&run, &checkpoint, &manifest, split.as_deref()).map(|_| ExitCode::SUCCESS),
        Command::Ensemble {
            predictions,
            manifest,
        } => cmd_ensemble(&run, &predictions, manifest.as_deref()).map(|_| ExitCode::SUCCESS),
        Command::Probe {
            checkpoint,
            manifest,
            split,
        } => cmd_probe(&run, &checkpoint, &manifest, split.as_deref()).map(|_| ExitCode::SUCCESS),
        Command::Stats { a, b, manifest } => {
            cmd_stats(&run, &a, &b, &manifest).map(|_| ExitCode::SUCCESS)
        }
    }
}

fn cmd_preprocess(run: &Run, input: &Path) -> Result<ExitCode> {
    run.config.check_keys("preprocess", &[])?;
    let labels = run.config.labels()?;
    let manifest = load_manifest(&input.join("manifest.csv"), &labels)?;
    let media_dir = run.out("media");
    fs::create_dir_all(&media_dir)?;

    let mut kept = DatasetManifest {
        records: Vec::new(),
        media: Vec::new(),
        labels: labels.clone(),
    };
    let mut failures = Vec::new();
    for (rec, path) in manifest.records.iter().zip(&manifest.media) {
        let processed = audio_io::load_wav(path).and_then(|clip| audio_io::preprocess(&clip));
        let target = media_dir.join(format!("{}.wav", rec.clip_id));
        match processed.and_then(|clip| audio_io::write_wav_i16(&target, &clip)) {
            Ok(()) => {
                run.log(format!("ok {}", rec.clip_id));
                kept.records.push(rec.clone());
                kept.media.push(target);
            }
            Err(e) => {
                eprintln!("failed {}: {e}", rec.clip_id);
                failures.push(json!({ "clip_id": rec.clip_id, "error": e.to_string() }));
            }
        }
    }
    write_manifest(&run.out("manifest.csv"), &kept)?;
    run.write_json(
        "preprocess_report.json",
        &json!({
            "count": manifest.len(),
            "processed": kept.len(),
            "failures": failures,
        }),
    )?;
    println!("processed {}/{} clips", kept.len(), manifest.len());
    Ok(if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn cmd_synth(run: &Run) -> Result<()> {
    run.config.check_keys("synth", &[
        "n", "countries", "rho", "mode", "age_min", "age_max", "frames_min", "frames_max",
        "feature_dim", "nuisance_scale", "age_scale", "country_scale", "emotion_scale",
        "frame_noise",
    ])?;
    let cfg = run.config.synth()?;
    let seed = run.args.seed.unwrap_or(0);
    let ds = dataset::synth_generate(&cfg, seed)?;
    let manifest = ds.write(&run.args.out)?;
    run.write_json("synth_config.json", &json!({ "seed": seed, "config": cfg }))?;
    println!("wrote {} clips to {}", manifest.len(), run.args.out.display());
    Ok(())
}

fn cmd_train(run: &Run, manifest_path: &Path) -> Result<()> {
    let labels = run.config.labels()?;
    let mut cfg = run.config.train()?;
    if let Some(seed) = run.args.seed {
        cfg.seed = seed;
    }
    let manifest = load_manifest(manifest_path, &labels)?;
    let data = TrainingData::load(manifest)?;
    if !run.config.has("train", "encoder_mode") {
        cfg.encoder_mode = data.encoder_mode();
    }
    fs::write(run.out("config.txt"), cfg.to_kv())?;
    run.log(format!(
        "training on {} clips ({} encoder)",
        data.len(),
        cfg.encoder_mode.name()
    ));
    let outcome = trainer::train(&cfg, &data)?;
    outcome.log.write_jsonl(&run.out("train_log.jsonl"))?;
    outcome
        .log
        .write_validation_jsonl(&run.out("validation_log.jsonl"))?;
    outcome.best.save(&run.out("best.ckpt"))?;
    outcome.last.save(&run.out("last.ckpt"))?;
    run.write_json("best_metrics.json", &outcome.best_metrics)?;
    for v in &outcome.log.validations {
        run.log(format!(
            "iteration {}: emo_ccc {:.4}, cou_uar {:.4}, age_mae {:.3}",
            v.iteration, v.emo_ccc, v.cou_uar, v.age_mae
        ));
    }
    println!(
        "{} iterations{}; best validation emo_ccc {:.4} at iteration {}",
        outcome.iterations,
        if outcome.stopped_early { " (early stop)" } else { "" },
        outcome.best_metrics.emo_ccc,
        outcome.best.step
    );
    Ok(())
}

fn load_for_checkpoint(
    checkpoint: &Path,
    manifest: &Path,
) -> Result<(ModelCheckpoint, TrainingData)> {
    let ckpt = ModelCheckpoint::load(checkpoint)?;
    let manifest = load_manifest(manifest, &ckpt.labels)?;
    let data = TrainingData::load(manifest)?;
    Ok((ckpt, data))
}

fn cmd_eval(run: &Run, checkpoint: &Path, manifest: &Path, split: Option<&str>) -> Result<()> {
    run.config.check_keys("eval", &["split"])?;
    let split = parse_split(split.or(run.config.split("eval")), "test")?;
    let (ckpt, data) = load_for_checkpoint(checkpoint, manifest)?;
    let idx = split_indices(&data.manifest, split)?;
    let predictions = trainer::predict_indices(&ckpt.model, &data, &idx)?;
    predictions.write_csv(&run.out("predictions.csv"))?;
    let refs: Vec<_> = idx.iter().map(|&i| &data.manifest.records[i]).collect();
    let report = evalkit::evaluate(&predictions, &refs, data.labels().num_countries())?;
    run.write_json("metrics.json", &report)?;
    print_report(&report);
    Ok(())
}

fn print_report(report: &evalkit::MetricsReport) {
    let s = report
        .s_mtl
        .map(|v| format!("{v:.4}"))
        .unwrap_or_else(|| "undefined".into());
    println!(
        "n={} emo_ccc={:.4} cou_uar={:.4} age_mae={:.3} s_mtl={s}",
        report.samples, report.emo_ccc, report.cou_uar, report.age_mae
    );
}

fn cmd_ensemble(run: &Run, inputs: &[PathBuf], manifest: Option<&Path>) -> Result<()> {
    run.config.check_keys("ensemble", &[])?;
    let sets = inputs
        .iter()
        .map(|p| PredictionSet::read_csv(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let merged = evalkit::ensemble(&sets)?;
    merged.write_csv(&run.out("predictions.csv"))?;
    if let Some(manifest) = manifest {
        let manifest = load_manifest(manifest, &run.config.labels()?)?;
        let refs: Vec<_> = manifest.records.iter().collect();
        let report = evalkit::evaluate(&merged, &refs, manifest.labels.num_countries())?;
        run.write_json("metrics.json", &report)?;
        print_report(&report);
    }
    println!("averaged {} prediction files over {} clips", sets.len(), merged.len());
    Ok(())
}

fn cmd_probe(run: &Run, checkpoint: &Path, manifest: &Path, split: Option<&str>) -> Result<()> {
    run.config.check_keys("probe", &["split"])?;
    let split = parse_split(split.or(run.config.split("probe")), "all")?;
    let seed = run.args.seed.unwrap_or(0);
    let (ckpt, data) = load_for_checkpoint(checkpoint, manifest)?;
    let idx = split_indices(&data.manifest, split)?;
    let reps = ckpt.model.representations(&data.input(&idx)?)?;
    let labels = data.labels();
    let country: Vec<usize> = idx.iter().map(|&i| data.manifest.records[i].country).collect();
    let edges = dataset::default_age_bin_edges();
    let age_bin: Vec<usize> = idx
        .iter()
        .map(|&i| dataset::age_bin(data.manifest.records[i].age, &edges))
        .collect();

    let mut named = vec![("shared".to_string(), &reps.shared)];
    for t in TaskId::ALL {
        named.push((format!("spec.{t}"), &reps.spec[t.index()]));
        named.push((format!("concat.{t}"), &reps.concat[t.index()]));
    }
    let mut results = serde_json::Map::new();
    for (name, rep) in named {
        let c = evalkit::probe(rep, &country, labels.num_countries(), seed)?;
        let a = evalkit::probe(rep, &age_bin, edges.len() - 1, seed)?;
        println!("{name:>16}: country {c:.3}  age_bin {a:.3}");
        results.insert(name, json!({ "country": c, "age_bin": a }));
    }
    run.write_json(
        "probes.json",
        &json!({ "samples": idx.len(), "seed": seed, "probes": results }),
    )?;
    Ok(())
}

fn cmd_stats(run: &Run, a: &Path, b: &Path, manifest: &Path) -> Result<()> {
    run.config.check_keys("stats", &[])?;
    let read = |p: &Path| {
        PredictionSet::read_csv(p).with_context(|| format!("reading {}", p.display()))
    };
    let (a, b) = (read(a)?, read(b)?);
    let manifest = load_manifest(manifest, &run.config.labels()?)?;
    let refs: Vec<_> = manifest.records.iter().collect();
    let tests = evalkit::compare_models(&a, &b, &refs)?;
    run.write_json("stats.json", &tests)?;
    println!(
        "emotion t={:.4} p={:.4} | age t={:.4} p={:.4} | country Q={:.4} p={:.4}",
        tests.emotion.t, tests.emotion.p, tests.age.t, tests.age.p, tests.country.q, tests.country.p
    );
    Ok(())
}
