//! Commands behind the `dyad` binary. Each one reads a [`GlobalConfig`],
//! writes its artifacts to the configured directories and returns a JSON
//! value summarizing what it did.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use dyad_core::conditioning::AudioFeatureConfig;
use dyad_core::datagen::{build_dataset, load_dataset, DyadSample, SourceMix, Split};
use dyad_core::diffusion::{ddim_sample, NetDenoiser, NoiseSchedule, SamplerConfig};
use dyad_core::dualnet::DualNet;
use dyad_core::facemodel::MotionSequence;
use dyad_core::layout::{request_layout, ExampleBank, LayoutResult, LlmMode};
use dyad_core::metrics::{evaluate, EvalInput, EvalReport, ProjectionExtractor};
use dyad_core::training::{load_checkpoint, prepare_sample, save_checkpoint, train_stage, write_curve_csv, FaceAssets};

pub use config::GlobalConfig;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const REPORT_FILE: &str = "report.json";
pub const LAYOUT_FILE: &str = "layout.json";
pub const SAMPLES_DIR: &str = "samples";
pub const SAMPLE_INDEX: &str = "index.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Runtime,
}

/// A failure tagged with the pipeline stage it happened in.
#[derive(Debug, thiserror::Error)]
#[error("{stage}: {message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub stage: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(message: String) -> Self {
        Self {
            kind: ErrorKind::Usage,
            stage: "config",
            message,
        }
    }

    pub fn runtime(stage: &'static str, e: impl std::fmt::Display) -> Self {
        Self {
            kind: ErrorKind::Runtime,
            stage,
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Usage => EXIT_USAGE,
            ErrorKind::Runtime => EXIT_RUNTIME,
        }
    }
}

/// Parses `conversation=0.5,synthetic_dub=0.4,single_speaker=0.1`; omitted
/// sources get weight 0.
pub fn parse_source_mix(text: &str) -> Result<SourceMix, String> {
    let mut mix = SourceMix {
        conversation: 0.0,
        synthetic_dub: 0.0,
        single_speaker: 0.0,
    };
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, w) = part
            .split_once('=')
            .ok_or_else(|| format!("expected source=weight, got `{part}`"))?;
        let w: f64 = w.trim().parse().map_err(|_| format!("bad weight in `{part}`"))?;
        if !(w >= 0.0 && w.is_finite()) {
            return Err(format!("weight must be finite and >= 0 in `{part}`"));
        }
        match name.trim() {
            "conversation" => mix.conversation = w,
            "synthetic_dub" => mix.synthetic_dub = w,
            "single_speaker" => mix.single_speaker = w,
            other => return Err(format!("unknown source `{other}`")),
        }
    }
    if mix.conversation + mix.synthetic_dub + mix.single_speaker <= 0.0 {
        return Err("at least one source needs a positive weight".into());
    }
    Ok(mix)
}

fn create_dir(stage: &'static str, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::runtime(stage, format!("{}: {e}", dir.display())))
}

fn write_json(stage: &'static str, path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| CliError::runtime(stage, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::runtime(stage, format!("{}: {e}", path.display())))
}

fn assets(config: &GlobalConfig, stage: &'static str) -> Result<FaceAssets, CliError> {
    FaceAssets::synthetic(config.face.vertex_count, config.face.basis_seed).map_err(|e| CliError::runtime(stage, e))
}

pub fn checkpoint_path(config: &GlobalConfig, stage: u8) -> PathBuf {
    config.paths.checkpoint_dir.join(format!("stage{stage}.ckpt"))
}

/// Generates `n_samples` dyads into the dataset directory.
pub fn cmd_datagen(config: &GlobalConfig, n_samples: usize, mix: SourceMix) -> Result<Value, CliError> {
    const STAGE: &str = "datagen";
    let dir = &config.paths.dataset_dir;
    create_dir(STAGE, dir)?;
    let mut opts = config.data.dataset_options();
    opts.mix = mix;
    let (manifest, _) = build_dataset(dir, n_samples, config.seed, &opts).map_err(|e| CliError::runtime(STAGE, e))?;
    let count = |split| manifest.records.iter().filter(|r| r.split == split).count();
    Ok(json!({
        "dataset": dir,
        "samples": manifest.records.len(),
        "train": count(Split::Train),
        "test": count(Split::Test),
        "gaze_subset": manifest.records.iter().filter(|r| r.gaze_subset).count(),
    }))
}

fn split_samples(dir: &Path, split: Split, stage: &'static str) -> Result<Vec<(String, DyadSample)>, CliError> {
    let (manifest, samples) = load_dataset(dir).map_err(|e| CliError::runtime(stage, e))?;
    Ok(manifest
        .records
        .into_iter()
        .zip(samples)
        .filter(|(r, _)| r.split == split)
        .map(|(r, s)| (r.path, s))
        .collect())
}

/// Trains one stage on the training split. Stage 2 starts from `init`, or
/// from the stage-1 checkpoint in the checkpoint directory.
pub fn cmd_train(config: &GlobalConfig, stage: u8, init: Option<&Path>) -> Result<Value, CliError> {
    const STAGE: &str = "train";
    if stage != 1 && stage != 2 {
        return Err(CliError::config(format!("stage must be 1 or 2, got {stage}")));
    }
    let samples: Vec<DyadSample> = split_samples(&config.paths.dataset_dir, Split::Train, STAGE)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let init_path = match (init, stage) {
        (Some(p), _) => Some(p.to_path_buf()),
        (None, 2) => Some(checkpoint_path(config, 1)),
        (None, _) => None,
    };
    let init = match &init_path {
        Some(p) => Some(load_checkpoint(p).map_err(|e| CliError::runtime(STAGE, format!("{}: {e}", p.display())))?),
        None => None,
    };
    let assets = assets(config, STAGE)?;
    let (ckpt, curve) = train_stage(&config.stage(stage), &config.unet, &assets, &samples, init.as_ref())
        .map_err(|e| CliError::runtime(STAGE, e))?;
    create_dir(STAGE, &config.paths.checkpoint_dir)?;
    let out = checkpoint_path(config, stage);
    save_checkpoint(&out, &ckpt).map_err(|e| CliError::runtime(STAGE, e))?;
    let curve_path = config.paths.checkpoint_dir.join(format!("stage{stage}_curve.csv"));
    let mut f = fs::File::create(&curve_path).map_err(|e| CliError::runtime(STAGE, e))?;
    write_curve_csv(&mut f, &curve).map_err(|e| CliError::runtime(STAGE, e))?;
    Ok(json!({
        "stage": stage,
        "checkpoint": out,
        "curve": curve_path,
        "steps": ckpt.step,
        "first_loss": curve.first().map(|r| r.total),
        "final_loss": curve.last().map(|r| r.total),
    }))
}

/// One sampled dyad on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledPair {
    /// Ground-truth sample, relative to the dataset directory.
    pub source: String,
    /// Generated tracks, relative to the samples directory.
    pub a: String,
    pub b: String,
}

fn write_motion(stage: &'static str, path: &Path, m: &MotionSequence<f64>) -> Result<(), CliError> {
    let mut w = std::io::BufWriter::new(fs::File::create(path).map_err(|e| CliError::runtime(stage, e))?);
    m.write_to(&mut w).map_err(|e| CliError::runtime(stage, e))?;
    std::io::Write::flush(&mut w).map_err(|e| CliError::runtime(stage, e))
}

fn read_motion(stage: &'static str, path: &Path) -> Result<MotionSequence<f64>, CliError> {
    let mut r = std::io::BufReader::new(
        fs::File::open(path).map_err(|e| CliError::runtime(stage, format!("{}: {e}", path.display())))?,
    );
    MotionSequence::read_from(&mut r).map_err(|e| CliError::runtime(stage, e))
}

/// Samples both participants for every test-split dyad (every dyad when
/// the test split is empty) with the given checkpoint, by default the
/// latest stage in the checkpoint directory.
pub fn cmd_sample(config: &GlobalConfig, checkpoint: Option<&Path>, sampler: SamplerConfig) -> Result<Value, CliError> {
    const STAGE: &str = "sample";
    sampler.validate().map_err(|e| CliError::config(e.to_string()))?;
    let ckpt_path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => [2, 1]
            .into_iter()
            .map(|s| checkpoint_path(config, s))
            .find(|p| p.exists())
            .ok_or_else(|| {
                CliError::runtime(
                    STAGE,
                    format!("no checkpoint found in {}", config.paths.checkpoint_dir.display()),
                )
            })?,
    };
    let ckpt =
        load_checkpoint(&ckpt_path).map_err(|e| CliError::runtime(STAGE, format!("{}: {e}", ckpt_path.display())))?;
    let mut dyads = split_samples(&config.paths.dataset_dir, Split::Test, STAGE)?;
    if dyads.is_empty() {
        dyads = split_samples(&config.paths.dataset_dir, Split::Train, STAGE)?;
    }
    let assets = assets(config, STAGE)?;
    let audio = AudioFeatureConfig {
        dim: ckpt.unet.audio_dim,
        ..Default::default()
    };
    let schedule = NoiseSchedule::default();
    let out_dir = config.paths.report_dir.join(SAMPLES_DIR);
    create_dir(STAGE, &out_dir)?;

    let mut index = Vec::with_capacity(dyads.len());
    for (i, (path, s)) in dyads.iter().enumerate() {
        let p = prepare_sample(s, &assets, &ckpt.unet, &audio).map_err(|e| CliError::runtime(STAGE, e))?;
        let net = DualNet::<f64>::new(ckpt.unet.clone(), p.len()).map_err(|e| CliError::runtime(STAGE, e))?;
        let den = NetDenoiser {
            net: &net,
            params: &ckpt.params,
        };
        let sc = SamplerConfig {
            seed: sampler.seed.wrapping_add(i as u64),
            ..sampler
        };
        let (a, b) = ddim_sample(
            &den,
            &p.cond,
            &schedule,
            &sc,
            p.fps,
            (p.identity[0].clone(), p.identity[1].clone()),
        )
        .map_err(|e| CliError::runtime(STAGE, e))?;
        let stem = Path::new(path)
            .file_stem()
            .and_then(|x| x.to_str())
            .unwrap_or("dyad")
            .to_string();
        let pair = SampledPair {
            source: path.clone(),
            a: format!("{stem}_a.dydm"),
            b: format!("{stem}_b.dydm"),
        };
        write_motion(STAGE, &out_dir.join(&pair.a), &a)?;
        write_motion(STAGE, &out_dir.join(&pair.b), &b)?;
        index.push(pair);
    }
    write_json(STAGE, &out_dir.join(SAMPLE_INDEX), &index)?;
    Ok(json!({ "checkpoint": ckpt_path, "samples": out_dir, "dyads": index.len() }))
}

/// Scores the sampled dyads against their ground truth and writes the
/// metric report.
pub fn cmd_eval(config: &GlobalConfig) -> Result<EvalReport, CliError> {
    const STAGE: &str = "eval";
    let dir = config.paths.report_dir.join(SAMPLES_DIR);
    let index_path = dir.join(SAMPLE_INDEX);
    let text = fs::read_to_string(&index_path)
        .map_err(|e| CliError::runtime(STAGE, format!("{}: {e}", index_path.display())))?;
    let index: Vec<SampledPair> = serde_json::from_str(&text).map_err(|e| CliError::runtime(STAGE, e))?;
    let inputs = index
        .iter()
        .map(|pair| {
            let gt = dyad_core::datagen::load_sample(&config.paths.dataset_dir.join(&pair.source))
                .map_err(|e| CliError::runtime(STAGE, e))?;
            Ok(EvalInput {
                pred: [
                    read_motion(STAGE, &dir.join(&pair.a))?,
                    read_motion(STAGE, &dir.join(&pair.b))?,
                ],
                masks: [gt.mask_a.values().to_vec(), gt.mask_b.values().to_vec()],
                gt: [gt.motion_a, gt.motion_b],
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let assets = assets(config, STAGE)?;
    let extractor = ProjectionExtractor::new(config.seed, config.metrics.feature_dim);
    let report = evaluate(
        &inputs,
        &assets.basis,
        &assets.rig,
        &extractor,
        config.metrics.sid_k,
        config.seed,
    )
    .map_err(|e| CliError::runtime(STAGE, e))?;
    create_dir(STAGE, &config.paths.report_dir)?;
    write_json(STAGE, &config.paths.report_dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Initial translations for a text description.
pub fn cmd_layout(config: &GlobalConfig, prompt: &str, live: bool) -> Result<LayoutResult, CliError> {
    const STAGE: &str = "layout";
    let bank = match &config.layout.bank {
        Some(p) => ExampleBank::load(p).map_err(|e| CliError::runtime(STAGE, e))?,
        None => ExampleBank::builtin(),
    };
    let mut client = config.layout.client.clone();
    if live {
        client.mode = LlmMode::Live;
    }
    request_layout(prompt, &client, &bank, config.seed).map_err(|e| CliError::runtime(STAGE, e))
}

/// datagen, both training stages, sampling, evaluation and a stub-mode
/// layout query, in that order.
pub fn cmd_pipeline(config: &GlobalConfig) -> Result<Value, CliError> {
    config.validate()?;
    let data = cmd_datagen(config, config.data.n_samples, config.data.mix)?;
    let stage1 = cmd_train(config, 1, None)?;
    let stage2 = cmd_train(config, 2, None)?;
    let sample = cmd_sample(
        config,
        Some(&checkpoint_path(config, 2)),
        SamplerConfig {
            seed: config.seed,
            ..config.sampler
        },
    )?;
    let report = cmd_eval(config)?;
    let mut stub = config.clone();
    stub.layout.client.mode = LlmMode::Stub;
    let layout = cmd_layout(&stub, &config.layout.pipeline_prompt, false)?;
    write_json("layout", &config.paths.report_dir.join(LAYOUT_FILE), &layout)?;
    Ok(json!({
        "datagen": data,
        "train": [stage1, stage2],
        "sample": sample,
        "report": report,
        "layout": layout,
    }))
}
