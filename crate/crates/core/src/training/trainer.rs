use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::graph::{prepare_sample, PreparedSample, TrainGraph};
use super::{optimizer_step, AdamHyper, AdamState, FaceAssets, TrainConfig, TrainError};
use crate::conditioning::AudioFeatureConfig;
use crate::datagen::{DyadSample, SampleSource};
use crate::diffusion::{NoiseDraw, NoiseSchedule};
use crate::dualnet::{init_params, DualNet, UNetConfig};
use crate::numerics::{load_archive, save_archive, Tensor, TensorMap};

/// One row of the loss curve: batch means after update `step`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct CurveRow {
    pub step: usize,
    pub lr: f64,
    pub expr: f64,
    pub rot: f64,
    pub trans: f64,
    pub vel: f64,
    /// Mean over gaze-subset elements of the batch, if any.
    pub gaze: Option<f64>,
    /// Mean over lip-only elements of the batch, if any.
    pub lip: Option<f64>,
    pub total: f64,
}

pub fn write_curve_csv<W: Write>(w: &mut W, rows: &[CurveRow]) -> std::io::Result<()> {
    writeln!(w, "step,lr,expr,rot,trans,vel,gaze,lip,total")?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.step,
            r.lr,
            r.expr,
            r.rot,
            r.trans,
            r.vel,
            opt(r.gaze),
            opt(r.lip),
            r.total
        )?;
    }
    Ok(())
}

/// Trained weights with the optimizer state needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub unet: UNetConfig,
    pub params: TensorMap<f64>,
    pub adam: AdamState,
    pub stage: u8,
    /// Updates completed in `stage`.
    pub step: usize,
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const META_ADAM_STEP: &str = "meta.adam_step";
const META_STEP: &str = "meta.step";
const META_STAGE: &str = "meta.stage";
const META_UNET: &str = "meta.unet";

fn unet_to_vec(c: &UNetConfig) -> Vec<f64> {
    [
        c.embed_dim,
        c.num_blocks,
        c.subblocks_per_block,
        c.attention_heads,
        c.temporal_stride,
        c.audio_dim,
        c.role_dim,
        c.time_dim,
    ]
    .iter()
    .map(|&x| x as f64)
    .collect()
}

fn unet_from_vec(v: &[f64]) -> Result<UNetConfig, TrainError> {
    if v.len() != 8 || v.iter().any(|x| x.fract() != 0.0 || *x < 1.0) {
        return Err(TrainError::Checkpoint(format!("bad network record {v:?}")));
    }
    let u = |i: usize| v[i] as usize;
    let c = UNetConfig {
        embed_dim: u(0),
        num_blocks: u(1),
        subblocks_per_block: u(2),
        attention_heads: u(3),
        temporal_stride: u(4),
        audio_dim: u(5),
        role_dim: u(6),
        time_dim: u(7),
    };
    c.validate()?;
    Ok(c)
}

impl Checkpoint {
    pub fn to_tensors(&self) -> TensorMap<f64> {
        let mut m = self.params.clone();
        for (k, t) in &self.adam.m {
            m.insert(format!("{ADAM_M}{k}"), t.clone());
        }
        for (k, t) in &self.adam.v {
            m.insert(format!("{ADAM_V}{k}"), t.clone());
        }
        // u64 counters stay exact in f64 far beyond any run length
        m.insert(META_ADAM_STEP.into(), Tensor::vector(vec![self.adam.step as f64]));
        m.insert(META_STEP.into(), Tensor::vector(vec![self.step as f64]));
        m.insert(META_STAGE.into(), Tensor::vector(vec![self.stage as f64]));
        m.insert(META_UNET.into(), Tensor::vector(unet_to_vec(&self.unet)));
        m
    }

    pub fn from_tensors(mut m: TensorMap<f64>) -> Result<Self, TrainError> {
        let mut take = |k: &str| {
            m.remove(k)
                .ok_or_else(|| TrainError::Checkpoint(format!("missing record {k}")))
        };
        let scalar = |t: Tensor<f64>| t.data()[0];
        let adam_step = scalar(take(META_ADAM_STEP)?) as u64;
        let step = scalar(take(META_STEP)?) as usize;
        let stage = scalar(take(META_STAGE)?) as u8;
        let unet = unet_from_vec(take(META_UNET)?.data())?;
        let mut params = TensorMap::new();
        let mut adam = AdamState {
            step: adam_step,
            ..Default::default()
        };
        for (k, t) in m {
            if let Some(n) = k.strip_prefix(ADAM_M) {
                adam.m.insert(n.to_string(), t);
            } else if let Some(n) = k.strip_prefix(ADAM_V) {
                adam.v.insert(n.to_string(), t);
            } else {
                params.insert(k, t);
            }
        }
        let specs = DualNet::<f64>::new(unet.clone(), 4)?.specs;
        for (name, (shape, _)) in &specs {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(TrainError::Checkpoint(format!("parameter {name} missing or misshapen"))),
            }
        }
        Ok(Self {
            unet,
            params,
            adam,
            stage,
            step,
        })
    }
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<(), TrainError> {
    Ok(save_archive(path, &c.to_tensors())?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    Checkpoint::from_tensors(load_archive(path)?)
}

/// Which prepared sample fills a batch slot and with which objective.
#[derive(Clone, Copy, Debug)]
struct Slot {
    index: usize,
    lip_only: bool,
}

/// Stateful trainer for one stage.
pub struct Trainer {
    pub config: TrainConfig,
    pub unet: UNetConfig,
    pub schedule: NoiseSchedule,
    pub params: TensorMap<f64>,
    pub adam: AdamState,
    /// Updates completed in this stage.
    pub step: usize,
    pub curve: Vec<CurveRow>,
    samples: Vec<PreparedSample>,
    conversation: Vec<usize>,
    lip_pool: Vec<usize>,
    graphs: BTreeMap<usize, TrainGraph>,
}

impl Trainer {
    /// Stage 1 may start fresh; stage 2 needs a checkpoint. A checkpoint
    /// from the same stage resumes where it stopped.
    pub fn new(
        config: TrainConfig,
        unet: UNetConfig,
        assets: &FaceAssets,
        samples: &[DyadSample],
        init: Option<&Checkpoint>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        unet.validate()?;
        if config.stage == 2 && init.is_none() {
            return Err(TrainError::MissingCheckpoint);
        }
        let audio = AudioFeatureConfig {
            dim: unet.audio_dim,
            ..Default::default()
        };
        let prepared = samples
            .par_iter()
            .map(|s| prepare_sample(s, assets, &unet, &audio))
            .collect::<Result<Vec<_>, _>>()?;
        let conversation: Vec<usize> = (0..prepared.len())
            .filter(|&i| prepared[i].source == SampleSource::Conversation)
            .collect();
        let lip_pool: Vec<usize> = (0..prepared.len())
            .filter(|&i| prepared[i].source != SampleSource::Conversation)
            .collect();
        if config.stage == 1 && conversation.is_empty() {
            return Err(TrainError::EmptySource("conversation"));
        }
        if config.stage == 2 {
            if conversation.is_empty() && config.lip_fraction < 1.0 {
                return Err(TrainError::EmptySource("conversation"));
            }
            if lip_pool.is_empty() && config.lip_fraction > 0.0 {
                return Err(TrainError::EmptySource("synthetic_dub or single_speaker"));
            }
        }

        let mut graphs = BTreeMap::new();
        for p in &prepared {
            if let std::collections::btree_map::Entry::Vacant(e) = graphs.entry(p.len()) {
                e.insert(TrainGraph::new(&unet, p.len(), assets, config.weights)?);
            }
        }
        let (params, adam, step) = match (init, config.stage) {
            (None, 2) => return Err(TrainError::MissingCheckpoint),
            (None, _) => {
                let specs = DualNet::<f64>::new(unet.clone(), 4)?.specs;
                (init_params(&specs, config.init_seed), AdamState::default(), 0)
            }
            (Some(c), stage) => {
                if c.unet != unet {
                    return Err(TrainError::Checkpoint("network configuration differs".into()));
                }
                if c.stage == stage {
                    (c.params.clone(), c.adam.clone(), c.step)
                } else if c.stage + 1 == stage {
                    (c.params.clone(), AdamState::default(), 0)
                } else {
                    return Err(TrainError::Checkpoint(format!(
                        "cannot continue a stage-{} checkpoint in stage {stage}",
                        c.stage
                    )));
                }
            }
        };
        Ok(Self {
            config,
            unet,
            schedule: NoiseSchedule::default(),
            params,
            adam,
            step,
            curve: Vec::new(),
            samples: prepared,
            conversation,
            lip_pool,
            graphs,
        })
    }

    pub fn samples(&self) -> &[PreparedSample] {
        &self.samples
    }

    fn slots<R: Rng>(&self, rng: &mut R) -> Vec<Slot> {
        (0..self.config.batch_size)
            .map(|_| {
                let lip = self.config.stage == 2
                    && !self.lip_pool.is_empty()
                    && (self.conversation.is_empty() || rng.random_bool(self.config.lip_fraction));
                let pool = if lip { &self.lip_pool } else { &self.conversation };
                Slot {
                    index: pool[rng.random_range(0..pool.len())],
                    lip_only: lip,
                }
            })
            .collect()
    }

    /// One optimizer update. On a non-finite loss or gradient nothing
    /// changes and the error is returned.
    pub fn step(&mut self) -> Result<CurveRow, TrainError> {
        let update = self.step + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step as u64);
        let slots = self.slots(&mut rng);
        let draws: Vec<NoiseDraw<f64>> = slots
            .iter()
            .map(|s| NoiseDraw::sample(&mut rng, self.samples[s.index].len(), self.config.audio_dropout))
            .collect();

        let results = slots
            .par_iter()
            .zip(draws.par_iter())
            .map(|(slot, draw)| {
                let p = &self.samples[slot.index];
                let g = &self.graphs[&p.len()];
                let inputs = g.bind(p, &self.schedule, draw, slot.lip_only)?;
                g.loss_and_grad(&self.params, &inputs, p.gaze_subset && !slot.lip_only)
            })
            .collect::<Result<Vec<_>, _>>()?;

        let b = slots.len() as f64;
        let mut grads: TensorMap<f64> = TensorMap::new();
        let mut row = CurveRow {
            step: update,
            lr: self.config.lr_at(update),
            expr: 0.0,
            rot: 0.0,
            trans: 0.0,
            vel: 0.0,
            gaze: None,
            lip: None,
            total: 0.0,
        };
        let (mut gaze_sum, mut gaze_n, mut lip_sum, mut lip_n) = (0.0, 0usize, 0.0, 0usize);
        for ((c, lip, g), slot) in results.iter().zip(&slots) {
            row.expr += c.expr / b;
            row.rot += c.rot / b;
            row.trans += c.trans / b;
            row.vel += c.vel / b;
            row.total += c.total / b;
            if let Some(gz) = c.gaze {
                gaze_sum += gz;
                gaze_n += 1;
            }
            if slot.lip_only {
                lip_sum += lip;
                lip_n += 1;
            }
            for (k, t) in g {
                match grads.get_mut(k) {
                    Some(acc) => acc.add_assign(t),
                    None => {
                        grads.insert(k.clone(), t.clone());
                    }
                }
            }
        }
        row.gaze = (gaze_n > 0).then(|| gaze_sum / gaze_n as f64);
        row.lip = (lip_n > 0).then(|| lip_sum / lip_n as f64);
        if !row.total.is_finite() {
            return Err(TrainError::NonFinite {
                what: "loss".into(),
                step: update,
            });
        }
        for t in grads.values_mut() {
            *t = t.scaled(1.0 / b);
        }
        let hyper = AdamHyper {
            weight_decay: self.config.weight_decay,
            ..Default::default()
        };
        optimizer_step(&mut self.params, &grads, &mut self.adam, row.lr, &hyper).map_err(|e| match e {
            TrainError::NonFinite { what, .. } => TrainError::NonFinite { what, step: update },
            other => other,
        })?;
        self.step = update;
        self.curve.push(row);
        Ok(row)
    }

    /// Runs until `total_steps` updates have been made in this stage.
    pub fn run(&mut self) -> Result<(), TrainError> {
        while self.step < self.config.total_steps {
            let row = self.step()?;
            if row.step % 100 == 0 || row.step == 1 {
                log::info!("stage {} step {} loss {:.6}", self.config.stage, row.step, row.total);
            }
        }
        Ok(())
    }

    /// Mean objective over every sample under fixed noise draws (stream
    /// `i` of `seed` for sample `i`) with audio kept.
    pub fn evaluate(&self, params: &TensorMap<f64>, seed: u64) -> Result<f64, TrainError> {
        let losses = (0..self.samples.len())
            .into_par_iter()
            .map(|i| {
                let p = &self.samples[i];
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let draw = NoiseDraw::sample(&mut rng, p.len(), 0.0);
                let lip_only = self.config.stage == 2 && p.source != SampleSource::Conversation;
                let g = &self.graphs[&p.len()];
                let inputs = g.bind(p, &self.schedule, &draw, lip_only)?;
                Ok(g.loss(params, &inputs, p.gaze_subset && !lip_only)?.0.total)
            })
            .collect::<Result<Vec<f64>, TrainError>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            unet: self.unet.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            stage: self.config.stage,
            step: self.step,
        }
    }
}

/// See [`Trainer::evaluate`].
pub fn evaluate_loss(trainer: &Trainer, params: &TensorMap<f64>, seed: u64) -> Result<f64, TrainError> {
    trainer.evaluate(params, seed)
}

/// Runs one full stage and returns the final checkpoint and loss curve.
pub fn train_stage(
    config: &TrainConfig,
    unet: &UNetConfig,
    assets: &FaceAssets,
    samples: &[DyadSample],
    init: Option<&Checkpoint>,
) -> Result<(Checkpoint, Vec<CurveRow>), TrainError> {
    let mut t = Trainer::new(config.clone(), unet.clone(), assets, samples, init)?;
    t.run()?;
    Ok((t.checkpoint(), t.curve))
}
