//! Loss functions, the AdamW update and the two-stage trainer.
//!
//! Everything here runs in `f64`; the network and face model underneath
//! are generic.

mod graph;
mod trainer;

pub use graph::{prepare_sample, PreparedSample, TrainGraph, TrainNodes};
pub use trainer::{
    evaluate_loss, load_checkpoint, save_checkpoint, train_stage, write_curve_csv, Checkpoint, CurveRow, Trainer,
};

use crate::conditioning::SpeakerMask;
use crate::datagen::{DatagenError, DyadSample};
use crate::diffusion::DiffusionError;
use crate::dualnet::DualNetError;
use crate::facemodel::{
    gaze_vector, FaceBasis, FaceModelError, MotionSequence, Rig, EXPRESSION_DIM, LIP_COUNT, MOTION_DIM, ROT_OFFSET,
    TRANS_OFFSET,
};
use crate::numerics::{NumericsError, Tensor, TensorMap};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no {0} samples available for this stage")]
    EmptySource(&'static str),
    #[error("stage 2 needs a stage-1 checkpoint")]
    MissingCheckpoint,
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Face(#[from] FaceModelError),
    #[error(transparent)]
    Model(#[from] DualNetError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Data(#[from] DatagenError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub expr: f64,
    pub rot: f64,
    pub trans: f64,
    pub vel: f64,
    /// Applied only to gaze-subset samples.
    pub gaze: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            expr: 1.0,
            rot: 8.0,
            trans: 1.0,
            vel: 1.0,
            gaze: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        let all = [self.expr, self.rot, self.trans, self.vel, self.gaze];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(TrainError::Config(format!(
                "loss weights must be finite and >= 0: {all:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Decoupled weight decay with bias-corrected moments.
    AdamW,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: u8,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub audio_dropout: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Share of stage-2 batch slots drawn from the lip-only sources.
    pub lip_fraction: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    /// Seed of the initial parameters (stage 1 without a checkpoint).
    pub init_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            learning_rate: 1e-4,
            warmup_steps: 2000,
            batch_size: 8,
            total_steps: 2000,
            audio_dropout: crate::diffusion::AUDIO_DROPOUT,
            seed: 0,
            weights: LossWeights::default(),
            lip_fraction: 0.5,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.01,
            init_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.stage != 1 && self.stage != 2 {
            return bad(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup {} exceeds total steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.audio_dropout) {
            return bad("learning rate must be > 0 and dropout in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.lip_fraction) || !(self.weight_decay >= 0.0) {
            return bad("lip fraction must be in [0, 1] and weight decay >= 0".into());
        }
        self.weights.validate()
    }

    /// Learning rate of update number `step` (1-based): linear ramp over
    /// the warmup, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        self.learning_rate * step.min(self.warmup_steps) as f64 / self.warmup_steps as f64
    }
}

/// Face basis and rig shared by the losses.
#[derive(Clone, Debug)]
pub struct FaceAssets {
    pub basis: FaceBasis<f64>,
    pub rig: Rig<f64>,
}

impl FaceAssets {
    pub fn synthetic(vertex_count: usize, seed: u64) -> Result<Self, TrainError> {
        let basis = FaceBasis::synthetic(vertex_count, seed)?;
        let rig = Rig::synthetic(basis.mean_shape())?;
        Ok(Self { basis, rig })
    }

    pub fn lip_indices(&self) -> &[usize] {
        self.basis.lip_indices()
    }
}

/// Named loss terms of one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct LossComponents {
    pub expr: f64,
    pub rot: f64,
    pub trans: f64,
    pub vel: f64,
    /// Present only for gaze-subset samples.
    pub gaze: Option<f64>,
    pub total: f64,
}

fn block_mse(p: &Tensor<f64>, x: &Tensor<f64>, cols: std::ops::Range<usize>) -> f64 {
    let mut s = 0.0;
    for r in 0..p.rows() {
        for c in cols.clone() {
            s += (p.at(r, c) - x.at(r, c)).powi(2);
        }
    }
    s
}

/// Posed meshes of a model-space motion (translation relative to `t0`).
fn posed_frames(
    m: &Tensor<f64>,
    identity: &[f64],
    t0: [f64; 3],
    assets: &FaceAssets,
) -> Result<Vec<Tensor<f64>>, TrainError> {
    let seq = MotionSequence::from_matrix(m, 25.0, identity.to_vec())?;
    seq.frames()
        .iter()
        .map(|f| {
            let mesh = assets.basis.synthesize_mesh(identity, &f.expression)?;
            let t = [
                f.translation[0] + t0[0],
                f.translation[1] + t0[1],
                f.translation[2] + t0[2],
            ];
            Ok(assets.rig.pose_mesh(&mesh, &f.rotation, t)?)
        })
        .collect()
}

fn velocity_se(p: &[Tensor<f64>], x: &[Tensor<f64>]) -> f64 {
    let mut s = 0.0;
    for k in 1..p.len() {
        for i in 0..p[k].len() {
            let dp = p[k].data()[i] - p[k - 1].data()[i];
            let dx = x[k].data()[i] - x[k - 1].data()[i];
            s += (dp - dx).powi(2);
        }
    }
    s
}

fn gaze_cos_sum(p: &Tensor<f64>, x: &Tensor<f64>) -> Result<f64, TrainError> {
    let mut s = 0.0;
    for r in 0..p.rows() {
        let gp = gaze_vector(&crate::facemodel::MotionFrame::from_slice(p.row(r))?.rotation)?;
        let gx = gaze_vector(&crate::facemodel::MotionFrame::from_slice(x.row(r))?.rotation)?;
        s += gp[0] * gx[0] + gp[1] * gx[1] + gp[2] * gx[2];
    }
    Ok(s)
}

/// Value-level component losses of one dyad. `pred` and `target` are
/// `[L, 78]` model-space matrices whose translation block is relative to
/// the sample's first-frame translations.
pub fn component_losses(
    pred: (&Tensor<f64>, &Tensor<f64>),
    target: (&Tensor<f64>, &Tensor<f64>),
    sample: &DyadSample,
    assets: &FaceAssets,
    weights: &LossWeights,
) -> Result<LossComponents, TrainError> {
    let l = target.0.rows();
    for t in [pred.0, pred.1, target.0, target.1] {
        if t.shape() != [l, MOTION_DIM] {
            return Err(TrainError::Config(format!(
                "expected [{l}, {MOTION_DIM}], got {:?}",
                t.shape()
            )));
        }
    }
    let lf = l as f64;
    let pairs = [(pred.0, target.0), (pred.1, target.1)];
    let blk = |cols: std::ops::Range<usize>| -> f64 {
        let w = (cols.end - cols.start) as f64;
        pairs.iter().map(|(p, x)| block_mse(p, x, cols.clone())).sum::<f64>() / (2.0 * lf * w)
    };
    let expr = blk(0..EXPRESSION_DIM);
    let rot = blk(ROT_OFFSET..TRANS_OFFSET);
    let trans = blk(TRANS_OFFSET..MOTION_DIM);

    let ids = [sample.motion_a.identity(), sample.motion_b.identity()];
    let t0s = [sample.t0_a, sample.t0_b];
    let v = assets.basis.vertex_count() as f64;
    let mut vel = 0.0;
    for (s, (p, x)) in pairs.iter().enumerate() {
        let mp = posed_frames(p, ids[s], t0s[s], assets)?;
        let mx = posed_frames(x, ids[s], t0s[s], assets)?;
        vel += velocity_se(&mp, &mx);
    }
    vel /= 2.0 * (lf - 1.0) * v * 3.0;

    let gaze = if sample.gaze_subset {
        let cos = gaze_cos_sum(pred.0, target.0)? + gaze_cos_sum(pred.1, target.1)?;
        Some(1.0 - cos / (2.0 * lf))
    } else {
        None
    };
    let total = weights.expr * expr
        + weights.rot * rot
        + weights.trans * trans
        + weights.vel * vel
        + gaze.map_or(0.0, |g| weights.gaze * g);
    let out = LossComponents {
        expr,
        rot,
        trans,
        vel,
        gaze,
        total,
    };
    if ![expr, rot, trans, vel, total].iter().all(|x| x.is_finite()) {
        return Err(TrainError::NonFinite {
            what: "loss component".into(),
            step: 0,
        });
    }
    Ok(out)
}

/// Per-entry weights of the lip-only loss for one participant: `1/n` on
/// lip columns of speaking frames (`mask > 0.5`), zero elsewhere, where
/// `n` counts the weighted entries.
pub fn lip_weights(mask: &[f64], lip_indices: &[usize]) -> Tensor<f64> {
    let l = mask.len();
    let speaking = mask.iter().filter(|&&m| m > 0.5).count();
    let mut w = Tensor::zeros(&[l, MOTION_DIM]);
    if speaking == 0 || lip_indices.is_empty() {
        return w;
    }
    let inv = 1.0 / (speaking * lip_indices.len()) as f64;
    for (r, &m) in mask.iter().enumerate() {
        if m > 0.5 {
            for &c in lip_indices {
                w.set(r, c, inv);
            }
        }
    }
    w
}

/// Mean squared lip error on each participant's speaking frames, summed
/// over both participants.
pub fn lip_only_loss(
    pred: (&Tensor<f64>, &Tensor<f64>),
    target: (&Tensor<f64>, &Tensor<f64>),
    masks: (&SpeakerMask, &SpeakerMask),
    lip_indices: &[usize],
) -> Result<f64, TrainError> {
    if lip_indices.iter().any(|&i| i >= EXPRESSION_DIM) {
        return Err(TrainError::Config(format!(
            "lip indices {lip_indices:?} outside the expression block"
        )));
    }
    let mut total = 0.0;
    for (p, x, m) in [(pred.0, target.0, masks.0), (pred.1, target.1, masks.1)] {
        let w = lip_weights(m.values(), lip_indices);
        for ((wi, pi), xi) in w.data().iter().zip(p.data()).zip(x.data()) {
            if *wi != 0.0 {
                total += wi * (pi - xi).powi(2);
            }
        }
    }
    Ok(total)
}

/// Default lip/jaw component set.
pub fn default_lip_indices() -> Vec<usize> {
    (0..LIP_COUNT).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments plus the update count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: TensorMap<f64>,
    pub v: TensorMap<f64>,
    pub step: u64,
}

/// One AdamW update in place. Non-finite gradients leave everything
/// untouched and return an error.
pub fn optimizer_step(
    params: &mut TensorMap<f64>,
    grads: &TensorMap<f64>,
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(TrainError::NonFinite {
                what: format!("gradient of {name}"),
                step: state.step as usize,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let zero;
        let g = match grads.get(name) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(p.shape());
                &zero
            }
        };
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = hyper.beta1 * m.data()[i] + (1.0 - hyper.beta1) * gi;
            let vi = hyper.beta2 * v.data()[i] + (1.0 - hyper.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let update = (mi / c1) / ((vi / c2).sqrt() + hyper.eps);
            let pi = p.data()[i];
            p.data_mut()[i] = pi - lr * (update + hyper.weight_decay * pi);
        }
    }
    Ok(())
}
