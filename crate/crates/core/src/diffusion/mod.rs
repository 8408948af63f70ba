//! Cosine logSNR schedule, forward noising, the x0-prediction objective,
//! classifier-free guidance and the deterministic DDIM sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dualnet::{DualInputs, DualNet, DualNetError};
use crate::facemodel::{FaceModelError, MotionSequence, MOTION_DIM, TRANS_OFFSET};
use crate::numerics::{Tensor, TensorMap};
use crate::scalar::Scalar;

pub const DEFAULT_GUIDANCE: f64 = 2.5;
/// The other guidance weight in use.
pub const ALT_GUIDANCE: f64 = 2.0;
pub const DEFAULT_STEPS: usize = 8;
pub const AUDIO_DROPOUT: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("non-finite value at sampling step {step}")]
    NonFinite { step: usize },
    #[error("non-finite training loss in {0}")]
    NonFiniteLoss(&'static str),
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] DualNetError),
    #[error(transparent)]
    Face(#[from] FaceModelError),
}

/// `logSNR(t) = -2 ln tan(pi t / 2)`, clamped.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSchedule {
    pub logsnr_min: f64,
    pub logsnr_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            logsnr_min: -15.0,
            logsnr_max: 15.0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl NoiseSchedule {
    pub fn logsnr(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        let raw = -2.0 * (std::f64::consts::FRAC_PI_2 * t).tan().ln();
        if raw.is_nan() {
            return self.logsnr_min;
        }
        raw.clamp(self.logsnr_min, self.logsnr_max)
    }

    pub fn alpha(&self, t: f64) -> f64 {
        sigmoid(self.logsnr(t)).sqrt()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        sigmoid(-self.logsnr(t)).sqrt()
    }

    /// `x_t = alpha(t) x0 + sigma(t) eps`.
    pub fn noise<T: Scalar>(&self, x0: &Tensor<T>, t: f64, eps: &Tensor<T>) -> Tensor<T> {
        let (a, s) = (T::lit(self.alpha(t)), T::lit(self.sigma(t)));
        x0.zip_map(eps, |x, e| a * x + s * e)
    }
}

/// `uncond + w (cond - uncond)`.
pub fn cfg_combine<T: Scalar>(cond: &Tensor<T>, uncond: &Tensor<T>, w: T) -> Tensor<T> {
    cond.zip_map(uncond, |c, u| u + w * (c - u))
}

/// Anything that predicts clean motion for both streams.
pub trait Denoiser<T: Scalar>: Sync {
    fn predict(&self, inputs: &DualInputs<T>) -> Result<(Tensor<T>, Tensor<T>), DiffusionError>;
}

/// A network together with its parameters.
pub struct NetDenoiser<'a, T> {
    pub net: &'a DualNet<T>,
    pub params: &'a TensorMap<T>,
}

impl<T: Scalar> Denoiser<T> for NetDenoiser<'_, T> {
    fn predict(&self, inputs: &DualInputs<T>) -> Result<(Tensor<T>, Tensor<T>), DiffusionError> {
        Ok(self.net.forward(self.params, inputs)?)
    }
}

/// Conditioning shared by every denoising call on one dyad.
#[derive(Clone, Debug)]
pub struct Conditions<T> {
    pub audio: Tensor<T>,
    pub mask_a: Vec<T>,
    pub mask_b: Vec<T>,
    pub t0_a: [T; 3],
    pub t0_b: [T; 3],
}

impl<T: Scalar> Conditions<T> {
    pub fn len(&self) -> usize {
        self.audio.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.audio.rows() == 0
    }

    pub fn inputs(&self, x_a: Tensor<T>, x_b: Tensor<T>, time: T, drop_audio: bool) -> DualInputs<T> {
        DualInputs {
            x_a,
            x_b,
            audio: self.audio.clone(),
            mask_a: self.mask_a.clone(),
            mask_b: self.mask_b.clone(),
            t0_a: self.t0_a,
            t0_b: self.t0_b,
            time,
            drop_audio,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub guidance_weight: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: DEFAULT_STEPS,
            guidance_weight: DEFAULT_GUIDANCE,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.num_steps == 0 {
            return Err(DiffusionError::Config("num_steps must be >= 1".into()));
        }
        if !(self.guidance_weight >= 0.0) {
            return Err(DiffusionError::Config(format!(
                "guidance weight {} must be >= 0",
                self.guidance_weight
            )));
        }
        Ok(())
    }
}

fn gaussian<T: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(&[rows, cols], |_| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Guided clean-data prediction at diffusion time `t`.
fn guided<T: Scalar, D: Denoiser<T> + ?Sized>(
    model: &D,
    cond: &Conditions<T>,
    x: &(Tensor<T>, Tensor<T>),
    t: f64,
    w: f64,
) -> Result<(Tensor<T>, Tensor<T>), DiffusionError> {
    let c = model.predict(&cond.inputs(x.0.clone(), x.1.clone(), T::lit(t), false))?;
    if w == 1.0 {
        return Ok(c);
    }
    let u = model.predict(&cond.inputs(x.0.clone(), x.1.clone(), T::lit(t), true))?;
    let w = T::lit(w);
    Ok((cfg_combine(&c.0, &u.0, w), cfg_combine(&c.1, &u.1, w)))
}

/// Deterministic DDIM from pure noise at `t = 1` down to `t = 0`. Returns
/// the final clean-data prediction of both streams, `[L, 78]`, with the
/// translation block still relative to the first frame.
pub fn ddim_sample_raw<T: Scalar, D: Denoiser<T> + ?Sized>(
    model: &D,
    cond: &Conditions<T>,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
) -> Result<(Tensor<T>, Tensor<T>), DiffusionError> {
    sampler.validate()?;
    let l = cond.len();
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut x = (gaussian(l, MOTION_DIM, &mut rng), gaussian(l, MOTION_DIM, &mut rng));
    let n = sampler.num_steps;
    for i in 0..n {
        let t = 1.0 - i as f64 / n as f64;
        let t_next = 1.0 - (i + 1) as f64 / n as f64;
        let x0 = guided(model, cond, &x, t, sampler.guidance_weight)?;
        if !x0.0.all_finite() || !x0.1.all_finite() {
            return Err(DiffusionError::NonFinite { step: i });
        }
        if i + 1 == n {
            return Ok(x0);
        }
        let (a, s) = (T::lit(schedule.alpha(t)), T::lit(schedule.sigma(t)));
        let (a2, s2) = (T::lit(schedule.alpha(t_next)), T::lit(schedule.sigma(t_next)));
        let step = |xt: &Tensor<T>, x0: &Tensor<T>| {
            xt.zip_map(x0, |xv, x0v| {
                let eps = (xv - a * x0v) / s;
                a2 * x0v + s2 * eps
            })
        };
        x = (step(&x.0, &x0.0), step(&x.1, &x0.1));
        if !x.0.all_finite() || !x.1.all_finite() {
            return Err(DiffusionError::NonFinite { step: i });
        }
    }
    unreachable!("loop returns on its last step")
}

/// Adds `t0` to the translation block of every frame.
pub fn denormalize_translation<T: Scalar>(x: &Tensor<T>, t0: [T; 3]) -> Tensor<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        for k in 0..3 {
            let v = out.at(r, TRANS_OFFSET + k) + t0[k];
            out.set(r, TRANS_OFFSET + k, v);
        }
    }
    out
}

/// Inverse of [`denormalize_translation`] against each track's first frame.
pub fn relative_translation<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, [T; 3]) {
    let t0 = [
        x.at(0, TRANS_OFFSET),
        x.at(0, TRANS_OFFSET + 1),
        x.at(0, TRANS_OFFSET + 2),
    ];
    let mut out = x.clone();
    for r in 0..out.rows() {
        for k in 0..3 {
            let v = out.at(r, TRANS_OFFSET + k) - t0[k];
            out.set(r, TRANS_OFFSET + k, v);
        }
    }
    (out, t0)
}

/// Samples both participants' motion sequences.
pub fn ddim_sample<T: Scalar, D: Denoiser<T> + ?Sized>(
    model: &D,
    cond: &Conditions<T>,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    fps: T,
    identities: (Vec<T>, Vec<T>),
) -> Result<(MotionSequence<T>, MotionSequence<T>), DiffusionError> {
    let (a, b) = ddim_sample_raw(model, cond, schedule, sampler)?;
    let a = denormalize_translation(&a, cond.t0_a);
    let b = denormalize_translation(&b, cond.t0_b);
    Ok((
        MotionSequence::from_matrix(&a, fps, identities.0)?,
        MotionSequence::from_matrix(&b, fps, identities.1)?,
    ))
}

/// One draw of the training randomness for a dyad.
#[derive(Clone, Debug)]
pub struct NoiseDraw<T> {
    pub t: f64,
    pub eps_a: Tensor<T>,
    pub eps_b: Tensor<T>,
    pub drop_audio: bool,
}

impl<T: Scalar> NoiseDraw<T> {
    /// `t ~ U(0, 1)`, standard normal noise, audio dropped with
    /// probability `p_drop`.
    pub fn sample<R: Rng>(rng: &mut R, l: usize, p_drop: f64) -> Self {
        let t = rng.random::<f64>();
        let eps_a = gaussian(l, MOTION_DIM, rng);
        let eps_b = gaussian(l, MOTION_DIM, rng);
        let drop_audio = rng.random_bool(p_drop);
        Self {
            t,
            eps_a,
            eps_b,
            drop_audio,
        }
    }

    /// Network inputs for noising clean `x0` pair under this draw.
    pub fn noised_inputs(
        &self,
        schedule: &NoiseSchedule,
        cond: &Conditions<T>,
        x0_a: &Tensor<T>,
        x0_b: &Tensor<T>,
    ) -> DualInputs<T> {
        cond.inputs(
            schedule.noise(x0_a, self.t, &self.eps_a),
            schedule.noise(x0_b, self.t, &self.eps_b),
            T::lit(self.t),
            self.drop_audio,
        )
    }
}

/// Plain x0-prediction objective `mean ||x0 - G(x_t, t, c)||^2` over both
/// streams.
pub fn training_loss<T: Scalar, D: Denoiser<T> + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    cond: &Conditions<T>,
    x0: (&Tensor<T>, &Tensor<T>),
    draw: &NoiseDraw<T>,
) -> Result<T, DiffusionError> {
    let inputs = draw.noised_inputs(schedule, cond, x0.0, x0.1);
    let (pa, pb) = model.predict(&inputs)?;
    let se =
        |p: &Tensor<T>, x: &Tensor<T>| -> T { p.data().iter().zip(x.data()).map(|(&a, &b)| (a - b) * (a - b)).sum() };
    let n = T::from_usize_lossy(x0.0.len() + x0.1.len());
    let loss = (se(&pa, x0.0) + se(&pb, x0.1)) / n;
    if !loss.is_finite() {
        return Err(DiffusionError::NonFiniteLoss("x0 objective"));
    }
    Ok(loss)
}
