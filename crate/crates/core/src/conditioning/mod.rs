//! Conditioning signals: speaker activity masks, stand-in audio features,
//! role embeddings and the per-frame condition vector.

mod audio;

use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub use audio::{audio_features, band_energies, AudioFeatureConfig, BAND_COUNT, LOG_FLOOR};

pub const SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_VAD_THRESHOLD_DB: f64 = -40.0;
pub const DEFAULT_ROLE_DIM: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum ConditioningError {
    #[error("waveform is empty")]
    EmptyAudio,
    #[error("sample rate {0} Hz is not supported; expected {SAMPLE_RATE}")]
    SampleRate(u32),
    #[error("mask value {0} outside [0, 1]")]
    MaskRange(f64),
    #[error("{what}: expected length {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("fps must be positive, got {0}")]
    Fps(f64),
}

/// Mono 16 kHz audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, ConditioningError> {
        if sample_rate != SAMPLE_RATE {
            return Err(ConditioningError::SampleRate(sample_rate));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(len: usize) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples per animation frame.
    pub fn hop(&self, fps: f64) -> Result<usize, ConditioningError> {
        if !(fps > 0.0) {
            return Err(ConditioningError::Fps(fps));
        }
        Ok(((self.sample_rate as f64 / fps).round() as usize).max(1))
    }

    /// Number of animation frames covered, counting a trailing partial frame.
    pub fn frame_count(&self, fps: f64) -> Result<usize, ConditioningError> {
        Ok(self.samples.len().div_ceil(self.hop(fps)?))
    }
}

/// Per-frame speaking probability.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerMask(Vec<f64>);

impl SpeakerMask {
    pub fn new(values: Vec<f64>) -> Result<Self, ConditioningError> {
        if let Some(&v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ConditioningError::MaskRange(v));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn cast<T: Scalar>(&self) -> Vec<T> {
        self.0.iter().map(|&v| T::lit(v)).collect()
    }
}

/// Energy-based voice activity: a frame is active when its RMS level is
/// above `threshold_db` (dBFS); the indicator is then averaged with the
/// previous frame's.
pub fn compute_vad_mask(waveform: &Waveform, fps: f64, threshold_db: f64) -> Result<SpeakerMask, ConditioningError> {
    if waveform.is_empty() {
        return Err(ConditioningError::EmptyAudio);
    }
    let hop = waveform.hop(fps)?;
    let active: Vec<f64> = waveform
        .samples()
        .chunks(hop)
        .map(|frame| {
            let ms = frame.iter().map(|x| x * x).sum::<f64>() / frame.len() as f64;
            let db = 10.0 * (ms + 1e-24).log10();
            if db > threshold_db {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let smoothed = (0..active.len())
        .map(|k| 0.5 * (active[k.saturating_sub(1)] + active[k]))
        .collect();
    SpeakerMask::new(smoothed)
}

/// Learnable speaking and listening vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct RoleEmbeddings<T> {
    pub speak: Vec<T>,
    pub listen: Vec<T>,
}

impl<T: Scalar> RoleEmbeddings<T> {
    pub fn new(speak: Vec<T>, listen: Vec<T>) -> Result<Self, ConditioningError> {
        if speak.len() != listen.len() {
            return Err(ConditioningError::Length {
                what: "listen embedding",
                expected: speak.len(),
                got: listen.len(),
            });
        }
        Ok(Self { speak, listen })
    }

    pub fn dim(&self) -> usize {
        self.speak.len()
    }
}

/// `m * e_speak + (1 - m) * e_listen`.
pub fn role_embed<T: Scalar>(m: T, emb: &RoleEmbeddings<T>) -> Result<Vec<T>, ConditioningError> {
    if !(m >= T::zero() && m <= T::one()) {
        return Err(ConditioningError::MaskRange(m.to_f64_lossy()));
    }
    Ok(emb
        .speak
        .iter()
        .zip(&emb.listen)
        .map(|(&s, &l)| m * s + (T::one() - m) * l)
        .collect())
}

/// Column layout of a condition row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConditionLayout {
    pub audio_dim: usize,
    pub role_dim: usize,
}

impl ConditionLayout {
    pub fn dim(&self) -> usize {
        self.audio_dim + 2 * self.role_dim + 8
    }

    pub fn audio(&self) -> std::ops::Range<usize> {
        0..self.audio_dim
    }

    pub fn role_self(&self) -> std::ops::Range<usize> {
        self.audio_dim..self.audio_dim + self.role_dim
    }

    pub fn role_other(&self) -> std::ops::Range<usize> {
        let s = self.audio_dim + self.role_dim;
        s..s + self.role_dim
    }

    pub fn mask_self(&self) -> usize {
        self.audio_dim + 2 * self.role_dim
    }

    pub fn mask_other(&self) -> usize {
        self.mask_self() + 1
    }

    pub fn translation_self(&self) -> std::ops::Range<usize> {
        let s = self.mask_self() + 2;
        s..s + 3
    }

    pub fn translation_other(&self) -> std::ops::Range<usize> {
        let s = self.mask_self() + 5;
        s..s + 3
    }
}

/// Per-frame condition rows `[L, D_a + 2 d_e + 8]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSequence<T> {
    pub values: Tensor<T>,
    pub layout: ConditionLayout,
    pub audio_dropped: bool,
}

/// Concatenates, per frame, `(a, e_role(m_a), e_role(m_b), m_a, m_b, t_a, t_b)`.
/// With `drop_audio` the audio block is zero.
///
/// The first participant's fields come first; the condition of the second
/// stream is built by swapping the participant arguments.
#[allow(clippy::too_many_arguments)]
pub fn assemble_condition<T: Scalar>(
    features: &Tensor<T>,
    mask_a: &[T],
    mask_b: &[T],
    emb: &RoleEmbeddings<T>,
    t_a: [T; 3],
    t_b: [T; 3],
    drop_audio: bool,
) -> Result<ConditionSequence<T>, ConditioningError> {
    let l = features.rows();
    for (what, got) in [("mask A", mask_a.len()), ("mask B", mask_b.len())] {
        if got != l {
            return Err(ConditioningError::Length { what, expected: l, got });
        }
    }
    let layout = ConditionLayout {
        audio_dim: features.cols(),
        role_dim: emb.dim(),
    };
    let mut data = Vec::with_capacity(l * layout.dim());
    for k in 0..l {
        if drop_audio {
            data.extend(std::iter::repeat_n(T::zero(), layout.audio_dim));
        } else {
            data.extend_from_slice(features.row(k));
        }
        data.extend(role_embed(mask_a[k], emb)?);
        data.extend(role_embed(mask_b[k], emb)?);
        data.push(mask_a[k]);
        data.push(mask_b[k]);
        data.extend_from_slice(&t_a);
        data.extend_from_slice(&t_b);
    }
    Ok(ConditionSequence {
        values: Tensor::matrix(l, layout.dim(), data).expect("row width"),
        layout,
        audio_dropped: drop_audio,
    })
}
