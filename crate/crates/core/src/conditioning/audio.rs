//! Deterministic filter-bank features standing in for a pretrained speech
//! encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{ConditioningError, Waveform};
use crate::numerics::Tensor;

pub const BAND_COUNT: usize = 40;
/// Added to band power before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

const SUBFRAME: usize = 320;
const FFT_SIZE: usize = 512;
const NORM_CENTER: f64 = -10.0;
const NORM_SCALE: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AudioFeatureConfig {
    pub dim: usize,
    pub seed: u64,
}

impl Default for AudioFeatureConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            seed: 0x5eed_a0d1,
        }
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters over the `FFT_SIZE / 2 + 1` power bins.
fn mel_filters(sample_rate: f64) -> Vec<Vec<(usize, f64)>> {
    let bins = FFT_SIZE / 2 + 1;
    let top = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..BAND_COUNT + 2)
        .map(|i| mel_to_hz(top * i as f64 / (BAND_COUNT + 1) as f64) * FFT_SIZE as f64 / sample_rate)
        .collect();
    (0..BAND_COUNT)
        .map(|b| {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            let mut taps: Vec<(usize, f64)> = (0..bins)
                .filter_map(|k| {
                    let x = k as f64;
                    let w = if x <= lo || x >= hi {
                        0.0
                    } else if x <= mid {
                        (x - lo) / (mid - lo)
                    } else {
                        (hi - x) / (hi - mid)
                    };
                    (w > 0.0).then_some((k, w))
                })
                .collect();
            if taps.is_empty() {
                // narrow low bands can fall between bins
                taps.push((mid.round() as usize, 1.0));
            }
            taps
        })
        .collect()
}

/// Natural-log band energies per animation frame, `[L, 40]`: each frame
/// is the average of its 20 ms sub-frames.
pub fn band_energies(waveform: &Waveform, fps: f64) -> Result<Tensor<f64>, ConditioningError> {
    if waveform.is_empty() {
        return Err(ConditioningError::EmptyAudio);
    }
    let hop = waveform.hop(fps)?;
    let frames = waveform.frame_count(fps)?;
    let per_frame = (hop / SUBFRAME).max(1);
    let sub_hop = hop / per_frame;
    let filters = mel_filters(waveform.sample_rate() as f64);
    let window: Vec<f64> = (0..SUBFRAME)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / SUBFRAME as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_SIZE);
    let samples = waveform.samples();

    let mut out = Tensor::zeros(&[frames, BAND_COUNT]);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    for k in 0..frames {
        for s in 0..per_frame {
            let start = k * hop + s * sub_hop;
            for (n, b) in buf.iter_mut().enumerate() {
                let x = if n < SUBFRAME {
                    samples.get(start + n).copied().unwrap_or(0.0) * window[n]
                } else {
                    0.0
                };
                *b = Complex::new(x, 0.0);
            }
            fft.process(&mut buf);
            let row = out.row_mut(k);
            for (band, taps) in filters.iter().enumerate() {
                let e: f64 = taps.iter().map(|&(i, w)| w * buf[i].norm_sqr()).sum();
                row[band] += (e + LOG_FLOOR).ln() / per_frame as f64;
            }
        }
    }
    Ok(out)
}

/// Fixed seeded projection `[dim, 40]`, scaled by `1/sqrt(40)`.
fn projection(config: &AudioFeatureConfig) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Tensor::randn(&[config.dim, BAND_COUNT], 1.0 / (BAND_COUNT as f64).sqrt(), &mut rng)
}

/// Per-frame audio features `[L, dim]`: centred, scaled log band energies
/// through a fixed seeded projection.
pub fn audio_features(
    waveform: &Waveform,
    fps: f64,
    config: &AudioFeatureConfig,
) -> Result<Tensor<f64>, ConditioningError> {
    let bands = band_energies(waveform, fps)?.map(|x| (x - NORM_CENTER) / NORM_SCALE);
    Ok(bands
        .matmul(&projection(config).transpose())
        .expect("band count matches projection"))
}
