//! Synthetic dyadic data: single-speaker clips, dubbing composition,
//! curation filters and the on-disk dataset format.

mod io;
mod synth;

pub use io::{
    build_dataset, load_dataset, load_sample, read_sample, read_wav, save_sample, write_sample, write_wav,
    DatasetManifest, DatasetOptions, SampleRecord, SourceMix, Split, MANIFEST_FILE, SAMPLE_MAGIC, SAMPLE_VERSION,
};
pub use synth::{
    dub_compose, dub_compose_with, generate_clip_with, generate_dyad, generate_single_clip, unmuted_frames,
    ClipOptions, DyadOptions, TurnSchedule, FACE_TO_FACE,
};

use crate::conditioning::{ConditioningError, SpeakerMask, Waveform};
use crate::facemodel::{FaceModelError, Joint, MotionSequence, Vec3};

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("turn schedule: {0}")]
    Schedule(String),
    #[error("inconsistent sample: {0}")]
    Sample(String),
    #[error("gaze subset needs at least 5 samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample rejected: {0}")]
    Rejected(String),
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Face(#[from] FaceModelError),
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

/// A synthetic single-person recording.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleClip {
    pub motion: MotionSequence<f64>,
    pub waveform: Waveform,
    pub identity: Vec<f64>,
    pub landmark_confidence: Vec<f64>,
    /// Face bounding-box edge in pixels.
    pub face_bbox_size: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    Conversation,
    SyntheticDub,
    SingleSpeaker,
}

impl SampleSource {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Conversation => "conversation",
            Self::SyntheticDub => "synthetic_dub",
            Self::SingleSpeaker => "single_speaker",
        }
    }

    fn code(self) -> u8 {
        match self {
            Self::Conversation => 0,
            Self::SyntheticDub => 1,
            Self::SingleSpeaker => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [Self::Conversation, Self::SyntheticDub, Self::SingleSpeaker]
            .into_iter()
            .find(|s| s.code() == c)
    }
}

impl std::str::FromStr for SampleSource {
    type Err = DatagenError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conversation" => Ok(Self::Conversation),
            "synthetic_dub" => Ok(Self::SyntheticDub),
            "single_speaker" => Ok(Self::SingleSpeaker),
            other => Err(DatagenError::Config(format!("unknown source `{other}`"))),
        }
    }
}

/// One training example: both participants, their audio and masks.
#[derive(Clone, Debug, PartialEq)]
pub struct DyadSample {
    pub motion_a: MotionSequence<f64>,
    pub motion_b: MotionSequence<f64>,
    pub mixed: Waveform,
    pub track_a: Waveform,
    pub track_b: Waveform,
    pub mask_a: SpeakerMask,
    pub mask_b: SpeakerMask,
    pub t0_a: Vec3<f64>,
    pub t0_b: Vec3<f64>,
    pub gaze_subset: bool,
    pub source: SampleSource,
}

impl DyadSample {
    pub fn len(&self) -> usize {
        self.motion_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.motion_a.is_empty()
    }

    pub fn fps(&self) -> f64 {
        self.motion_a.fps()
    }

    /// Moves both tracks rigidly so their first frames sit at `t0_a`, `t0_b`.
    pub fn place(&mut self, t0_a: Vec3<f64>, t0_b: Vec3<f64>) {
        for (m, t0) in [(&mut self.motion_a, t0_a), (&mut self.motion_b, t0_b)] {
            let first = m.frames()[0].translation;
            for f in m.frames_mut() {
                for k in 0..3 {
                    f.translation[k] = t0[k] + (f.translation[k] - first[k]);
                }
            }
        }
        self.t0_a = t0_a;
        self.t0_b = t0_b;
    }

    /// Participant-swapped copy.
    pub fn swapped(&self) -> Self {
        Self {
            motion_a: self.motion_b.clone(),
            motion_b: self.motion_a.clone(),
            mixed: self.mixed.clone(),
            track_a: self.track_b.clone(),
            track_b: self.track_a.clone(),
            mask_a: self.mask_b.clone(),
            mask_b: self.mask_a.clone(),
            t0_a: self.t0_b,
            t0_b: self.t0_a,
            gaze_subset: self.gaze_subset,
            source: self.source,
        }
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let l = self.motion_a.len();
        let bad = |m: String| Err(DatagenError::Sample(m));
        if self.motion_b.len() != l || self.mask_a.len() != l || self.mask_b.len() != l {
            return bad(format!(
                "frame counts differ: motion {l}/{}, masks {}/{}",
                self.motion_b.len(),
                self.mask_a.len(),
                self.mask_b.len()
            ));
        }
        let n = self.mixed.len();
        if self.track_a.len() != n || self.track_b.len() != n {
            return bad("track lengths differ from the mix".into());
        }
        let frames = self.mixed.frame_count(self.fps())?;
        if frames.abs_diff(l) > 1 {
            return bad(format!("audio covers {frames} frames, motion {l}"));
        }
        Ok(())
    }
}

/// Rejects split-screen frames: the two halves have very different colour
/// histograms and a hard vertical edge runs down the middle.
pub fn scenario_filter(image: &RgbImage) -> bool {
    !(histogram_distance(image) > SCENARIO_CHI2_THRESHOLD && has_center_seam(image))
}

pub const SCENARIO_CHI2_THRESHOLD: f64 = 0.5;
const SEAM_MIN_CONTRAST: f64 = 30.0;
const SEAM_RATIO: f64 = 3.0;

/// Row-major 8-bit RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<[u8; 3]>) -> Result<Self, DatagenError> {
        if width == 0 || height == 0 || !width.is_multiple_of(2) || data.len() != width * height {
            return Err(DatagenError::Config(format!(
                "image {width}x{height} with {} pixels (width must be even)",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, px: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![px; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> [u8; 3] {
        self.data[y * self.width + x]
    }
}

fn histogram(image: &RgbImage, cols: std::ops::Range<usize>) -> Vec<f64> {
    let mut h = vec![0.0; 512];
    let mut n = 0.0;
    for y in 0..image.height {
        for x in cols.clone() {
            let [r, g, b] = image.at(x, y);
            h[((r as usize >> 5) << 6) | ((g as usize >> 5) << 3) | (b as usize >> 5)] += 1.0;
            n += 1.0;
        }
    }
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// `0.5 Σ (p - q)² / (p + q)` between the normalized 8×8×8 histograms of
/// the left and right halves; in `[0, 1]`.
pub fn histogram_distance(image: &RgbImage) -> f64 {
    let half = image.width / 2;
    let p = histogram(image, 0..half);
    let q = histogram(image, half..image.width);
    0.5 * p
        .iter()
        .zip(&q)
        .filter(|(a, b)| **a + **b > 0.0)
        .map(|(a, b)| (a - b).powi(2) / (a + b))
        .sum::<f64>()
}

fn column_step(image: &RgbImage, x: usize) -> f64 {
    let mut s = 0.0;
    for y in 0..image.height {
        let (a, b) = (image.at(x, y), image.at(x + 1, y));
        s += (0..3).map(|c| (a[c] as f64 - b[c] as f64).abs()).sum::<f64>() / 3.0;
    }
    s / image.height as f64
}

/// Mean step across the centre column pair is large in absolute terms and
/// relative to the typical step elsewhere.
pub fn has_center_seam(image: &RgbImage) -> bool {
    let mid = image.width / 2 - 1;
    let centre = column_step(image, mid);
    let others: Vec<f64> = (0..image.width - 1)
        .filter(|&x| x != mid)
        .map(|x| column_step(image, x))
        .collect();
    let typical = if others.is_empty() {
        0.0
    } else {
        others.iter().sum::<f64>() / others.len() as f64
    };
    centre > SEAM_MIN_CONTRAST && centre > SEAM_RATIO * typical
}

/// Thresholds of [`quality_filter`].
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QualityThresholds {
    pub min_bbox: f64,
    pub min_conf: f64,
    /// Allowed bad frames as a fraction of the clip length.
    pub max_bad_fraction: f64,
}

impl Default for QualityThresholds {
    fn default() -> Self {
        Self {
            min_bbox: 64.0,
            min_conf: 0.5,
            max_bad_fraction: 0.05,
        }
    }
}

impl QualityThresholds {
    pub fn max_bad_frames(&self, l: usize) -> usize {
        (self.max_bad_fraction * l as f64).floor() as usize
    }
}

/// Accepts unless more than `max_bad_frames` frames have a small box or
/// low landmark confidence.
pub fn quality_filter(clip: &SingleClip, min_bbox: f64, min_conf: f64, max_bad_frames: usize) -> bool {
    let bad = clip
        .face_bbox_size
        .iter()
        .zip(&clip.landmark_confidence)
        .filter(|(b, c)| **b < min_bbox || **c < min_conf)
        .count();
    bad <= max_bad_frames
}

/// Mean squared deviation of the head axis-angle from its sequence mean.
pub fn head_rotation_variance(motion: &MotionSequence<f64>) -> f64 {
    let j = Joint::Head as usize;
    let n = motion.len() as f64;
    let mut mean = [0.0; 3];
    for f in motion.frames() {
        for k in 0..3 {
            mean[k] += f.rotation[j][k] / n;
        }
    }
    motion
        .frames()
        .iter()
        .map(|f| (0..3).map(|k| (f.rotation[j][k] - mean[k]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n
}

/// Flags exactly `ceil(0.2 N)` records with the largest head-rotation
/// variance; ties go to the earlier record.
pub fn select_gaze_subset(
    manifest: &DatasetManifest,
    motions: &[MotionSequence<f64>],
) -> Result<DatasetManifest, DatagenError> {
    let n = manifest.records.len();
    if n < 5 {
        return Err(DatagenError::TooFewSamples(n));
    }
    if motions.len() != n {
        return Err(DatagenError::Config(format!(
            "{n} records but {} motions",
            motions.len()
        )));
    }
    let var: Vec<f64> = motions.iter().map(head_rotation_variance).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal variances keep manifest order
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]));
    let k = (n as f64 * 0.2).ceil() as usize;
    let mut out = manifest.clone();
    for r in out.records.iter_mut() {
        r.gaze_subset = false;
    }
    for &i in order.iter().take(k) {
        out.records[i].gaze_subset = true;
    }
    Ok(out)
}
