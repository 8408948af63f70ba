//! Synthetic single-speaker clips and dyad composition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{quality_filter, DatagenError, DyadSample, QualityThresholds, SampleSource, SingleClip};
use crate::conditioning::{SpeakerMask, Waveform, SAMPLE_RATE};
use crate::facemodel::{MotionFrame, MotionSequence, Vec3, EXPRESSION_DIM, IDENTITY_DIM, JOINT_COUNT, LIP_COUNT};

/// Knobs of the single-clip generator.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClipOptions {
    pub fps: f64,
    /// No speech at all: silent audio and a closed mouth.
    pub silent: bool,
    /// Components driven by the speech envelope.
    pub lip_indices: Vec<usize>,
}

impl Default for ClipOptions {
    fn default() -> Self {
        Self {
            fps: 25.0,
            silent: false,
            lip_indices: (0..LIP_COUNT).collect(),
        }
    }
}

/// Sum of a few random low-frequency sinusoids per channel, `[L][channels]`.
fn smooth_process<R: Rng>(rng: &mut R, l: usize, channels: usize, fps: f64, max_hz: f64, amp: f64) -> Vec<Vec<f64>> {
    const TERMS: usize = 3;
    let comps: Vec<Vec<(f64, f64, f64)>> = (0..channels)
        .map(|_| {
            (0..TERMS)
                .map(|_| {
                    let f = rng.random_range(0.05..max_hz);
                    let ph = rng.random_range(0.0..std::f64::consts::TAU);
                    let a = rng.sample::<f64, _>(StandardNormal) * amp / (TERMS as f64).sqrt();
                    (f, ph, a)
                })
                .collect()
        })
        .collect();
    (0..l)
        .map(|k| {
            let time = k as f64 / fps;
            comps
                .iter()
                .map(|terms| {
                    terms
                        .iter()
                        .map(|&(f, ph, a)| a * (std::f64::consts::TAU * f * time + ph).sin())
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// Speech activity envelope per frame in `[0, 1]`: phrase gating times a
/// syllable-rate modulation.
fn speech_envelope<R: Rng>(rng: &mut R, l: usize, fps: f64) -> Vec<f64> {
    let mut gate = vec![0.0; l];
    let mut k = 0;
    let mut on = rng.random_bool(0.7);
    while k < l {
        let len = (rng.random_range(0.3..1.5) * fps).round().max(2.0) as usize;
        let level = if on { 1.0 } else { 0.0 };
        for g in gate.iter_mut().skip(k).take(len) {
            *g = level;
        }
        k += len;
        on = !on;
    }
    let syl_hz = rng.random_range(3.0..5.5);
    let ph = rng.random_range(0.0..std::f64::consts::TAU);
    (0..l)
        .map(|k| {
            let prev = gate[k.saturating_sub(1)];
            let g = 0.5 * (prev + gate[k]);
            let s = 0.55 + 0.45 * (std::f64::consts::TAU * syl_hz * k as f64 / fps + ph).sin();
            g * s
        })
        .collect()
}

/// Harmonic carrier with a little noise, scaled per frame by `env`.
fn voice<R: Rng>(rng: &mut R, env: &[f64], hop: usize) -> Vec<f64> {
    let f0 = rng.random_range(110.0..220.0);
    let phases: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let mut out = Vec::with_capacity(env.len() * hop);
    for (k, &e) in env.iter().enumerate() {
        for i in 0..hop {
            let n = (k * hop + i) as f64 / SAMPLE_RATE as f64;
            let mut s = 0.0;
            for (h, ph) in phases.iter().enumerate() {
                let hh = (h + 1) as f64;
                s += (std::f64::consts::TAU * f0 * hh * n + ph).sin() / hh;
            }
            let noise: f64 = rng.random_range(-1.0..1.0);
            out.push(if e == 0.0 {
                0.0
            } else {
                0.3 * e * (0.5 * s + 0.1 * noise)
            });
        }
    }
    out
}

/// Deterministic synthetic talking-head clip with default options.
pub fn generate_single_clip(seed: u64, duration_s: f64) -> Result<SingleClip, DatagenError> {
    generate_clip_with(seed, duration_s, &ClipOptions::default())
}

pub fn generate_clip_with(seed: u64, duration_s: f64, options: &ClipOptions) -> Result<SingleClip, DatagenError> {
    if !(duration_s > 0.0) {
        return Err(DatagenError::Config(format!("duration {duration_s} must be positive")));
    }
    let fps = options.fps;
    let l = ((duration_s * fps).round() as usize).max(2);
    let hop = (SAMPLE_RATE as f64 / fps).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let env = if options.silent {
        vec![0.0; l]
    } else {
        speech_envelope(&mut rng, l, fps)
    };
    let samples = voice(&mut rng, &env, hop);

    let identity: Vec<f64> = (0..IDENTITY_DIM)
        .map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let lip_dirs: Vec<f64> = (0..options.lip_indices.len())
        .map(|_| {
            let m: f64 = rng.random_range(0.5..1.2);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let lip_noise = smooth_process(&mut rng, l, options.lip_indices.len(), fps, 3.0, 0.02);
    let expr = smooth_process(&mut rng, l, EXPRESSION_DIM, fps, 1.5, 0.5);
    let head_amp = rng.random_range(0.02..0.3);
    let amps = [0.05, head_amp, 0.1, 0.1];
    let rot: Vec<Vec<Vec<f64>>> = amps
        .iter()
        .map(|&a| smooth_process(&mut rng, l, 3, fps, 1.0, a))
        .collect();
    let eye_shared = smooth_process(&mut rng, l, 3, fps, 1.0, 0.1);
    let drift = smooth_process(&mut rng, l, 3, fps, 0.5, 0.01);

    let mut frames = Vec::with_capacity(l);
    for k in 0..l {
        let mut f = MotionFrame::zeros();
        let mut is_lip = [false; EXPRESSION_DIM];
        for (j, &idx) in options.lip_indices.iter().enumerate() {
            is_lip[idx] = true;
            let noise = lip_noise[k][j].clamp(-0.02, 0.02);
            f.expression[idx] = env[k] * lip_dirs[j] + noise;
        }
        for c in 0..EXPRESSION_DIM {
            if !is_lip[c] {
                f.expression[c] = expr[k][c];
            }
        }
        for j in 0..JOINT_COUNT {
            for a in 0..3 {
                // eyes mostly move together
                let shared = if j >= 2 { eye_shared[k][a] } else { 0.0 };
                f.rotation[j][a] = rot[j][k][a] * if j >= 2 { 0.3 } else { 1.0 } + shared;
            }
        }
        f.translation = [drift[k][0], drift[k][1], drift[k][2]];
        frames.push(f);
    }
    let motion = MotionSequence::new(frames, fps, identity.clone())?;
    let landmark_confidence = (0..l).map(|_| rng.random_range(0.85..1.0)).collect();
    let face_bbox_size = (0..l).map(|_| rng.random_range(160.0..240.0)).collect();
    Ok(SingleClip {
        motion,
        waveform: Waveform::new(samples, SAMPLE_RATE)?,
        identity,
        landmark_confidence,
        face_bbox_size,
    })
}

/// Which participant holds the floor on each frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TurnSchedule {
    /// `true` where participant A speaks, `false` where B does.
    pub a_speaks: Vec<bool>,
}

impl TurnSchedule {
    /// Turns of `turn_len` frames, starting with A.
    pub fn alternating(l: usize, turn_len: usize) -> Self {
        let t = turn_len.max(1);
        Self {
            a_speaks: (0..l).map(|k| (k / t).is_multiple_of(2)).collect(),
        }
    }

    /// Random turn lengths in `[min_len, max_len]` frames.
    pub fn random<R: Rng>(rng: &mut R, l: usize, min_len: usize, max_len: usize) -> Self {
        let mut a_speaks = Vec::with_capacity(l);
        let mut cur = rng.random_bool(0.5);
        while a_speaks.len() < l {
            let len = rng.random_range(min_len.max(1)..=max_len.max(min_len.max(1)));
            a_speaks.extend(std::iter::repeat_n(cur, len.min(l - a_speaks.len())));
            cur = !cur;
        }
        Self { a_speaks }
    }

    pub fn len(&self) -> usize {
        self.a_speaks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a_speaks.is_empty()
    }

    /// Frames sorted by distance to the nearest turn change, then index.
    fn boundary_order(&self) -> Vec<usize> {
        let l = self.len();
        let changes: Vec<usize> = (1..l).filter(|&k| self.a_speaks[k] != self.a_speaks[k - 1]).collect();
        let dist = |k: usize| -> usize {
            changes
                .iter()
                .map(|&c| if k >= c { k - c } else { c - 1 - k })
                .min()
                .unwrap_or(usize::MAX)
        };
        let mut idx: Vec<usize> = (0..l).collect();
        idx.sort_by_key(|&k| (dist(k), k));
        idx
    }
}

/// Frame-level muting of both tracks: returns `(unmuted_a, unmuted_b)`.
pub fn unmuted_frames(schedule: &TurnSchedule, overlap_fraction: f64) -> (Vec<bool>, Vec<bool>) {
    let l = schedule.len();
    let mut a = schedule.a_speaks.clone();
    let mut b: Vec<bool> = schedule.a_speaks.iter().map(|s| !s).collect();
    let n = (overlap_fraction.clamp(0.0, 1.0) * l as f64).round() as usize;
    for &k in schedule.boundary_order().iter().take(n) {
        a[k] = true;
        b[k] = true;
    }
    (a, b)
}

fn mute_track(w: &Waveform, unmuted: &[bool], hop: usize) -> Vec<f64> {
    w.samples()
        .iter()
        .enumerate()
        .map(|(n, &s)| if unmuted[n / hop] { s } else { 0.0 })
        .collect()
}

fn close_mouth(motion: &mut MotionSequence<f64>, unmuted: &[bool], lips: &[usize]) {
    for (f, &on) in motion.frames_mut().iter_mut().zip(unmuted) {
        if !on {
            for &i in lips {
                f.expression[i] = 0.0;
            }
        }
    }
}

/// Face-to-face prior: A at `z = -0.5`, B at `z = +0.5`.
pub const FACE_TO_FACE: (Vec3<f64>, Vec3<f64>) = ([0.0, 0.0, -0.5], [0.0, 0.0, 0.5]);

/// Composes two single-speaker clips into a pseudo-conversation by muting
/// each speaker outside their turns. Masks are exact. Lip components of a
/// muted speaker are closed so motion and audio agree.
pub fn dub_compose(
    clip_1: &SingleClip,
    clip_2: &SingleClip,
    schedule: &TurnSchedule,
    overlap_fraction: f64,
) -> Result<DyadSample, DatagenError> {
    dub_compose_with(
        clip_1,
        clip_2,
        schedule,
        overlap_fraction,
        &(0..LIP_COUNT).collect::<Vec<_>>(),
    )
}

pub fn dub_compose_with(
    clip_1: &SingleClip,
    clip_2: &SingleClip,
    schedule: &TurnSchedule,
    overlap_fraction: f64,
    lip_indices: &[usize],
) -> Result<DyadSample, DatagenError> {
    let l = schedule.len();
    if l < 2 {
        return Err(DatagenError::Config("schedule needs at least 2 frames".into()));
    }
    for (name, c) in [("clip 1", clip_1), ("clip 2", clip_2)] {
        if c.motion.len() < l {
            return Err(DatagenError::Schedule(format!(
                "{name} has {} frames, schedule needs {l}",
                c.motion.len()
            )));
        }
    }
    let fps = clip_1.motion.fps();
    let hop = clip_1.waveform.hop(fps)?;
    let (ua, ub) = unmuted_frames(schedule, overlap_fraction);
    let truncate = |c: &SingleClip| -> Result<(MotionSequence<f64>, Waveform), DatagenError> {
        let frames = c.motion.frames()[..l].to_vec();
        let mut samples = c.waveform.samples().to_vec();
        samples.resize(l * hop, 0.0);
        Ok((
            MotionSequence::new(frames, fps, c.identity.clone())?,
            Waveform::new(samples, SAMPLE_RATE)?,
        ))
    };
    let (mut motion_a, wa) = truncate(clip_1)?;
    let (mut motion_b, wb) = truncate(clip_2)?;
    let track_a = Waveform::new(mute_track(&wa, &ua, hop), SAMPLE_RATE)?;
    let track_b = Waveform::new(mute_track(&wb, &ub, hop), SAMPLE_RATE)?;
    close_mouth(&mut motion_a, &ua, lip_indices);
    close_mouth(&mut motion_b, &ub, lip_indices);
    let mixed: Vec<f64> = track_a
        .samples()
        .iter()
        .zip(track_b.samples())
        .map(|(a, b)| a + b)
        .collect();
    let to_mask = |u: &[bool]| SpeakerMask::new(u.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect());
    let mut sample = DyadSample {
        motion_a,
        motion_b,
        mixed: Waveform::new(mixed, SAMPLE_RATE)?,
        track_a,
        track_b,
        mask_a: to_mask(&ua)?,
        mask_b: to_mask(&ub)?,
        t0_a: [0.0; 3],
        t0_b: [0.0; 3],
        gaze_subset: false,
        source: SampleSource::SyntheticDub,
    };
    sample.place(FACE_TO_FACE.0, FACE_TO_FACE.1);
    Ok(sample)
}

/// Options for [`generate_dyad`].
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DyadOptions {
    pub duration_s: f64,
    pub overlap_fraction: f64,
    /// Half-width of the uniform noise added to conversation masks.
    pub mask_jitter: f64,
    pub t0_a: Vec3<f64>,
    pub t0_b: Vec3<f64>,
    pub clip: ClipOptions,
    /// Source clips failing these are rejected.
    #[serde(default)]
    pub quality: QualityThresholds,
}

impl Default for DyadOptions {
    fn default() -> Self {
        Self {
            duration_s: 2.0,
            overlap_fraction: 0.1,
            mask_jitter: 0.15,
            t0_a: FACE_TO_FACE.0,
            t0_b: FACE_TO_FACE.1,
            clip: ClipOptions::default(),
            quality: QualityThresholds::default(),
        }
    }
}

fn checked(clip: SingleClip, q: &QualityThresholds) -> Result<SingleClip, DatagenError> {
    let l = clip.motion.len();
    if quality_filter(&clip, q.min_bbox, q.min_conf, q.max_bad_frames(l)) {
        Ok(clip)
    } else {
        Err(DatagenError::Rejected("source clip failed the quality filter".into()))
    }
}

/// One synthetic dyad of the requested source kind, deterministic in `seed`.
pub fn generate_dyad(seed: u64, source: SampleSource, options: &DyadOptions) -> Result<DyadSample, DatagenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s1: u64 = rng.random();
    let s2: u64 = rng.random();
    let q = &options.quality;
    let clip_1 = checked(generate_clip_with(s1, options.duration_s, &options.clip)?, q)?;
    let l = clip_1.motion.len();
    let lips = &options.clip.lip_indices;
    match source {
        SampleSource::SyntheticDub => {
            let clip_2 = checked(generate_clip_with(s2, options.duration_s, &options.clip)?, q)?;
            let sched = TurnSchedule::random(&mut rng, l, l / 4 + 1, l / 2 + 1);
            let mut s = dub_compose_with(&clip_1, &clip_2, &sched, options.overlap_fraction, lips)?;
            s.place(options.t0_a, options.t0_b);
            Ok(s)
        }
        SampleSource::SingleSpeaker => {
            let silent = ClipOptions {
                silent: true,
                ..options.clip.clone()
            };
            let clip_2 = generate_clip_with(s2, options.duration_s, &silent)?;
            let sched = TurnSchedule {
                a_speaks: vec![true; l],
            };
            let mut s = dub_compose_with(&clip_1, &clip_2, &sched, 0.0, lips)?;
            s.source = SampleSource::SingleSpeaker;
            s.place(options.t0_a, options.t0_b);
            Ok(s)
        }
        SampleSource::Conversation => {
            let clip_2 = checked(generate_clip_with(s2, options.duration_s, &options.clip)?, q)?;
            let sched = TurnSchedule::random(&mut rng, l, l / 4 + 1, l / 2 + 1);
            let mut s = dub_compose_with(&clip_1, &clip_2, &sched, options.overlap_fraction, lips)?;
            s.source = SampleSource::Conversation;
            s.place(options.t0_a, options.t0_b);
            lean_toward_partner(&mut s, &mut rng);
            let j = options.mask_jitter;
            let jitter = |m: &SpeakerMask, rng: &mut ChaCha8Rng| {
                SpeakerMask::new(
                    m.values()
                        .iter()
                        .map(|&v| (v + rng.random_range(-j..=j)).clamp(0.0, 1.0))
                        .collect(),
                )
            };
            s.mask_a = jitter(&s.mask_a, &mut rng)?;
            s.mask_b = jitter(&s.mask_b, &mut rng)?;
            Ok(s)
        }
    }
}

/// Listeners drift a few centimetres toward their partner and turn their
/// head slightly toward the partner's side.
fn lean_toward_partner<R: Rng>(s: &mut DyadSample, rng: &mut R) {
    let pairs = [(s.t0_a, s.t0_b, s.mask_a.clone()), (s.t0_b, s.t0_a, s.mask_b.clone())];
    for (p, (me, other, mask)) in pairs.into_iter().enumerate() {
        let d = [other[0] - me[0], other[1] - me[1], other[2] - me[2]];
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-9);
        let lean = rng.random_range(0.0..0.04);
        let yaw = 0.5 * (d[0] / d[2].abs().max(0.05)).atan();
        let motion = if p == 0 { &mut s.motion_a } else { &mut s.motion_b };
        let mut level = 0.0;
        for (f, &m) in motion.frames_mut().iter_mut().zip(mask.values()) {
            let target = if m < 0.5 { 1.0 } else { 0.0 };
            level += 0.2 * (target - level);
            for k in 0..3 {
                f.translation[k] += lean * level * d[k] / n;
            }
            f.rotation[1][1] += yaw;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(y) {
            sxy += (a - mx) * (b - my);
            sxx += (a - mx).powi(2);
            syy += (b - my).powi(2);
        }
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn same_seed_same_clip() {
        let o = ClipOptions::default();
        assert_eq!(
            generate_clip_with(5, 1.0, &o).unwrap(),
            generate_clip_with(5, 1.0, &o).unwrap()
        );
        assert_ne!(
            generate_clip_with(5, 1.0, &o).unwrap(),
            generate_clip_with(6, 1.0, &o).unwrap()
        );
    }

    #[test]
    fn silent_clips_keep_lips_closed() {
        let o = ClipOptions {
            silent: true,
            ..Default::default()
        };
        for seed in 0..10 {
            let c = generate_clip_with(seed, 2.0, &o).unwrap();
            assert!(c.waveform.samples().iter().all(|&s| s == 0.0));
            for f in c.motion.frames() {
                for &i in &o.lip_indices {
                    assert!(f.expression[i].abs() < 0.05);
                }
            }
        }
    }

    #[test]
    fn envelope_tracks_lip_magnitude() {
        let o = ClipOptions::default();
        for seed in 0..100 {
            let c = generate_clip_with(seed, 4.0, &o).unwrap();
            let hop = 640;
            let rms: Vec<f64> = c
                .waveform
                .samples()
                .chunks(hop)
                .map(|f| (f.iter().map(|x| x * x).sum::<f64>() / f.len() as f64).sqrt())
                .collect();
            let lip: Vec<f64> = c
                .motion
                .frames()
                .iter()
                .map(|f| {
                    o.lip_indices
                        .iter()
                        .map(|&i| f.expression[i].powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            let r = pearson(&rms, &lip);
            assert!(r >= 0.6, "seed {seed}: r = {r}");
        }
    }

    #[test]
    fn strict_alternation_never_overlaps() {
        let o = ClipOptions::default();
        let (c1, c2) = (
            generate_clip_with(1, 2.0, &o).unwrap(),
            generate_clip_with(2, 2.0, &o).unwrap(),
        );
        let s = dub_compose(&c1, &c2, &TurnSchedule::alternating(50, 7), 0.0).unwrap();
        for (a, b) in s.mask_a.values().iter().zip(s.mask_b.values()) {
            assert_eq!(a * b, 0.0);
        }
        // muted region of A is exactly silent
        for (k, &m) in s.mask_a.values().iter().enumerate() {
            if m == 0.0 {
                assert!(s.track_a.samples()[k * 640..(k + 1) * 640].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn full_overlap_keeps_both_tracks() {
        let o = ClipOptions::default();
        let (c1, c2) = (
            generate_clip_with(1, 2.0, &o).unwrap(),
            generate_clip_with(2, 2.0, &o).unwrap(),
        );
        let s = dub_compose(&c1, &c2, &TurnSchedule::alternating(50, 7), 1.0).unwrap();
        assert!(s.mask_a.values().iter().chain(s.mask_b.values()).all(|&m| m == 1.0));
        for (n, &m) in s.mixed.samples().iter().enumerate() {
            assert_eq!(m, c1.waveform.samples()[n] + c2.waveform.samples()[n]);
        }
    }

    #[test]
    fn schedule_longer_than_clip_is_rejected() {
        let o = ClipOptions::default();
        let (c1, c2) = (
            generate_clip_with(1, 1.0, &o).unwrap(),
            generate_clip_with(2, 1.0, &o).unwrap(),
        );
        assert!(matches!(
            dub_compose(&c1, &c2, &TurnSchedule::alternating(60, 5), 0.0),
            Err(DatagenError::Schedule(_))
        ));
    }

    #[test]
    fn overlap_frames_sit_at_turn_boundaries() {
        let sched = TurnSchedule::alternating(20, 5);
        let (a, b) = unmuted_frames(&sched, 0.2);
        let both: Vec<usize> = (0..20).filter(|&k| a[k] && b[k]).collect();
        assert_eq!(both, vec![4, 5, 9, 10]);
    }

    #[test]
    fn sources_are_tagged() {
        let o = DyadOptions {
            duration_s: 1.0,
            ..Default::default()
        };
        for src in [
            SampleSource::Conversation,
            SampleSource::SyntheticDub,
            SampleSource::SingleSpeaker,
        ] {
            let s = generate_dyad(3, src, &o).unwrap();
            assert_eq!(s.source, src);
            assert_eq!(s.t0_a, o.t0_a);
            s.validate().unwrap();
        }
    }
}
