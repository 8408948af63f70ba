//! Dataset files: `DYDS` samples, the JSONL manifest and WAV audio.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{generate_dyad, select_gaze_subset, DatagenError, DyadOptions, DyadSample, SampleSource};
use crate::conditioning::{SpeakerMask, Waveform, SAMPLE_RATE};
use crate::facemodel::MotionSequence;

pub const SAMPLE_MAGIC: &[u8; 4] = b"DYDS";
pub const SAMPLE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SampleRecord {
    /// Relative to the manifest's directory.
    pub path: String,
    pub source: SampleSource,
    pub duration: f64,
    pub gaze_subset: bool,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.path) {
                return Err(DatagenError::Format(format!("duplicate path {}", r.path)));
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<(), DatagenError> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, DatagenError> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        let m = Self { records };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatagenError> {
        self.validate()?;
        let mut w = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatagenError> {
        Self::read_jsonl(BufReader::new(File::open(path)?))
    }

    pub fn filter(&self, split: Split, source: Option<SampleSource>) -> Vec<&SampleRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split && source.is_none_or(|s| r.source == s))
            .collect()
    }
}

fn put_f64s<W: Write>(w: &mut W, v: &[f64]) -> std::io::Result<()> {
    w.write_all(&(v.len() as u64).to_le_bytes())?;
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s<R: Read>(r: &mut R) -> Result<Vec<f64>, DatagenError> {
    let n = get_u64(r)? as usize;
    if n > 1 << 32 {
        return Err(DatagenError::Format(format!("implausible array length {n}")));
    }
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

/// `DYDS` layout: magic, version, source and flag bytes, both motion
/// files, the three waveforms and two masks as length-prefixed f64 arrays,
/// then the two first-frame translations.
pub fn write_sample<W: Write>(w: &mut W, s: &DyadSample) -> Result<(), DatagenError> {
    w.write_all(SAMPLE_MAGIC)?;
    w.write_all(&SAMPLE_VERSION.to_le_bytes())?;
    w.write_all(&[s.source.code(), s.gaze_subset as u8])?;
    s.motion_a.write_to(w)?;
    s.motion_b.write_to(w)?;
    for a in [&s.mixed, &s.track_a, &s.track_b] {
        put_f64s(w, a.samples())?;
    }
    put_f64s(w, s.mask_a.values())?;
    put_f64s(w, s.mask_b.values())?;
    for x in s.t0_a.iter().chain(&s.t0_b) {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_sample<R: Read>(r: &mut R) -> Result<DyadSample, DatagenError> {
    let mut head = [0u8; 10];
    r.read_exact(&mut head)?;
    if &head[..4] != SAMPLE_MAGIC {
        return Err(DatagenError::Format(format!("bad magic {:?}", &head[..4])));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != SAMPLE_VERSION {
        return Err(DatagenError::Format(format!("unsupported version {version}")));
    }
    let source = SampleSource::from_code(head[8])
        .ok_or_else(|| DatagenError::Format(format!("unknown source code {}", head[8])))?;
    let gaze_subset = match head[9] {
        0 => false,
        1 => true,
        c => return Err(DatagenError::Format(format!("bad flag byte {c}"))),
    };
    let motion_a = MotionSequence::read_from(r)?;
    let motion_b = MotionSequence::read_from(r)?;
    let mixed = Waveform::new(get_f64s(r)?, SAMPLE_RATE)?;
    let track_a = Waveform::new(get_f64s(r)?, SAMPLE_RATE)?;
    let track_b = Waveform::new(get_f64s(r)?, SAMPLE_RATE)?;
    let mask_a = SpeakerMask::new(get_f64s(r)?)?;
    let mask_b = SpeakerMask::new(get_f64s(r)?)?;
    let mut t = [0.0; 6];
    let mut b = [0u8; 8];
    for x in t.iter_mut() {
        r.read_exact(&mut b)?;
        *x = f64::from_le_bytes(b);
    }
    let s = DyadSample {
        motion_a,
        motion_b,
        mixed,
        track_a,
        track_b,
        mask_a,
        mask_b,
        t0_a: [t[0], t[1], t[2]],
        t0_b: [t[3], t[4], t[5]],
        gaze_subset,
        source,
    };
    s.validate()?;
    Ok(s)
}

pub fn save_sample(path: &Path, s: &DyadSample) -> Result<(), DatagenError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_sample(&mut w, s)?;
    w.flush()?;
    Ok(())
}

pub fn load_sample(path: &Path) -> Result<DyadSample, DatagenError> {
    read_sample(&mut BufReader::new(File::open(path)?))
}

/// 16-bit PCM mono at 16 kHz; samples are clipped to `[-1, 1]`.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<(), DatagenError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut out = hound::WavWriter::create(path, spec)?;
    for &s in w.samples() {
        out.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16)?;
    }
    out.finalize()?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Waveform, DatagenError> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.channels != 1 || spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(DatagenError::Format(format!(
            "expected 16-bit PCM mono, got {} channel(s) {:?} {}-bit",
            spec.channels, spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = r
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / i16::MAX as f64))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Waveform::new(samples, spec.sample_rate)?)
}

/// Relative weights of the three sources.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SourceMix {
    pub conversation: f64,
    pub synthetic_dub: f64,
    pub single_speaker: f64,
}

impl Default for SourceMix {
    fn default() -> Self {
        Self {
            conversation: 0.5,
            synthetic_dub: 0.4,
            single_speaker: 0.1,
        }
    }
}

impl SourceMix {
    pub fn only(source: SampleSource) -> Self {
        let mut m = Self {
            conversation: 0.0,
            synthetic_dub: 0.0,
            single_speaker: 0.0,
        };
        match source {
            SampleSource::Conversation => m.conversation = 1.0,
            SampleSource::SyntheticDub => m.synthetic_dub = 1.0,
            SampleSource::SingleSpeaker => m.single_speaker = 1.0,
        }
        m
    }

    fn pick(&self, u: f64) -> Result<SampleSource, DatagenError> {
        let w = [self.conversation, self.synthetic_dub, self.single_speaker];
        let total: f64 = w.iter().sum();
        if !(total > 0.0) || w.iter().any(|x| *x < 0.0) {
            return Err(DatagenError::Config(format!("invalid source mix {w:?}")));
        }
        let mut acc = 0.0;
        for (wi, s) in w.iter().zip([
            SampleSource::Conversation,
            SampleSource::SyntheticDub,
            SampleSource::SingleSpeaker,
        ]) {
            acc += wi / total;
            if u < acc && *wi > 0.0 {
                return Ok(s);
            }
        }
        Ok(if self.single_speaker > 0.0 {
            SampleSource::SingleSpeaker
        } else if self.synthetic_dub > 0.0 {
            SampleSource::SyntheticDub
        } else {
            SampleSource::Conversation
        })
    }
}

/// Options of [`build_dataset`].
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetOptions {
    pub dyad: DyadOptions,
    pub mix: SourceMix,
    /// Every `test_every`-th sample goes to the test split; 0 disables it.
    pub test_every: usize,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            dyad: DyadOptions::default(),
            mix: SourceMix::default(),
            test_every: 10,
        }
    }
}

const MAX_DRAWS: usize = 16;

/// Generates `n` samples in parallel, redrawing rejected ones, flags the gaze subset (when there
/// are at least five), and writes the sample files and manifest into `dir`.
pub fn build_dataset(
    dir: &Path,
    n: usize,
    seed: u64,
    options: &DatasetOptions,
) -> Result<(DatasetManifest, Vec<DyadSample>), DatagenError> {
    std::fs::create_dir_all(dir)?;
    let mut samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let source = options.mix.pick(rng.random::<f64>())?;
            let mut last = None;
            for _ in 0..MAX_DRAWS {
                match generate_dyad(rng.random(), source, &options.dyad) {
                    Err(DatagenError::Rejected(m)) => last = Some(m),
                    other => return other,
                }
            }
            Err(DatagenError::Rejected(format!(
                "sample {i}: {MAX_DRAWS} draws rejected, last: {}",
                last.unwrap_or_default()
            )))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut manifest = DatasetManifest {
        records: samples
            .iter()
            .enumerate()
            .map(|(i, s)| SampleRecord {
                path: format!("sample_{i:05}.dyds"),
                source: s.source,
                duration: s.len() as f64 / s.fps(),
                gaze_subset: false,
                split: if options.test_every > 0 && i % options.test_every == options.test_every - 1 {
                    Split::Test
                } else {
                    Split::Train
                },
            })
            .collect(),
    };
    if n >= 5 {
        let motions: Vec<_> = samples.iter().map(|s| s.motion_a.clone()).collect();
        manifest = select_gaze_subset(&manifest, &motions)?;
    }
    for (s, r) in samples.iter_mut().zip(&manifest.records) {
        s.gaze_subset = r.gaze_subset;
        save_sample(&dir.join(&r.path), s)?;
    }
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok((manifest, samples))
}

/// Loads every sample listed in a dataset directory's manifest.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<DyadSample>), DatagenError> {
    let manifest = DatasetManifest::load(&dir.join(MANIFEST_FILE))?;
    let samples = manifest
        .records
        .iter()
        .map(|r| load_sample(&dir.join(&r.path)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DyadOptions {
        DyadOptions {
            duration_s: 0.8,
            ..Default::default()
        }
    }

    #[test]
    fn sample_round_trip_is_bit_exact() {
        for (i, src) in [
            SampleSource::Conversation,
            SampleSource::SyntheticDub,
            SampleSource::SingleSpeaker,
        ]
        .into_iter()
        .enumerate()
        {
            let mut s = generate_dyad(i as u64, src, &small()).unwrap();
            s.gaze_subset = i == 1;
            let mut buf = Vec::new();
            write_sample(&mut buf, &s).unwrap();
            let back = read_sample(&mut buf.as_slice()).unwrap();
            assert_eq!(back, s);
            let mut again = Vec::new();
            write_sample(&mut again, &back).unwrap();
            assert_eq!(again, buf);
        }
    }

    #[test]
    fn corrupt_sample_is_rejected() {
        let s = generate_dyad(0, SampleSource::SyntheticDub, &small()).unwrap();
        let mut buf = Vec::new();
        write_sample(&mut buf, &s).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_sample(&mut buf.as_slice()), Err(DatagenError::Format(_))));
        buf[0] = b'D';
        buf.truncate(buf.len() - 3);
        assert!(read_sample(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn wav_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_dyad(2, SampleSource::SyntheticDub, &small()).unwrap();
        let p = dir.path().join("a.wav");
        write_wav(&p, &s.mixed).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.len(), s.mixed.len());
        for (a, b) in back.samples().iter().zip(s.mixed.samples()) {
            assert!((a - b).abs() <= 0.5 / i16::MAX as f64 + 1e-12);
        }
    }

    #[test]
    fn dataset_is_deterministic_and_tagged() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let opts = DatasetOptions {
            dyad: small(),
            ..Default::default()
        };
        let (m1, _) = build_dataset(d1.path(), 10, 4, &opts).unwrap();
        let (m2, _) = build_dataset(d2.path(), 10, 4, &opts).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.records.iter().filter(|r| r.gaze_subset).count(), 2);
        for r in &m1.records {
            let a = std::fs::read(d1.path().join(&r.path)).unwrap();
            let b = std::fs::read(d2.path().join(&r.path)).unwrap();
            assert_eq!(a, b);
        }
        let (loaded, samples) = load_dataset(d1.path()).unwrap();
        assert_eq!(loaded, m1);
        assert_eq!(samples.len(), 10);

        let only = DatasetOptions {
            mix: SourceMix::only(SampleSource::SyntheticDub),
            ..opts
        };
        let (m3, _) = build_dataset(d2.path(), 6, 1, &only).unwrap();
        assert!(m3.records.iter().all(|r| r.source == SampleSource::SyntheticDub));
        let (m0, _) = build_dataset(d2.path(), 0, 1, &only).unwrap();
        assert!(m0.records.is_empty());
    }

    #[test]
    fn duplicate_paths_are_invalid() {
        let r = SampleRecord {
            path: "x".into(),
            source: SampleSource::Conversation,
            duration: 1.0,
            gaze_subset: false,
            split: Split::Train,
        };
        let m = DatasetManifest {
            records: vec![r.clone(), r],
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn unreachable_quality_bar_rejects_every_draw() {
        let dir = tempfile::tempdir().unwrap();
        let mut dyad = small();
        dyad.quality.min_conf = 2.0;
        let opts = DatasetOptions {
            dyad,
            mix: SourceMix::only(SampleSource::Conversation),
            test_every: 0,
        };
        assert!(matches!(
            build_dataset(dir.path(), 2, 0, &opts),
            Err(DatagenError::Rejected(_))
        ));
    }
}
