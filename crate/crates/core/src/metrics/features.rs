use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{frechet_distance, GaussianStats, MetricsError, StatsAccumulator};
use crate::facemodel::{MOTION_DIM, ROT_OFFSET};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const DEFAULT_FEATURE_DIM: usize = 64;

/// Deterministic map from one pose-normalized `[78]` parameter frame to a
/// fixed-width feature vector.
pub trait FeatureExtractor: Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, frame: &[f64]) -> Vec<f64>;
}

/// Fixed Gaussian projection `x P / sqrt(78)` drawn from a seed.
#[derive(Clone, Debug)]
pub struct ProjectionExtractor {
    name: String,
    dim: usize,
    proj: Vec<f64>,
}

impl ProjectionExtractor {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (MOTION_DIM as f64).sqrt();
        let proj = (0..MOTION_DIM * dim)
            .map(|_| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        Self {
            name: format!("projection-{dim}-seed{seed}"),
            dim,
            proj,
        }
    }
}

impl FeatureExtractor for ProjectionExtractor {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, frame: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, &x) in frame.iter().enumerate() {
            let row = &self.proj[i * self.dim..(i + 1) * self.dim];
            for (o, &p) in out.iter_mut().zip(row) {
                *o += x * p;
            }
        }
        out
    }
}

/// Selects raw parameter columns.
#[derive(Clone, Debug)]
pub struct BlockExtractor {
    name: String,
    cols: Vec<usize>,
}

impl BlockExtractor {
    pub fn new(name: impl Into<String>, cols: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            cols,
        }
    }

    pub fn full() -> Self {
        Self::new("FULL", Self::full_columns())
    }

    pub fn full_columns() -> Vec<usize> {
        (0..MOTION_DIM).collect()
    }
}

impl FeatureExtractor for BlockExtractor {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.cols.len()
    }

    fn extract(&self, frame: &[f64]) -> Vec<f64> {
        self.cols.iter().map(|&c| frame[c]).collect()
    }
}

fn to_f64<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<f64>, MetricsError> {
    if m.shape().len() != 2 || m.cols() != MOTION_DIM {
        return Err(MetricsError::Shape(format!(
            "motion matrix must be [L, {MOTION_DIM}], got {:?}",
            m.shape()
        )));
    }
    let t = m.cast::<f64>();
    if t.data().iter().any(|x| !x.is_finite()) {
        return Err(MetricsError::NonFinite("motion"));
    }
    Ok(t)
}

/// Subtracts the per-sequence mean of every rotation and translation column.
pub fn normalize_pose(m: &Tensor<f64>) -> Tensor<f64> {
    let mut out = m.clone();
    let l = m.rows() as f64;
    for c in ROT_OFFSET..MOTION_DIM {
        let mean = (0..m.rows()).map(|r| m.at(r, c)).sum::<f64>() / l;
        for r in 0..m.rows() {
            out.set(r, c, m.at(r, c) - mean);
        }
    }
    out
}

/// Per-frame features of one pose-normalized track.
pub fn frame_features<T: Scalar>(
    motion: &Tensor<T>,
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<Vec<f64>>, MetricsError> {
    let m = normalize_pose(&to_f64(motion)?);
    Ok((0..m.rows()).map(|r| extractor.extract(m.row(r))).collect())
}

fn merge_all(parts: Vec<StatsAccumulator>, dim: usize) -> Result<GaussianStats, MetricsError> {
    let mut acc = StatsAccumulator::new(dim);
    for p in &parts {
        acc = acc.merge(p)?;
    }
    acc.finish()
}

/// Gaussian fit over the frames of every track in the corpus.
pub fn corpus_stats<T: Scalar>(
    tracks: &[Tensor<T>],
    extractor: &dyn FeatureExtractor,
) -> Result<GaussianStats, MetricsError> {
    if tracks.is_empty() {
        return Err(MetricsError::Empty("no tracks"));
    }
    let d = extractor.dim();
    let parts = tracks
        .par_iter()
        .map(|t| {
            let mut acc = StatsAccumulator::new(d);
            for f in frame_features(t, extractor)? {
                acc.push(&f)?;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    merge_all(parts, d)
}

/// Gaussian fit over per-frame concatenations `[feat(A), feat(B)]`.
pub fn paired_corpus_stats<T: Scalar>(
    pairs: &[(Tensor<T>, Tensor<T>)],
    extractor: &dyn FeatureExtractor,
) -> Result<GaussianStats, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty("no pairs"));
    }
    let d = 2 * extractor.dim();
    let parts = pairs
        .par_iter()
        .map(|(a, b)| {
            if a.rows() != b.rows() {
                return Err(MetricsError::Shape(format!(
                    "pair lengths differ: {} vs {}",
                    a.rows(),
                    b.rows()
                )));
            }
            let fa = frame_features(a, extractor)?;
            let fb = frame_features(b, extractor)?;
            let mut acc = StatsAccumulator::new(d);
            for (x, y) in fa.into_iter().zip(fb) {
                let mut joint = x;
                joint.extend(y);
                acc.push(&joint)?;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    merge_all(parts, d)
}

/// FD between the per-frame feature distributions of two corpora.
pub fn frechet_corpus<T: Scalar>(
    generated: &[Tensor<T>],
    real: &[Tensor<T>],
    extractor: &dyn FeatureExtractor,
) -> Result<f64, MetricsError> {
    frechet_distance(&corpus_stats(generated, extractor)?, &corpus_stats(real, extractor)?)
}

/// FD over concatenated A/B features, sensitive to how the two
/// participants co-vary.
pub fn paired_fd<T: Scalar>(
    generated: &[(Tensor<T>, Tensor<T>)],
    real: &[(Tensor<T>, Tensor<T>)],
    extractor: &dyn FeatureExtractor,
) -> Result<f64, MetricsError> {
    frechet_distance(
        &paired_corpus_stats(generated, extractor)?,
        &paired_corpus_stats(real, extractor)?,
    )
}
