use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{FeatureExtractor, MetricsError};
use crate::facemodel::MOTION_DIM;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const DEFAULT_SID_K: usize = 40;
const MAX_ITERATIONS: usize = 100;

#[derive(Clone, Debug)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// k-means++ seeding followed by Lloyd iterations until assignments stop
/// changing or 100 rounds pass. Ties go to the lower cluster index and an
/// emptied cluster keeps its previous centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans, MetricsError> {
    if points.is_empty() {
        return Err(MetricsError::Empty("no points to cluster"));
    }
    if k == 0 || k > points.len() {
        return Err(MetricsError::Shape(format!("k = {k} with {} points", points.len())));
    }
    let d = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(MetricsError::Dimension(d, p.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            // every point already coincides with a centroid
            0
        };
        centroids.push(points[pick].clone());
        let c = centroids.last().expect("just pushed");
        for (w, p) in d2.iter_mut().zip(points) {
            *w = w.min(dist2(p, c));
        }
    }

    let mut assignments = vec![usize::MAX; points.len()];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|x| x / n as f64).collect();
            }
        }
    }
    Ok(KMeans {
        centroids,
        assignments,
        iterations,
        converged,
    })
}

/// Entropy of the cluster-assignment histogram.
pub fn assignment_entropy(assignments: &[usize], k: usize) -> f64 {
    let mut counts = vec![0usize; k];
    for &a in assignments {
        counts[a] += 1;
    }
    let n = assignments.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidResult {
    pub value: f64,
    /// Cluster count actually used.
    pub k: usize,
}

/// Diversity of a corpus: each track is summarized by the time-mean of its
/// per-frame features (no pose normalization, so global position and
/// orientation count), clustered, and scored by assignment entropy.
/// `k` shrinks to the corpus size with a warning.
pub fn sid<T: Scalar>(
    tracks: &[Tensor<T>],
    extractor: &dyn FeatureExtractor,
    k: usize,
    seed: u64,
) -> Result<SidResult, MetricsError> {
    if tracks.is_empty() {
        return Err(MetricsError::Empty("no tracks for SID"));
    }
    let feats = tracks
        .par_iter()
        .map(|t| {
            if t.shape().len() != 2 || t.cols() != MOTION_DIM {
                return Err(MetricsError::Shape(format!("motion {:?}", t.shape())));
            }
            let mut mean = vec![0.0; extractor.dim()];
            for r in 0..t.rows() {
                let frame: Vec<f64> = t.row(r).iter().map(|x| x.to_f64_lossy()).collect();
                for (m, f) in mean.iter_mut().zip(extractor.extract(&frame)) {
                    *m += f;
                }
            }
            let l = t.rows() as f64;
            mean.iter_mut().for_each(|m| *m /= l);
            if mean.iter().any(|x| !x.is_finite()) {
                return Err(MetricsError::NonFinite("SID features"));
            }
            Ok(mean)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let k_used = if k > feats.len() {
        log::warn!("SID: k = {k} exceeds {} tracks; using k = {}", feats.len(), feats.len());
        feats.len()
    } else {
        k.max(1)
    };
    let km = kmeans(&feats, k_used, seed)?;
    Ok(SidResult {
        value: assignment_entropy(&km.assignments, k_used),
        k: k_used,
    })
}
