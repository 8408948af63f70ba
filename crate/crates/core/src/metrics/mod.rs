//! Evaluation metrics: Fréchet distance and its paired variant, region and
//! vertex MSE, and the SID diversity score.
//!
//! Inputs are generic over the scalar type; statistics are accumulated and
//! reported in `f64`.

mod features;
mod regions;
mod report;
mod sid;

pub use features::{
    corpus_stats, frame_features, frechet_corpus, normalize_pose, paired_corpus_stats, paired_fd, BlockExtractor,
    FeatureExtractor, ProjectionExtractor, DEFAULT_FEATURE_DIM,
};
pub use regions::{region_mse, region_mse_cols, vmse, Region, VertexMse};
pub use report::{evaluate, EvalInput, EvalReport, MseReport, SidReport, VmseReport};
pub use sid::{assignment_entropy, kmeans, sid, KMeans, SidResult, DEFAULT_SID_K};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::facemodel::FaceModelError;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("need at least {need} frames for a {dim}-dimensional covariance, got {got}")]
    TooFewFrames { need: usize, got: usize, dim: usize },
    #[error("empty corpus: {0}")]
    Empty(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid statistics: {0}")]
    InvalidStats(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Face(#[from] FaceModelError),
}

/// Mean and covariance of a feature distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianStats {
    /// Checks symmetry and positive semidefiniteness, both within 1e-9
    /// relative to the largest covariance entry.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, MetricsError> {
        let d = mean.len();
        if d == 0 {
            return Err(MetricsError::Empty("zero-dimensional statistics"));
        }
        if cov.shape() != (d, d) {
            return Err(MetricsError::Dimension(d, cov.nrows()));
        }
        if mean.iter().chain(cov.iter()).any(|x| !x.is_finite()) {
            return Err(MetricsError::NonFinite("gaussian statistics"));
        }
        let tol = 1e-9 * cov.amax().max(1.0);
        let asym = (&cov - cov.transpose()).amax();
        if asym > tol {
            return Err(MetricsError::InvalidStats(format!("covariance asymmetric by {asym:e}")));
        }
        let min_eig = SymmetricEigen::new(symmetrize(&cov)).eigenvalues.min();
        if min_eig < -tol {
            return Err(MetricsError::InvalidStats(format!(
                "covariance eigenvalue {min_eig:e} is negative"
            )));
        }
        Ok(Self { mean, cov })
    }

    /// Sample mean and unbiased covariance of row vectors.
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self, MetricsError> {
        let mut acc = StatsAccumulator::new(samples.first().map_or(0, Vec::len));
        for s in samples {
            acc.push(s)?;
        }
        acc.finish()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

/// Streaming mean and scatter with an exact pairwise merge, so partial
/// results from parallel workers combine independently of chunking.
#[derive(Clone, Debug)]
pub struct StatsAccumulator {
    n: usize,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

impl StatsAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: DVector::zeros(dim),
            scatter: DMatrix::zeros(dim, dim),
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn push(&mut self, x: &[f64]) -> Result<(), MetricsError> {
        if x.len() != self.mean.len() {
            return Err(MetricsError::Dimension(self.mean.len(), x.len()));
        }
        let x = DVector::from_column_slice(x);
        self.n += 1;
        let delta = &x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = &x - &self.mean;
        self.scatter += &delta * delta2.transpose();
        Ok(())
    }

    pub fn merge(mut self, other: &Self) -> Result<Self, MetricsError> {
        if other.mean.len() != self.mean.len() {
            return Err(MetricsError::Dimension(self.mean.len(), other.mean.len()));
        }
        if other.n == 0 {
            return Ok(self);
        }
        if self.n == 0 {
            return Ok(other.clone());
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        self.scatter += &other.scatter + &delta * delta.transpose() * (na * nb / n);
        self.mean += delta * (nb / n);
        self.n += other.n;
        Ok(self)
    }

    /// Requires more samples than dimensions; fewer leave the covariance
    /// rank deficient.
    pub fn finish(self) -> Result<GaussianStats, MetricsError> {
        let d = self.mean.len();
        if self.n < d + 1 {
            return Err(MetricsError::TooFewFrames {
                need: d + 1,
                got: self.n,
                dim: d,
            });
        }
        let cov = symmetrize(&(self.scatter / (self.n - 1) as f64));
        GaussianStats::new(self.mean, cov)
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric PSD square root with eigenvalues clipped at zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let vals = eig.eigenvalues.map(|x| x.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^½)`.
///
/// The trace of the cross term is taken from the symmetrized product
/// `Σa^½ Σb Σa^½`, which has the same eigenvalues as `Σa Σb`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::Dimension(a.dim(), b.dim()));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let sa = psd_sqrt(&a.cov);
    let inner = symmetrize(&(&sa * &b.cov * &sa));
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&x| x.max(0.0).sqrt())
        .sum();
    Ok(mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn iso(mean: &[f64]) -> GaussianStats {
        let d = mean.len();
        GaussianStats::new(DVector::from_column_slice(mean), DMatrix::identity(d, d)).unwrap()
    }

    #[test]
    fn identical_stats_have_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..5).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let s = GaussianStats::fit(&samples).unwrap();
        assert!(frechet_distance(&s, &s).unwrap().abs() < 1e-9);
    }

    #[test]
    fn shifted_identity_gives_squared_norm() {
        let mu = [1.0, -2.0, 0.5];
        let fd = frechet_distance(&iso(&[0.0; 3]), &iso(&mu)).unwrap();
        assert!((fd - 5.25).abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let a = GaussianStats::new(DVector::from_element(1, 1.5), DMatrix::from_element(1, 1, 4.0)).unwrap();
        let b = GaussianStats::new(DVector::from_element(1, -0.5), DMatrix::from_element(1, 1, 0.25)).unwrap();
        let want = 2.0f64.powi(2) + (2.0f64 - 0.5).powi(2);
        assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(matches!(
            frechet_distance(&iso(&[0.0; 2]), &iso(&[0.0; 3])),
            Err(MetricsError::Dimension(2, 3))
        ));
    }

    #[test]
    fn invalid_covariances_are_rejected() {
        let m = DVector::zeros(2);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(GaussianStats::new(m.clone(), asym).is_err());
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianStats::new(m, indef).is_err());
    }

    #[test]
    fn too_few_samples_is_flagged() {
        let s = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(matches!(
            GaussianStats::fit(&s),
            Err(MetricsError::TooFewFrames { need: 3, got: 2, .. })
        ));
    }

    #[test]
    fn merge_matches_sequential_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let whole = GaussianStats::fit(&xs).unwrap();
        let mut a = StatsAccumulator::new(3);
        let mut b = StatsAccumulator::new(3);
        for x in &xs[..13] {
            a.push(x).unwrap();
        }
        for x in &xs[13..] {
            b.push(x).unwrap();
        }
        let merged = a.merge(&b).unwrap().finish().unwrap();
        assert!((whole.mean() - merged.mean()).amax() < 1e-12);
        assert!((whole.cov() - merged.cov()).amax() < 1e-12);
    }

    #[test]
    fn distance_is_symmetric_on_random_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let draw = |rng: &mut ChaCha8Rng| {
                let xs: Vec<Vec<f64>> = (0..30)
                    .map(|_| (0..4).map(|_| StandardNormal.sample(rng)).collect())
                    .collect();
                GaussianStats::fit(&xs).unwrap()
            };
            let (a, b) = (draw(&mut rng), draw(&mut rng));
            let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
            assert!((ab - ba).abs() < 1e-9);
            assert!(ab > -1e-8);
        }
    }
}
