use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::facemodel::{
    FaceBasis, MotionSequence, Rig, EXPRESSION_DIM, LIP_COUNT, MOTION_DIM, ROT_OFFSET, TRANS_OFFSET,
};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Parameter blocks reported separately. `Lip` is a subset of `Exp`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Region {
    Exp,
    Transl,
    /// Neck and head.
    Rot,
    /// Both eye joints.
    Eye,
    Lip,
}

impl Region {
    pub const ALL: [Region; 5] = [Region::Exp, Region::Transl, Region::Rot, Region::Eye, Region::Lip];

    pub fn name(self) -> &'static str {
        match self {
            Region::Exp => "EXP",
            Region::Transl => "TRANSL",
            Region::Rot => "ROT",
            Region::Eye => "EYE",
            Region::Lip => "LIP",
        }
    }

    /// Column indices into a `[L, 78]` motion matrix; `Lip` uses the first
    /// [`LIP_COUNT`] expression components.
    pub fn columns(self) -> Vec<usize> {
        match self {
            Region::Exp => (0..EXPRESSION_DIM).collect(),
            Region::Transl => (TRANS_OFFSET..MOTION_DIM).collect(),
            Region::Rot => (ROT_OFFSET..ROT_OFFSET + 6).collect(),
            Region::Eye => (ROT_OFFSET + 6..TRANS_OFFSET).collect(),
            Region::Lip => (0..LIP_COUNT).collect(),
        }
    }
}

/// Mean squared error over the given columns of two aligned motion matrices.
pub fn region_mse_cols<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, cols: &[usize]) -> Result<f64, MetricsError> {
    if pred.shape() != gt.shape() || pred.shape().len() != 2 || pred.cols() != MOTION_DIM {
        return Err(MetricsError::Shape(format!(
            "pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if cols.is_empty() {
        return Err(MetricsError::Empty("no columns"));
    }
    let mut s = 0.0;
    for r in 0..pred.rows() {
        let (p, g) = (pred.row(r), gt.row(r));
        for &c in cols {
            let d = p[c].to_f64_lossy() - g[c].to_f64_lossy();
            s += d * d;
        }
    }
    Ok(s / (pred.rows() * cols.len()) as f64)
}

pub fn region_mse<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, region: Region) -> Result<f64, MetricsError> {
    region_mse_cols(pred, gt, &region.columns())
}

/// Vertex MSE split by speaking role; a bucket with no frames is `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexMse {
    pub speaker: Option<f64>,
    pub listener: Option<f64>,
}

/// Per-frame mean squared vertex distance between posed meshes. Track `i`
/// uses `masks[i]`: frames with mask > 0.5 go to the speaker bucket, the
/// rest to the listener bucket.
pub fn vmse<T: Scalar>(
    pred: &[MotionSequence<T>],
    gt: &[MotionSequence<T>],
    masks: &[Vec<T>],
    basis: &FaceBasis<T>,
    rig: &Rig<T>,
) -> Result<VertexMse, MetricsError> {
    if pred.len() != gt.len() || pred.len() != masks.len() {
        return Err(MetricsError::Shape(format!(
            "{} predicted tracks, {} targets, {} masks",
            pred.len(),
            gt.len(),
            masks.len()
        )));
    }
    let half = T::lit(0.5);
    let (mut spe, mut lis) = ((0.0, 0usize), (0.0, 0usize));
    for ((p, g), m) in pred.iter().zip(gt).zip(masks) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(MetricsError::Shape(format!(
                "track lengths {} / {} with mask {}",
                p.len(),
                g.len(),
                m.len()
            )));
        }
        let pm = p.posed_meshes(basis, rig)?;
        let gm = g.posed_meshes(basis, rig)?;
        for ((a, b), &w) in pm.iter().zip(&gm).zip(m) {
            let err = frame_vertex_mse(a, b);
            let bucket = if w > half { &mut spe } else { &mut lis };
            bucket.0 += err;
            bucket.1 += 1;
        }
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    Ok(VertexMse {
        speaker: mean(spe),
        listener: mean(lis),
    })
}

fn frame_vertex_mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.to_f64_lossy() - y.to_f64_lossy();
            d * d
        })
        .sum();
    s / a.rows() as f64
}
