use serde::{Deserialize, Serialize};

use super::{frechet_corpus, paired_fd, region_mse, sid, vmse, BlockExtractor, FeatureExtractor, MetricsError, Region};
use crate::facemodel::{FaceBasis, MotionSequence, Rig};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// One evaluated dyad: generated tracks, ground truth and speaker masks.
#[derive(Clone, Debug)]
pub struct EvalInput<T> {
    pub pred: [MotionSequence<T>; 2],
    pub gt: [MotionSequence<T>; 2],
    pub masks: [Vec<T>; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub struct MseReport {
    pub exp: f64,
    pub transl: f64,
    pub rot: f64,
    pub eye: f64,
    pub lip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VmseReport {
    #[serde(rename = "SPE")]
    pub speaker: Option<f64>,
    #[serde(rename = "LIS")]
    pub listener: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub struct SidReport {
    pub full: f64,
    pub exp: f64,
    pub rot: f64,
    pub transl: f64,
}

/// Metric table row: `{FD, P-FD, MSE, vMSE, SID}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "FD")]
    pub fd: f64,
    #[serde(rename = "P-FD")]
    pub paired_fd: f64,
    #[serde(rename = "MSE")]
    pub mse: MseReport,
    #[serde(rename = "vMSE")]
    pub vmse: VmseReport,
    #[serde(rename = "SID")]
    pub sid: SidReport,
}

/// Computes every metric over a set of dyads. FD pools the frames of both
/// participants; MSE pools all tracks; SID scores the generated tracks per
/// parameter block.
pub fn evaluate<T: Scalar>(
    inputs: &[EvalInput<T>],
    basis: &FaceBasis<T>,
    rig: &Rig<T>,
    extractor: &dyn FeatureExtractor,
    sid_k: usize,
    seed: u64,
) -> Result<EvalReport, MetricsError> {
    if inputs.is_empty() {
        return Err(MetricsError::Empty("no dyads to evaluate"));
    }
    let mat = |s: &MotionSequence<T>| -> Tensor<T> { s.to_matrix() };
    let pred: Vec<Tensor<T>> = inputs.iter().flat_map(|d| d.pred.iter().map(mat)).collect();
    let gt: Vec<Tensor<T>> = inputs.iter().flat_map(|d| d.gt.iter().map(mat)).collect();
    let pairs = |f: fn(&EvalInput<T>) -> &[MotionSequence<T>; 2]| -> Vec<(Tensor<T>, Tensor<T>)> {
        inputs.iter().map(|d| (mat(&f(d)[0]), mat(&f(d)[1]))).collect()
    };

    let fd = frechet_corpus(&pred, &gt, extractor)?;
    let pfd = paired_fd(&pairs(|d| &d.pred), &pairs(|d| &d.gt), extractor)?;

    let pooled = |region: Region| -> Result<f64, MetricsError> {
        let (mut s, mut n) = (0.0, 0usize);
        for (p, g) in pred.iter().zip(&gt) {
            s += region_mse(p, g, region)? * p.rows() as f64;
            n += p.rows();
        }
        Ok(s / n as f64)
    };
    let mse = MseReport {
        exp: pooled(Region::Exp)?,
        transl: pooled(Region::Transl)?,
        rot: pooled(Region::Rot)?,
        eye: pooled(Region::Eye)?,
        lip: pooled(Region::Lip)?,
    };

    let seqs = |f: fn(&EvalInput<T>) -> &[MotionSequence<T>; 2]| -> Vec<MotionSequence<T>> {
        inputs.iter().flat_map(|d| f(d).iter().cloned()).collect()
    };
    let masks: Vec<Vec<T>> = inputs.iter().flat_map(|d| d.masks.iter().cloned()).collect();
    let v = vmse(&seqs(|d| &d.pred), &seqs(|d| &d.gt), &masks, basis, rig)?;

    let block_sid = |name: &str, cols: Vec<usize>| -> Result<f64, MetricsError> {
        Ok(sid(&pred, &BlockExtractor::new(name, cols), sid_k, seed)?.value)
    };
    let sid = SidReport {
        full: block_sid("FULL", BlockExtractor::full_columns())?,
        exp: block_sid("EXP", Region::Exp.columns())?,
        rot: block_sid("ROT", Region::Rot.columns())?,
        transl: block_sid("TRANSL", Region::Transl.columns())?,
    };

    Ok(EvalReport {
        fd,
        paired_fd: pfd,
        mse,
        vmse: VmseReport {
            speaker: v.speaker,
            listener: v.listener,
        },
        sid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facemodel::{IDENTITY_DIM, MOTION_DIM};
    use crate::metrics::ProjectionExtractor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn report_has_table_keys_and_zero_error_on_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let basis = FaceBasis::<f64>::synthetic(30, 1).unwrap();
        let rig = Rig::synthetic(basis.mean_shape()).unwrap();
        let seq = |rng: &mut ChaCha8Rng| {
            let m = Tensor::randn(&[20, MOTION_DIM], 0.1, rng);
            MotionSequence::from_matrix(&m, 25.0, vec![0.0; IDENTITY_DIM]).unwrap()
        };
        let inputs: Vec<EvalInput<f64>> = (0..4)
            .map(|_| {
                let pair = [seq(&mut rng), seq(&mut rng)];
                EvalInput {
                    pred: pair.clone(),
                    gt: pair,
                    masks: [vec![1.0; 20], vec![0.0; 20]],
                }
            })
            .collect();
        let ex = ProjectionExtractor::new(0, 8);
        let r = evaluate(&inputs, &basis, &rig, &ex, 40, 0).unwrap();
        assert!(r.fd.abs() < 1e-8 && r.paired_fd.abs() < 1e-8);
        assert_eq!(r.mse.exp, 0.0);
        assert_eq!(r.vmse.speaker, Some(0.0));
        let json = serde_json::to_value(&r).unwrap();
        for k in ["FD", "P-FD", "MSE", "vMSE", "SID"] {
            assert!(json.get(k).is_some(), "{k}");
        }
        for k in ["EXP", "TRANSL", "ROT", "EYE", "LIP"] {
            assert!(json["MSE"].get(k).is_some(), "{k}");
        }
        assert!(json["vMSE"].get("SPE").is_some() && json["vMSE"].get("LIS").is_some());
        for k in ["FULL", "EXP", "ROT", "TRANSL"] {
            assert!(json["SID"].get(k).is_some(), "{k}");
        }
    }
}
