//! The differentiable training objective: the dual network followed by
//! every loss term, built once per sequence length.

use super::{lip_weights, FaceAssets, LossComponents, LossWeights, TrainError};
use crate::conditioning::{audio_features, AudioFeatureConfig};
use crate::datagen::{DyadSample, SampleSource};
use crate::diffusion::{relative_translation, Conditions, NoiseDraw, NoiseSchedule};
use crate::dualnet::{DualNet, UNetConfig, INPUT_T0_A, INPUT_T0_B};
use crate::facemodel::{
    gaze_vector, graph_gaze_direction, graph_pose_mesh_nodes, GraphRig, MotionFrame, EXPRESSION_DIM, IDENTITY_DIM,
    MOTION_DIM, ROT_OFFSET, TRANS_OFFSET,
};
use crate::numerics::{Evaluation, Graph, NodeId, Tensor, TensorMap};

pub const INPUT_TARGET: [&str; 2] = ["loss.target_a", "loss.target_b"];
pub const INPUT_NEUTRAL: [&str; 2] = ["loss.neutral_a", "loss.neutral_b"];
pub const INPUT_VEL: [&str; 2] = ["loss.vel_a", "loss.vel_b"];
pub const INPUT_GAZE: [&str; 2] = ["loss.gaze_a", "loss.gaze_b"];
pub const INPUT_LIP: [&str; 2] = ["loss.lip_a", "loss.lip_b"];
pub const INPUT_W_MAIN: &str = "loss.w_main";
pub const INPUT_W_GAZE: &str = "loss.w_gaze";
pub const INPUT_W_LIP: &str = "loss.w_lip";

/// A dyad with every loss-side tensor precomputed.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub cond: Conditions<f64>,
    /// Model-space targets (translation relative to the first frame).
    pub target: [Tensor<f64>; 2],
    pub neutral: [Tensor<f64>; 2],
    /// Frame-to-frame vertex displacement of the target meshes.
    pub vel: [Tensor<f64>; 2],
    /// Unit gaze direction per frame.
    pub gaze: [Tensor<f64>; 2],
    pub lip: [Tensor<f64>; 2],
    pub gaze_subset: bool,
    pub source: SampleSource,
    pub identity: [Vec<f64>; 2],
    pub fps: f64,
}

impl PreparedSample {
    pub fn len(&self) -> usize {
        self.target[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.target[0].rows() == 0
    }
}

fn target_mesh_velocity(
    target: &Tensor<f64>,
    identity: &[f64],
    assets: &FaceAssets,
) -> Result<Tensor<f64>, TrainError> {
    let l = target.rows();
    let v = assets.basis.vertex_count();
    let meshes = (0..l)
        .map(|r| {
            let f = MotionFrame::from_slice(target.row(r))?;
            let mesh = assets.basis.synthesize_mesh(identity, &f.expression)?;
            Ok(assets.rig.pose_mesh(&mesh, &f.rotation, f.translation)?)
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let mut out = Tensor::zeros(&[(l - 1) * v, 3]);
    for k in 1..l {
        for i in 0..v {
            for c in 0..3 {
                out.set((k - 1) * v + i, c, meshes[k].at(i, c) - meshes[k - 1].at(i, c));
            }
        }
    }
    Ok(out)
}

fn target_gaze(target: &Tensor<f64>) -> Result<Tensor<f64>, TrainError> {
    let mut out = Tensor::zeros(&[target.rows(), 3]);
    for r in 0..target.rows() {
        let g = gaze_vector(&MotionFrame::from_slice(target.row(r))?.rotation)?;
        out.row_mut(r).copy_from_slice(&g);
    }
    Ok(out)
}

/// Computes audio features and every loss-side tensor for one dyad.
pub fn prepare_sample(
    sample: &DyadSample,
    assets: &FaceAssets,
    config: &UNetConfig,
    audio: &AudioFeatureConfig,
) -> Result<PreparedSample, TrainError> {
    sample.validate()?;
    let fps = sample.fps();
    let l = sample.len();
    let mut feats = audio_features(&sample.mixed, fps, audio).map_err(crate::datagen::DatagenError::from)?;
    if feats.rows() != l {
        // audio may cover one frame more or less than the motion
        feats = Tensor::from_fn(&[l, feats.cols()], |i| {
            let (r, c) = (i / feats.cols(), i % feats.cols());
            feats.at(r.min(feats.rows() - 1), c)
        });
    }
    if feats.cols() != config.audio_dim {
        return Err(TrainError::Config(format!(
            "audio features have {} dims, model expects {}",
            feats.cols(),
            config.audio_dim
        )));
    }
    let ta = relative_translation(&sample.motion_a.to_matrix()).0;
    let tb = relative_translation(&sample.motion_b.to_matrix()).0;
    let ids = [sample.motion_a.identity().to_vec(), sample.motion_b.identity().to_vec()];
    let v = assets.basis.vertex_count();
    let neutral = [
        assets.basis.identity_mesh(&ids[0])?.reshape(&[1, 3 * v])?,
        assets.basis.identity_mesh(&ids[1])?.reshape(&[1, 3 * v])?,
    ];
    let lips = assets.lip_indices();
    Ok(PreparedSample {
        cond: Conditions {
            audio: feats,
            mask_a: sample.mask_a.values().to_vec(),
            mask_b: sample.mask_b.values().to_vec(),
            t0_a: sample.t0_a,
            t0_b: sample.t0_b,
        },
        vel: [
            target_mesh_velocity(&ta, &ids[0], assets)?,
            target_mesh_velocity(&tb, &ids[1], assets)?,
        ],
        gaze: [target_gaze(&ta)?, target_gaze(&tb)?],
        lip: [
            lip_weights(sample.mask_a.values(), lips),
            lip_weights(sample.mask_b.values(), lips),
        ],
        target: [ta, tb],
        neutral,
        gaze_subset: sample.gaze_subset,
        source: sample.source,
        identity: ids,
        fps,
    })
}

/// Loss nodes added on top of the network.
#[derive(Clone, Copy, Debug)]
pub struct TrainNodes {
    pub expr: NodeId,
    pub rot: NodeId,
    pub trans: NodeId,
    pub vel: NodeId,
    pub gaze: NodeId,
    pub lip: NodeId,
    pub total: NodeId,
}

/// Network plus loss graph for one sequence length.
#[derive(Clone, Debug)]
pub struct TrainGraph {
    pub net: DualNet<f64>,
    pub nodes: TrainNodes,
    pub weights: LossWeights,
}

fn block_se(g: &mut Graph<f64>, diff: NodeId, s: usize, e: usize) -> Result<NodeId, TrainError> {
    let b = g.slice_cols(diff, s, e)?;
    let sq = g.square(b);
    Ok(g.sum(sq))
}

impl TrainGraph {
    pub fn new(config: &UNetConfig, l: usize, assets: &FaceAssets, weights: LossWeights) -> Result<Self, TrainError> {
        if l < 2 {
            return Err(TrainError::Config("training needs L >= 2".into()));
        }
        let mut net = DualNet::<f64>::new(config.clone(), l)?;
        let v = assets.basis.vertex_count();
        let rig = GraphRig::new(&assets.basis, &assets.rig, &[0.0; IDENTITY_DIM])?;
        let outs = [net.nodes.out_a, net.nodes.out_b];
        let g = &mut net.graph;
        let t0_nodes = [g.input(INPUT_T0_A, &[1, 3])?, g.input(INPUT_T0_B, &[1, 3])?];
        let lf = l as f64;

        let mut expr = Vec::new();
        let mut rot = Vec::new();
        let mut trans = Vec::new();
        let mut vel = Vec::new();
        let mut cos = Vec::new();
        let mut lip = Vec::new();
        let shift_rows: Vec<usize> = (v..l * v).collect();
        let base_rows: Vec<usize> = (0..(l - 1) * v).collect();
        for s in 0..2 {
            let target = g.input(INPUT_TARGET[s], &[l, MOTION_DIM])?;
            let diff = g.sub(outs[s], target)?;
            expr.push(block_se(g, diff, 0, EXPRESSION_DIM)?);
            rot.push(block_se(g, diff, ROT_OFFSET, TRANS_OFFSET)?);
            trans.push(block_se(g, diff, TRANS_OFFSET, MOTION_DIM)?);

            let neutral = g.input(INPUT_NEUTRAL[s], &[1, 3 * v])?;
            let mesh = graph_pose_mesh_nodes(g, &rig, outs[s], neutral, t0_nodes[s])?;
            let next = g.gather_rows(mesh, shift_rows.clone())?;
            let prev = g.gather_rows(mesh, base_rows.clone())?;
            let d = g.sub(next, prev)?;
            let vt = g.input(INPUT_VEL[s], &[(l - 1) * v, 3])?;
            let dv = g.sub(d, vt)?;
            let sq = g.square(dv);
            vel.push(g.sum(sq));

            let gp = graph_gaze_direction(g, outs[s])?;
            let gt = g.input(INPUT_GAZE[s], &[l, 3])?;
            let c = g.row_cosine(gp, gt)?;
            cos.push(g.sum(c));

            let lw = g.input(INPUT_LIP[s], &[l, MOTION_DIM])?;
            let sq = g.square(diff);
            let weighted = g.mul(sq, lw)?;
            lip.push(g.sum(weighted));
        }
        let pair_mean = |g: &mut Graph<f64>, v: &[NodeId], denom: f64| -> Result<NodeId, TrainError> {
            let s = g.add(v[0], v[1])?;
            Ok(g.scale(s, 1.0 / denom))
        };
        let expr = pair_mean(g, &expr, 2.0 * lf * EXPRESSION_DIM as f64)?;
        let rot = pair_mean(g, &rot, 2.0 * lf * (TRANS_OFFSET - ROT_OFFSET) as f64)?;
        let trans = pair_mean(g, &trans, 2.0 * lf * (MOTION_DIM - TRANS_OFFSET) as f64)?;
        let vel = pair_mean(g, &vel, 2.0 * (lf - 1.0) * v as f64 * 3.0)?;
        let mean_cos = pair_mean(g, &cos, 2.0 * lf)?;
        let neg = g.scale(mean_cos, -1.0);
        let gaze = g.shift(neg, 1.0);
        let lip = g.add(lip[0], lip[1])?;

        let terms = [
            g.scale(expr, weights.expr),
            g.scale(rot, weights.rot),
            g.scale(trans, weights.trans),
            g.scale(vel, weights.vel),
        ];
        let mut main = terms[0];
        for &t in &terms[1..] {
            main = g.add(main, t)?;
        }
        let w_main = g.input(INPUT_W_MAIN, &[1])?;
        let w_gaze = g.input(INPUT_W_GAZE, &[1])?;
        let w_lip = g.input(INPUT_W_LIP, &[1])?;
        let a = g.mul(main, w_main)?;
        let b = g.mul(gaze, w_gaze)?;
        let c = g.mul(lip, w_lip)?;
        let ab = g.add(a, b)?;
        let total = g.add(ab, c)?;
        Ok(Self {
            net,
            nodes: TrainNodes {
                expr,
                rot,
                trans,
                vel,
                gaze,
                lip,
                total,
            },
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.net.len
    }

    pub fn is_empty(&self) -> bool {
        self.net.len == 0
    }

    /// Binds the network and loss inputs for one noised sample. `lip_only`
    /// switches the objective to the lip loss alone.
    pub fn bind(
        &self,
        sample: &PreparedSample,
        schedule: &NoiseSchedule,
        draw: &NoiseDraw<f64>,
        lip_only: bool,
    ) -> Result<TensorMap<f64>, TrainError> {
        let inputs = draw.noised_inputs(schedule, &sample.cond, &sample.target[0], &sample.target[1]);
        let mut m = inputs.bind(&self.net.config)?;
        for s in 0..2 {
            m.insert(INPUT_TARGET[s].into(), sample.target[s].clone());
            m.insert(INPUT_NEUTRAL[s].into(), sample.neutral[s].clone());
            m.insert(INPUT_VEL[s].into(), sample.vel[s].clone());
            m.insert(INPUT_GAZE[s].into(), sample.gaze[s].clone());
            m.insert(INPUT_LIP[s].into(), sample.lip[s].clone());
        }
        let (main, gaze, lip) = if lip_only {
            (0.0, 0.0, 1.0)
        } else {
            (1.0, if sample.gaze_subset { self.weights.gaze } else { 0.0 }, 0.0)
        };
        m.insert(INPUT_W_MAIN.into(), Tensor::vector(vec![main]));
        m.insert(INPUT_W_GAZE.into(), Tensor::vector(vec![gaze]));
        m.insert(INPUT_W_LIP.into(), Tensor::vector(vec![lip]));
        Ok(m)
    }

    pub fn components(&self, e: &Evaluation<f64>, gaze_subset: bool) -> (LossComponents, f64) {
        let s = |n: NodeId| e.value(n).data()[0];
        (
            LossComponents {
                expr: s(self.nodes.expr),
                rot: s(self.nodes.rot),
                trans: s(self.nodes.trans),
                vel: s(self.nodes.vel),
                gaze: gaze_subset.then(|| s(self.nodes.gaze)),
                total: s(self.nodes.total),
            },
            s(self.nodes.lip),
        )
    }

    /// Forward and backward pass; returns the loss terms, the lip loss and
    /// parameter gradients of the total.
    pub fn loss_and_grad(
        &self,
        params: &TensorMap<f64>,
        inputs: &TensorMap<f64>,
        gaze_subset: bool,
    ) -> Result<(LossComponents, f64, TensorMap<f64>), TrainError> {
        let e = self.net.graph.forward_eval(params, inputs)?;
        let (c, lip) = self.components(&e, gaze_subset);
        let grads = self.net.graph.backward(&e, self.nodes.total)?;
        Ok((c, lip, grads.params))
    }

    pub fn loss(
        &self,
        params: &TensorMap<f64>,
        inputs: &TensorMap<f64>,
        gaze_subset: bool,
    ) -> Result<(LossComponents, f64), TrainError> {
        let e = self.net.graph.forward_eval(params, inputs)?;
        Ok(self.components(&e, gaze_subset))
    }
}
