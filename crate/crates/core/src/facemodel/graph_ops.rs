//! The face model expressed as graph nodes, so losses on posed meshes and
//! gaze can be differentiated with respect to predicted motion parameters.

use super::{
    FaceBasis, FaceModelError, Rig, Vec3, EXPRESSION_DIM, JOINT_COUNT, JOINT_PARENTS, MOTION_DIM, ROT_OFFSET,
    TRANS_OFFSET,
};
use crate::numerics::{Graph, NodeId, NumericsError, Tensor, UnaryFn};
use crate::scalar::Scalar;

/// Rotates each row of `v` by the axis-angle in the same row of `w`;
/// both `[n, 3]`.
pub fn graph_rotate<T: Scalar>(g: &mut Graph<T>, w: NodeId, v: NodeId) -> Result<NodeId, NumericsError> {
    let w2 = g.square(w);
    let a = g.row_sum(w2);
    let sa = g.unary(a, UnaryFn::SinRatio);
    let ca = g.unary(a, UnaryFn::CosRatio);
    let wv = g.cross(w, v)?;
    let wwv = g.cross(w, wv)?;
    let t1 = g.mul(sa, wv)?;
    let t2 = g.mul(ca, wwv)?;
    let out = g.add(v, t1)?;
    g.add(out, t2)
}

/// Constant tensors needed to pose one identity's mesh inside a graph.
#[derive(Clone, Debug)]
pub struct GraphRig<T> {
    neutral: Tensor<T>,
    expression: Tensor<T>,
    rest: [Vec3<T>; JOINT_COUNT],
    weights: Tensor<T>,
}

impl<T: Scalar> GraphRig<T> {
    pub fn new(basis: &FaceBasis<T>, rig: &Rig<T>, beta: &[T]) -> Result<Self, FaceModelError> {
        let v = basis.vertex_count();
        if rig.weights().rows() != v {
            return Err(FaceModelError::Rig(format!(
                "rig has {} vertices, basis has {v}",
                rig.weights().rows()
            )));
        }
        let neutral = basis.identity_mesh(beta)?.reshape(&[1, 3 * v])?;
        Ok(Self {
            neutral,
            expression: basis.expression_bases().clone(),
            rest: *rig.rest(),
            weights: rig.weights().clone(),
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.weights.rows()
    }
}

fn motion_rows<T: Scalar>(g: &Graph<T>, motion: NodeId) -> Result<usize, NumericsError> {
    let s = g.shape(motion);
    if s.len() != 2 || s[1] != MOTION_DIM {
        return Err(NumericsError::Shape {
            node: format!("#{} motion", motion.index()),
            detail: format!("expected [L, {MOTION_DIM}], got {s:?}"),
        });
    }
    Ok(s[0])
}

fn joint_angles<T: Scalar>(g: &mut Graph<T>, motion: NodeId, j: usize) -> Result<NodeId, NumericsError> {
    g.slice_cols(motion, ROT_OFFSET + 3 * j, ROT_OFFSET + 3 * j + 3)
}

/// Applies the global rotation of joint `j` (its own rotation, then each
/// ancestor's) to the rows of `u`.
fn apply_chain<T: Scalar>(
    g: &mut Graph<T>,
    angles: &[NodeId; JOINT_COUNT],
    j: usize,
    mut u: NodeId,
) -> Result<NodeId, NumericsError> {
    let mut cur = Some(j);
    while let Some(k) = cur {
        u = graph_rotate(g, angles[k], u)?;
        cur = JOINT_PARENTS[k];
    }
    Ok(u)
}

fn row_const<T: Scalar>(g: &mut Graph<T>, v: Vec3<T>) -> NodeId {
    g.constant(Tensor::matrix(1, 3, v.to_vec()).expect("3 values"))
}

/// Posed vertices of every frame of a `[L, 78]` motion node, stacked
/// frame-major into `[L * V, 3]`. The translation block is read as an
/// offset from `t0`.
pub fn graph_pose_mesh<T: Scalar>(
    g: &mut Graph<T>,
    rig: &GraphRig<T>,
    motion: NodeId,
    t0: Vec3<T>,
) -> Result<NodeId, NumericsError> {
    let neutral = g.constant(rig.neutral.clone());
    let t0 = row_const(g, t0);
    graph_pose_mesh_nodes(g, rig, motion, neutral, t0)
}

/// [`graph_pose_mesh`] with the identity mesh `[1, 3V]` and the first-frame
/// translation `[1, 3]` supplied as graph nodes; the rig's own identity
/// mesh is ignored.
pub fn graph_pose_mesh_nodes<T: Scalar>(
    g: &mut Graph<T>,
    rig: &GraphRig<T>,
    motion: NodeId,
    neutral: NodeId,
    t0: NodeId,
) -> Result<NodeId, NumericsError> {
    let l = motion_rows(g, motion)?;
    let v = rig.vertex_count();
    let expand: Vec<usize> = (0..l * v).map(|r| r / v).collect();

    let psi = g.slice_cols(motion, 0, EXPRESSION_DIM)?;
    let basis = g.constant(rig.expression.clone());
    let disp = g.matmul(psi, basis)?;
    let mesh = g.add(disp, neutral)?;
    let mesh = g.reshape(mesh, &[l * v, 3])?;

    let frame_angles: [NodeId; JOINT_COUNT] = [
        joint_angles(g, motion, 0)?,
        joint_angles(g, motion, 1)?,
        joint_angles(g, motion, 2)?,
        joint_angles(g, motion, 3)?,
    ];
    let vertex_angles = [
        g.gather_rows(frame_angles[0], expand.clone())?,
        g.gather_rows(frame_angles[1], expand.clone())?,
        g.gather_rows(frame_angles[2], expand.clone())?,
        g.gather_rows(frame_angles[3], expand.clone())?,
    ];

    // posed joint positions per frame, [L, 3]
    let mut posed: Vec<NodeId> = Vec::with_capacity(JOINT_COUNT);
    for j in 0..JOINT_COUNT {
        let p = match JOINT_PARENTS[j] {
            None => {
                let r = row_const(g, rig.rest[j]);
                let zeros = g.constant(Tensor::zeros(&[l, 3]));
                g.add(zeros, r)?
            }
            Some(p) => {
                let off = super::rotation::sub(rig.rest[j], rig.rest[p]);
                let off = g.constant(Tensor::from_fn(&[l, 3], |i| off[i % 3]));
                let moved = apply_chain(g, &frame_angles, p, off)?;
                g.add(posed[p], moved)?
            }
        };
        posed.push(p);
    }

    let mut acc: Option<NodeId> = None;
    for j in 0..JOINT_COUNT {
        let col: Vec<T> = (0..l * v).map(|r| rig.weights.at(r % v, j)).collect();
        if col.iter().all(|&w| w == T::zero()) {
            continue;
        }
        let r = row_const(g, rig.rest[j]);
        let local = g.sub(mesh, r)?;
        let rotated = apply_chain(g, &vertex_angles, j, local)?;
        let pj = g.gather_rows(posed[j], expand.clone())?;
        let term = g.add(pj, rotated)?;
        let w = g.constant(Tensor::matrix(l * v, 1, col)?);
        let term = g.mul(term, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    let acc = acc.expect("weights rows sum to one");
    let dt = g.slice_cols(motion, TRANS_OFFSET, TRANS_OFFSET + 3)?;
    let dt = g.gather_rows(dt, expand)?;
    let out = g.add(acc, dt)?;
    g.add(out, t0)
}

/// Unnormalized gaze direction per frame, `[L, 3]`: the averaged eye
/// forward vectors carried through head and neck rotations.
pub fn graph_gaze_direction<T: Scalar>(g: &mut Graph<T>, motion: NodeId) -> Result<NodeId, NumericsError> {
    let l = motion_rows(g, motion)?;
    let angles: [NodeId; JOINT_COUNT] = [
        joint_angles(g, motion, 0)?,
        joint_angles(g, motion, 1)?,
        joint_angles(g, motion, 2)?,
        joint_angles(g, motion, 3)?,
    ];
    let f = super::gaze_forward::<T>();
    let fwd = g.constant(Tensor::from_fn(&[l, 3], |i| f[i % 3]));
    let le = graph_rotate(g, angles[2], fwd)?;
    let re = graph_rotate(g, angles[3], fwd)?;
    let sum = g.add(le, re)?;
    let avg = g.scale(sum, T::lit(0.5));
    let head = graph_rotate(g, angles[1], avg)?;
    graph_rotate(g, angles[0], head)
}
