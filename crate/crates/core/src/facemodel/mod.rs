//! Parametric face: linear identity/expression bases, a four-joint skinning
//! rig, gaze extraction and the per-participant motion track.

mod graph_ops;
mod rotation;

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{read_archive, write_archive, NumericsError, Tensor, TensorMap};
use crate::scalar::Scalar;

pub use graph_ops::{graph_gaze_direction, graph_pose_mesh, graph_pose_mesh_nodes, graph_rotate, GraphRig};
pub use rotation::{axis_angle_to_matrix, clamp_axis_angle, rotate, Mat3, Vec3};

pub const EXPRESSION_DIM: usize = 63;
pub const IDENTITY_DIM: usize = 50;
pub const JOINT_COUNT: usize = 4;
pub const ROTATION_DIM: usize = JOINT_COUNT * 3;
pub const TRANSLATION_DIM: usize = 3;
/// Width of one frame of the generated parameter vector `(psi, theta, t)`.
pub const MOTION_DIM: usize = EXPRESSION_DIM + ROTATION_DIM + TRANSLATION_DIM;
pub const LIP_COUNT: usize = 20;
pub const DEFAULT_FPS: f64 = 25.0;

/// Column offsets of the blocks inside a [`MOTION_DIM`] row.
pub const EXPR_OFFSET: usize = 0;
pub const ROT_OFFSET: usize = EXPRESSION_DIM;
pub const TRANS_OFFSET: usize = EXPRESSION_DIM + ROTATION_DIM;

/// Skeleton joints in rig order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Joint {
    Neck = 0,
    Head = 1,
    LeftEye = 2,
    RightEye = 3,
}

/// Parent of each joint; the neck is the root.
pub const JOINT_PARENTS: [Option<usize>; JOINT_COUNT] = [None, Some(0), Some(1), Some(1)];

/// Canonical gaze-forward direction.
pub fn gaze_forward<T: Scalar>() -> Vec3<T> {
    [T::zero(), T::zero(), T::one()]
}

#[derive(Debug, thiserror::Error)]
pub enum FaceModelError {
    #[error("{what}: expected length {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid face basis: {0}")]
    Basis(String),
    #[error("invalid rig: {0}")]
    Rig(String),
    #[error("invalid motion sequence: {0}")]
    Sequence(String),
    #[error("gaze undefined: averaged eye direction has norm {0:e}")]
    DegenerateGaze(f64),
    #[error("motion file: {0}")]
    Format(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), FaceModelError> {
    if expected != got {
        return Err(FaceModelError::Length { what, expected, got });
    }
    Ok(())
}

/// Linear morphable model: `S + sum_i beta_i S_i + sum_j psi_j E_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceBasis<T> {
    mean: Tensor<T>,
    identity: Tensor<T>,
    expression: Tensor<T>,
    lip_indices: Vec<usize>,
}

impl<T: Scalar> FaceBasis<T> {
    /// `mean: [V, 3]`, `identity: [50, 3V]`, `expression: [63, 3V]`.
    pub fn new(
        mean: Tensor<T>,
        identity: Tensor<T>,
        expression: Tensor<T>,
        lip_indices: Vec<usize>,
    ) -> Result<Self, FaceModelError> {
        if mean.shape().len() != 2 || mean.shape()[1] != 3 {
            return Err(FaceModelError::Basis(format!(
                "mean shape must be [V, 3], got {:?}",
                mean.shape()
            )));
        }
        let n = mean.len();
        if identity.shape() != [IDENTITY_DIM, n] {
            return Err(FaceModelError::Basis(format!(
                "identity bases {:?}, expected [{IDENTITY_DIM}, {n}]",
                identity.shape()
            )));
        }
        if expression.shape() != [EXPRESSION_DIM, n] {
            return Err(FaceModelError::Basis(format!(
                "expression bases {:?}, expected [{EXPRESSION_DIM}, {n}]",
                expression.shape()
            )));
        }
        validate_lip_indices(&lip_indices)?;
        Ok(Self {
            mean,
            identity,
            expression,
            lip_indices,
        })
    }

    /// Deterministic desk-scale basis: mean shape on an ellipsoid, each basis
    /// set an orthonormal family of random directions in `R^{3V}`.
    pub fn synthetic(vertex_count: usize, seed: u64) -> Result<Self, FaceModelError> {
        let n = vertex_count * 3;
        if n < EXPRESSION_DIM {
            return Err(FaceModelError::Basis(format!(
                "{vertex_count} vertices cannot hold {EXPRESSION_DIM} orthonormal bases"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean = ellipsoid_mesh::<T>(vertex_count);
        let identity = orthonormal_rows(Tensor::randn(&[IDENTITY_DIM, n], T::one(), &mut rng));
        let expression = orthonormal_rows(Tensor::randn(&[EXPRESSION_DIM, n], T::one(), &mut rng));
        Self::new(mean, identity, expression, (0..LIP_COUNT).collect())
    }

    pub fn vertex_count(&self) -> usize {
        self.mean.rows()
    }

    pub fn mean_shape(&self) -> &Tensor<T> {
        &self.mean
    }

    /// `[63, 3V]`, one flattened vertex displacement per row.
    pub fn expression_bases(&self) -> &Tensor<T> {
        &self.expression
    }

    pub fn identity_bases(&self) -> &Tensor<T> {
        &self.identity
    }

    pub fn lip_indices(&self) -> &[usize] {
        &self.lip_indices
    }

    pub fn with_lip_indices(mut self, lip_indices: Vec<usize>) -> Result<Self, FaceModelError> {
        validate_lip_indices(&lip_indices)?;
        self.lip_indices = lip_indices;
        Ok(self)
    }

    /// Neutral mesh of one identity: `S + sum_i beta_i S_i`, `[V, 3]`.
    pub fn identity_mesh(&self, beta: &[T]) -> Result<Tensor<T>, FaceModelError> {
        check_len("identity coefficients", IDENTITY_DIM, beta.len())?;
        let mut out = self.mean.clone();
        accumulate_rows(out.data_mut(), &self.identity, beta);
        Ok(out)
    }

    /// `S + sum_i beta_i S_i + sum_j psi_j E_j`, `[V, 3]`.
    pub fn synthesize_mesh(&self, beta: &[T], psi: &[T]) -> Result<Tensor<T>, FaceModelError> {
        check_len("expression coefficients", EXPRESSION_DIM, psi.len())?;
        let mut out = self.identity_mesh(beta)?;
        accumulate_rows(out.data_mut(), &self.expression, psi);
        Ok(out)
    }

    pub fn to_tensors(&self) -> TensorMap<T> {
        let mut m = TensorMap::new();
        m.insert("mean".into(), self.mean.clone());
        m.insert("identity".into(), self.identity.clone());
        m.insert("expression".into(), self.expression.clone());
        m.insert(
            "lip_indices".into(),
            Tensor::vector(self.lip_indices.iter().map(|&i| T::from_usize_lossy(i)).collect()),
        );
        m
    }

    pub fn from_tensors(mut m: TensorMap<T>) -> Result<Self, FaceModelError> {
        let mut take = |k: &str| {
            m.remove(k)
                .ok_or_else(|| FaceModelError::Basis(format!("missing record `{k}`")))
        };
        let mean = take("mean")?;
        let identity = take("identity")?;
        let expression = take("expression")?;
        let lips = take("lip_indices")?
            .data()
            .iter()
            .map(|x| x.to_usize().unwrap_or(usize::MAX))
            .collect();
        Self::new(mean, identity, expression, lips)
    }

    /// Writes the basis in the parameter-archive format.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), FaceModelError> {
        Ok(write_archive(w, &self.to_tensors())?)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, FaceModelError> {
        Self::from_tensors(read_archive(r)?)
    }
}

fn validate_lip_indices(lips: &[usize]) -> Result<(), FaceModelError> {
    if lips.len() != LIP_COUNT {
        return Err(FaceModelError::Basis(format!(
            "lip index set must have {LIP_COUNT} entries, got {}",
            lips.len()
        )));
    }
    let mut seen = [false; EXPRESSION_DIM];
    for &i in lips {
        if i >= EXPRESSION_DIM || seen[i] {
            return Err(FaceModelError::Basis(format!("bad lip index {i}")));
        }
        seen[i] = true;
    }
    Ok(())
}

fn accumulate_rows<T: Scalar>(out: &mut [T], bases: &Tensor<T>, coeffs: &[T]) {
    for (j, &c) in coeffs.iter().enumerate() {
        if c == T::zero() {
            continue;
        }
        for (o, &b) in out.iter_mut().zip(bases.row(j)) {
            *o += c * b;
        }
    }
}

/// Modified Gram-Schmidt over rows.
fn orthonormal_rows<T: Scalar>(mut m: Tensor<T>) -> Tensor<T> {
    let (r, c) = (m.rows(), m.cols());
    for i in 0..r {
        for j in 0..i {
            let d: T = (0..c).map(|k| m.at(i, k) * m.at(j, k)).sum();
            for k in 0..c {
                let v = m.at(i, k) - d * m.at(j, k);
                m.set(i, k, v);
            }
        }
        let n: T = m.row(i).iter().map(|&x| x * x).sum::<T>().sqrt();
        for x in m.row_mut(i) {
            *x /= n;
        }
    }
    m
}

/// Fibonacci points on a head-sized ellipsoid facing +z.
fn ellipsoid_mesh<T: Scalar>(v: usize) -> Tensor<T> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let radii = [0.075, 0.1, 0.09];
    let center = [0.0, 0.02, 0.0];
    let mut data = Vec::with_capacity(v * 3);
    for i in 0..v {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / v as f64;
        let r = (1.0 - y * y).sqrt();
        let phi = golden * i as f64;
        let p = [r * phi.sin(), y, r * phi.cos()];
        for k in 0..3 {
            data.push(T::lit(center[k] + radii[k] * p[k]));
        }
    }
    Tensor::matrix(v, 3, data).expect("vertex buffer")
}

/// Four-joint skeleton with per-vertex skinning weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Rig<T> {
    rest: [Vec3<T>; JOINT_COUNT],
    weights: Tensor<T>,
}

impl<T: Scalar> Rig<T> {
    /// `weights: [V, 4]`, non-negative rows summing to one.
    pub fn new(rest: [Vec3<T>; JOINT_COUNT], weights: Tensor<T>) -> Result<Self, FaceModelError> {
        if weights.shape().len() != 2 || weights.shape()[1] != JOINT_COUNT {
            return Err(FaceModelError::Rig(format!(
                "weights must be [V, {JOINT_COUNT}], got {:?}",
                weights.shape()
            )));
        }
        for r in 0..weights.rows() {
            let row = weights.row(r);
            if row.iter().any(|&w| w < T::zero() || !w.is_finite()) {
                return Err(FaceModelError::Rig(format!("negative weight on vertex {r}")));
            }
            let s: T = row.iter().copied().sum();
            if (s - T::one()).abs() > T::lit(1e-9) {
                return Err(FaceModelError::Rig(format!("weights on vertex {r} sum to {s}")));
            }
        }
        Ok(Self { rest, weights })
    }

    /// Default rig for a [`FaceBasis::synthetic`] mean shape: eye joints
    /// claim nearby front vertices, the neck claims the lower rim, the head
    /// takes the rest.
    pub fn synthetic(mean: &Tensor<T>) -> Result<Self, FaceModelError> {
        let l = |x: f64| T::lit(x);
        let rest = [
            [l(0.0), l(-0.09), l(-0.01)],
            [l(0.0), l(0.0), l(0.0)],
            [l(0.032), l(0.035), l(0.075)],
            [l(-0.032), l(0.035), l(0.075)],
        ];
        let mut w = Vec::with_capacity(mean.rows() * JOINT_COUNT);
        for r in 0..mean.rows() {
            let p = [mean.at(r, 0), mean.at(r, 1), mean.at(r, 2)];
            let eye = |j: usize| {
                let d = rotation::norm(rotation::sub(p, rest[j]));
                (T::one() - d / l(0.04)).max(T::zero())
            };
            let neck = ((l(-0.03) - p[1]) / l(0.06)).max(T::zero()).min(T::one());
            let (le, re) = (eye(2), eye(3));
            let head = (T::one() - neck - le - re).max(l(0.05));
            let s = neck + head + le + re;
            w.extend_from_slice(&[neck / s, head / s, le / s, re / s]);
        }
        Self::new(rest, Tensor::matrix(mean.rows(), JOINT_COUNT, w)?)
    }

    /// Single-joint rig: every vertex bound to the neck at `pivot`.
    pub fn rigid(vertex_count: usize, pivot: Vec3<T>) -> Result<Self, FaceModelError> {
        let mut w = Tensor::zeros(&[vertex_count, JOINT_COUNT]);
        for r in 0..vertex_count {
            w.set(r, 0, T::one());
        }
        Self::new([pivot; JOINT_COUNT], w)
    }

    pub fn rest(&self) -> &[Vec3<T>; JOINT_COUNT] {
        &self.rest
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    /// Global rotation and posed position of every joint.
    ///
    /// A child joint's posed position follows its parent's transform, so a
    /// neck rotation carries the head and eyes along with it.
    pub fn joint_transforms(&self, theta: &[Vec3<T>; JOINT_COUNT]) -> [(Mat3<T>, Vec3<T>); JOINT_COUNT] {
        let mut out = [(rotation::identity(), [T::zero(); 3]); JOINT_COUNT];
        for j in 0..JOINT_COUNT {
            let local = axis_angle_to_matrix(theta[j]);
            out[j] = match JOINT_PARENTS[j] {
                None => (local, self.rest[j]),
                Some(p) => {
                    let (pr, pp) = out[p];
                    let offset = rotation::sub(self.rest[j], self.rest[p]);
                    (
                        rotation::mat_mul(&pr, &local),
                        rotation::add(pp, rotation::mat_vec(&pr, offset)),
                    )
                }
            };
        }
        out
    }

    /// Linear blend skinning:
    /// `v' = sum_j w_j (p_j + G_j (v - r_j)) + t`.
    pub fn pose_mesh(
        &self,
        vertices: &Tensor<T>,
        theta: &[Vec3<T>; JOINT_COUNT],
        translation: Vec3<T>,
    ) -> Result<Tensor<T>, FaceModelError> {
        if vertices.shape() != [self.weights.rows(), 3] {
            return Err(FaceModelError::Rig(format!(
                "vertices {:?} do not match rig with {} vertices",
                vertices.shape(),
                self.weights.rows()
            )));
        }
        let xf = self.joint_transforms(theta);
        let mut out = Tensor::zeros(vertices.shape());
        for r in 0..vertices.rows() {
            let v = [vertices.at(r, 0), vertices.at(r, 1), vertices.at(r, 2)];
            let mut acc = [T::zero(); 3];
            for (j, (g, p)) in xf.iter().enumerate() {
                let w = self.weights.at(r, j);
                if w == T::zero() {
                    continue;
                }
                let moved = rotation::add(*p, rotation::mat_vec(g, rotation::sub(v, self.rest[j])));
                acc = rotation::add(acc, rotation::scale(moved, w));
            }
            for k in 0..3 {
                out.set(r, k, acc[k] + translation[k]);
            }
        }
        Ok(out)
    }
}

/// Average of both eyes' forward directions under the full joint chain,
/// normalized.
pub fn gaze_vector<T: Scalar>(theta: &[Vec3<T>; JOINT_COUNT]) -> Result<Vec3<T>, FaceModelError> {
    let head = rotation::mat_mul(
        &axis_angle_to_matrix(theta[Joint::Neck as usize]),
        &axis_angle_to_matrix(theta[Joint::Head as usize]),
    );
    let f = gaze_forward::<T>();
    let l = rotation::mat_vec(&head, rotate(theta[Joint::LeftEye as usize], f));
    let r = rotation::mat_vec(&head, rotate(theta[Joint::RightEye as usize], f));
    let avg = rotation::scale(rotation::add(l, r), T::lit(0.5));
    let n = rotation::norm(avg);
    if n < T::lit(1e-9) {
        return Err(FaceModelError::DegenerateGaze(n.to_f64_lossy()));
    }
    Ok(rotation::scale(avg, T::one() / n))
}

/// One frame of generated parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionFrame<T> {
    pub expression: Vec<T>,
    pub rotation: [Vec3<T>; JOINT_COUNT],
    pub translation: Vec3<T>,
}

impl<T: Scalar> MotionFrame<T> {
    pub fn zeros() -> Self {
        Self {
            expression: vec![T::zero(); EXPRESSION_DIM],
            rotation: [[T::zero(); 3]; JOINT_COUNT],
            translation: [T::zero(); 3],
        }
    }

    /// Concatenation `(psi, theta, t)` of length [`MOTION_DIM`].
    pub fn to_vec(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(MOTION_DIM);
        v.extend_from_slice(&self.expression);
        for j in &self.rotation {
            v.extend_from_slice(j);
        }
        v.extend_from_slice(&self.translation);
        v
    }

    pub fn from_slice(v: &[T]) -> Result<Self, FaceModelError> {
        check_len("motion frame", MOTION_DIM, v.len())?;
        let mut rotation = [[T::zero(); 3]; JOINT_COUNT];
        for (j, r) in rotation.iter_mut().enumerate() {
            r.copy_from_slice(&v[ROT_OFFSET + 3 * j..ROT_OFFSET + 3 * j + 3]);
        }
        Ok(Self {
            expression: v[..EXPRESSION_DIM].to_vec(),
            rotation,
            translation: [v[TRANS_OFFSET], v[TRANS_OFFSET + 1], v[TRANS_OFFSET + 2]],
        })
    }
}

/// Per-participant animation track.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence<T> {
    frames: Vec<MotionFrame<T>>,
    fps: T,
    identity: Vec<T>,
}

pub const MOTION_MAGIC: &[u8; 4] = b"DYDM";
pub const MOTION_VERSION: u32 = 1;

impl<T: Scalar> MotionSequence<T> {
    pub fn new(frames: Vec<MotionFrame<T>>, fps: T, identity: Vec<T>) -> Result<Self, FaceModelError> {
        if frames.len() < 2 {
            return Err(FaceModelError::Sequence(format!(
                "need at least 2 frames, got {}",
                frames.len()
            )));
        }
        if !(fps > T::zero()) {
            return Err(FaceModelError::Sequence(format!("fps must be positive, got {fps}")));
        }
        check_len("identity coefficients", IDENTITY_DIM, identity.len())?;
        for f in &frames {
            check_len("expression", EXPRESSION_DIM, f.expression.len())?;
        }
        Ok(Self { frames, fps, identity })
    }

    /// Builds a track from an `[L, 78]` parameter matrix.
    pub fn from_matrix(m: &Tensor<T>, fps: T, identity: Vec<T>) -> Result<Self, FaceModelError> {
        check_len("motion matrix width", MOTION_DIM, m.cols())?;
        let frames = (0..m.rows())
            .map(|r| MotionFrame::from_slice(m.row(r)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(frames, fps, identity)
    }

    pub fn frames(&self) -> &[MotionFrame<T>] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [MotionFrame<T>] {
        &mut self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps(&self) -> T {
        self.fps
    }

    pub fn identity(&self) -> &[T] {
        &self.identity
    }

    pub fn duration_seconds(&self) -> T {
        T::from_usize_lossy(self.frames.len()) / self.fps
    }

    /// `[L, 78]` parameter matrix.
    pub fn to_matrix(&self) -> Tensor<T> {
        let data = self.frames.iter().flat_map(MotionFrame::to_vec).collect();
        Tensor::matrix(self.frames.len(), MOTION_DIM, data).expect("frame width")
    }

    pub fn translations(&self) -> Vec<Vec3<T>> {
        self.frames.iter().map(|f| f.translation).collect()
    }

    /// Posed mesh of every frame.
    pub fn posed_meshes(&self, basis: &FaceBasis<T>, rig: &Rig<T>) -> Result<Vec<Tensor<T>>, FaceModelError> {
        self.frames
            .iter()
            .map(|f| {
                let mesh = basis.synthesize_mesh(&self.identity, &f.expression)?;
                rig.pose_mesh(&mesh, &f.rotation, f.translation)
            })
            .collect()
    }

    /// Writes the `DYDM` motion file: magic, version, frame count, fps,
    /// block widths, identity, then frame-major little-endian f64 values.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), FaceModelError> {
        w.write_all(MOTION_MAGIC)?;
        w.write_all(&MOTION_VERSION.to_le_bytes())?;
        w.write_all(&(self.frames.len() as u32).to_le_bytes())?;
        w.write_all(&self.fps.to_f64_lossy().to_le_bytes())?;
        for d in [EXPRESSION_DIM, ROTATION_DIM, TRANSLATION_DIM, IDENTITY_DIM] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &b in &self.identity {
            w.write_all(&b.to_f64_lossy().to_le_bytes())?;
        }
        for f in &self.frames {
            for v in f.to_vec() {
                w.write_all(&v.to_f64_lossy().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, FaceModelError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MOTION_MAGIC {
            return Err(FaceModelError::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != MOTION_VERSION {
            return Err(FaceModelError::Format(format!("unsupported version {version}")));
        }
        let frames = read_u32(r)? as usize;
        let fps = T::lit(read_f64(r)?);
        let dims = [read_u32(r)?, read_u32(r)?, read_u32(r)?, read_u32(r)?];
        let expected = [EXPRESSION_DIM, ROTATION_DIM, TRANSLATION_DIM, IDENTITY_DIM].map(|d| d as u32);
        if dims != expected {
            return Err(FaceModelError::Format(format!(
                "block widths {dims:?}, expected {expected:?}"
            )));
        }
        let identity = (0..IDENTITY_DIM)
            .map(|_| read_f64(r).map(T::lit))
            .collect::<Result<Vec<_>, _>>()?;
        let mut out = Vec::with_capacity(frames);
        let mut buf = vec![T::zero(); MOTION_DIM];
        for _ in 0..frames {
            for b in buf.iter_mut() {
                *b = T::lit(read_f64(r)?);
            }
            out.push(MotionFrame::from_slice(&buf)?);
        }
        Self::new(out, fps, identity)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, FaceModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, FaceModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// First-frame translation and per-frame offsets from it.
pub fn delta_translation<T: Scalar>(track: &[Vec3<T>]) -> (Vec3<T>, Vec<Vec3<T>>) {
    let t0 = track.first().copied().unwrap_or([T::zero(); 3]);
    let deltas = track.iter().map(|&t| rotation::sub(t, t0)).collect();
    (t0, deltas)
}

/// Inverse of [`delta_translation`].
pub fn apply_delta_translation<T: Scalar>(t0: Vec3<T>, deltas: &[Vec3<T>]) -> Vec<Vec3<T>> {
    deltas.iter().map(|&d| rotation::add(d, t0)).collect()
}
