use crate::numerics::{cos_ratio, sin_ratio};
use crate::scalar::Scalar;

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

/// Clamps an axis-angle vector so its magnitude does not exceed pi.
pub fn clamp_axis_angle<T: Scalar>(w: Vec3<T>) -> Vec3<T> {
    let theta = norm(w);
    if theta > T::PI() {
        let s = T::PI() / theta;
        [w[0] * s, w[1] * s, w[2] * s]
    } else {
        w
    }
}

/// Closed-form exponential map `I + A [w]x + B [w]x^2` with
/// `A = sin(t)/t`, `B = (1 - cos t)/t^2`.
pub fn axis_angle_to_matrix<T: Scalar>(w: Vec3<T>) -> Mat3<T> {
    let w = clamp_axis_angle(w);
    let a2 = dot(w, w);
    let a = sin_ratio(a2);
    let b = cos_ratio(a2);
    let k = skew(w);
    let k2 = mat_mul(&k, &k);
    let mut r = identity();
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Rotates `v` by axis-angle `w` without forming the matrix.
pub fn rotate<T: Scalar>(w: Vec3<T>, v: Vec3<T>) -> Vec3<T> {
    mat_vec(&axis_angle_to_matrix(w), v)
}

pub fn identity<T: Scalar>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn skew<T: Scalar>(w: Vec3<T>) -> Mat3<T> {
    let z = T::zero();
    [[z, -w[2], w[1]], [w[2], z, -w[0]], [-w[1], w[0], z]]
}

pub fn mat_mul<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

pub fn mat_vec<T: Scalar>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn dot<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm<T: Scalar>(a: Vec3<T>) -> T {
    dot(a, a).sqrt()
}

pub fn add<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale<T: Scalar>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}
