//! Unit-quaternion primitives for the S³ blocks of a product manifold.
//!
//! Quaternions are stored as `[w, x, y, z]` with the scalar part first.
//! Tangent coordinates are 3-vector rotation vectors (axis × angle), so the
//! geodesic distance between two orientations equals their relative rotation
//! angle. Tangent vectors use the body-frame (right) convention:
//! `Exp_q(v) = q ⊗ exp(v)` and `Log_q(y) = log(q⁻¹ ⊗ y)`.

/// Tolerance below which the relative rotation counts as a π rotation and
/// the cut-locus tie-break applies.
pub const CUT_LOCUS_EPS: f64 = 1e-9;

pub fn mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Inverse of a unit quaternion.
pub fn conjugate(q: &[f64; 4]) -> [f64; 4] {
    [q[0], -q[1], -q[2], -q[3]]
}

pub fn norm(q: &[f64; 4]) -> f64 {
    q.iter().map(|c| c * c).sum::<f64>().sqrt()
}

pub fn normalize(q: &[f64; 4]) -> [f64; 4] {
    let n = norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Resolve the S³ double cover: scalar part ≥ 0, and if the scalar part is
/// zero the first nonzero component is made positive.
pub fn canonicalize(q: &[f64; 4]) -> [f64; 4] {
    let flip = if q[0] != 0.0 {
        q[0] < 0.0
    } else if q[1] != 0.0 {
        q[1] < 0.0
    } else if q[2] != 0.0 {
        q[2] < 0.0
    } else {
        q[3] < 0.0
    };
    if flip {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        *q
    }
}

/// Rotation vector → unit quaternion.
pub fn exp(v: &[f64; 3]) -> [f64; 4] {
    let angle = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let half = 0.5 * angle;
    // sin(θ/2)/θ, series for small angles
    let k = if angle < 1e-8 {
        0.5 - angle * angle / 48.0
    } else {
        half.sin() / angle
    };
    [half.cos(), k * v[0], k * v[1], k * v[2]]
}

/// Unit quaternion → rotation vector of norm ≤ π.
///
/// The sign of `q` is resolved first, so the short geodesic is always taken.
/// At the cut locus (rotation by exactly π within [`CUT_LOCUS_EPS`]) the axis
/// sign is canonicalized so the result is deterministic.
pub fn log(q: &[f64; 4]) -> [f64; 3] {
    let q = canonicalize(&normalize(q));
    let vec_norm = (q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if vec_norm < 1e-14 {
        return [0.0, 0.0, 0.0];
    }
    if q[0].abs() < CUT_LOCUS_EPS {
        // π rotation: axis defined up to sign; pick first nonzero component positive.
        let mut axis = [q[1] / vec_norm, q[2] / vec_norm, q[3] / vec_norm];
        let flip = if axis[0] != 0.0 {
            axis[0] < 0.0
        } else if axis[1] != 0.0 {
            axis[1] < 0.0
        } else {
            axis[2] < 0.0
        };
        if flip {
            axis = [-axis[0], -axis[1], -axis[2]];
        }
        return [
            std::f64::consts::PI * axis[0],
            std::f64::consts::PI * axis[1],
            std::f64::consts::PI * axis[2],
        ];
    }
    let angle = 2.0 * vec_norm.atan2(q[0]);
    let k = angle / vec_norm;
    [k * q[1], k * q[2], k * q[3]]
}

/// Rotation matrix of a unit quaternion.
pub fn rotation_matrix(q: &[f64; 4]) -> [[f64; 3]; 3] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

pub fn rotate(q: &[f64; 4], v: &[f64; 3]) -> [f64; 3] {
    let m = rotation_matrix(q);
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Exp map at `base` in body-frame coordinates.
pub fn exp_at(base: &[f64; 4], v: &[f64; 3]) -> [f64; 4] {
    canonicalize(&normalize(&mul(base, &exp(v))))
}

/// Log map at `base` in body-frame coordinates.
pub fn log_at(base: &[f64; 4], y: &[f64; 4]) -> [f64; 3] {
    log(&mul(&conjugate(base), y))
}

/// Parallel transport of the body-frame tangent `v` from `from` to `to`
/// along the connecting geodesic: rotate by half the relative rotation.
pub fn transport(from: &[f64; 4], to: &[f64; 4], v: &[f64; 3]) -> [f64; 3] {
    let u = log_at(from, to);
    let half_back = exp(&[-0.5 * u[0], -0.5 * u[1], -0.5 * u[2]]);
    rotate(&half_back, v)
}

/// The 3×3 matrix of [`transport`] as a linear map.
pub fn transport_matrix(from: &[f64; 4], to: &[f64; 4]) -> [[f64; 3]; 3] {
    let u = log_at(from, to);
    rotation_matrix(&exp(&[-0.5 * u[0], -0.5 * u[1], -0.5 * u[2]]))
}

pub fn identity() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn exp_log_roundtrip_identity() {
        let v = [0.3, -0.4, 0.2];
        let q = exp(&v);
        assert!(close(&log(&q), &v, 1e-12));
    }

    #[test]
    fn exp_matches_axis_angle_oracle() {
        // Axis-angle construction: q = [cos(θ/2), sin(θ/2)·n].
        let axis = [1.0 / 3.0_f64.sqrt(); 3];
        let theta = 1.7;
        let v = [axis[0] * theta, axis[1] * theta, axis[2] * theta];
        let q = exp(&v);
        let expected = [
            (theta / 2.0).cos(),
            (theta / 2.0).sin() * axis[0],
            (theta / 2.0).sin() * axis[1],
            (theta / 2.0).sin() * axis[2],
        ];
        assert!(close(&q, &expected, 1e-12));
    }

    #[test]
    fn log_takes_short_geodesic() {
        // A rotation by 1.9π equals a rotation by 0.1π about the flipped axis.
        let v = [1.9 * PI, 0.0, 0.0];
        let q = exp(&v);
        let back = log(&q);
        assert!((back[0] + 0.1 * PI).abs() < 1e-9);
    }

    #[test]
    fn cut_locus_is_deterministic() {
        let q = exp(&[0.0, PI, 0.0]);
        let v = log(&q);
        assert!((v[1] - PI).abs() < 1e-9);
        // Flipping the representative quaternion must not change the answer.
        let neg = [-q[0], -q[1], -q[2], -q[3]];
        assert!(close(&log(&neg), &v, 1e-12));
    }

    #[test]
    fn transport_preserves_norm() {
        let p = exp(&[0.2, 0.1, -0.3]);
        let q = exp(&[-0.5, 0.9, 0.4]);
        let v = [0.3, -0.2, 0.7];
        let t = transport(&p, &q, &v);
        let n0: f64 = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        let n1: f64 = t.iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!((n0 - n1).abs() < 1e-12);
    }

    #[test]
    fn transport_preserves_geodesic_velocity() {
        let p = exp(&[0.4, -0.1, 0.2]);
        let u = [0.3, 0.5, -0.2];
        let q = exp_at(&p, &u);
        let t = transport(&p, &q, &u);
        assert!(close(&t, &u, 1e-12));
    }
}
