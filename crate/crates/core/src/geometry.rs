//! Rigid transforms in SE(3) and the small amount of Lie algebra the flow
//! solver and the Bayes filter need.

use nalgebra::{Matrix3, Vector3, Vector6};

/// Tangent vector of SE(3), ordered `(translation, rotation)`.
pub type Twist = Vector6<f64>;

// Below this squared angle the closed forms lose precision to cancellation.
const SERIES_THRESHOLD: f64 = 1e-6;

/// A proper rigid transform `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    /// Rotation about +z by `yaw` radians followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self::new(rot_z(yaw), translation)
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Rotation vector (axis times angle) of the rotation part.
    pub fn rotation_vector(&self) -> Vector3<f64> {
        so3_log(&self.rotation)
    }

    /// Logarithm map onto the twist `(rho, phi)` with `t = V(phi) rho`.
    pub fn log(&self) -> Twist {
        let phi = so3_log(&self.rotation);
        let rho = left_jacobian_inverse(&phi) * self.translation;
        Twist::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z)
    }

    /// Exponential map from a twist `(rho, phi)`.
    pub fn exp(xi: &Twist) -> Pose {
        let rho = Vector3::new(xi[0], xi[1], xi[2]);
        let phi = Vector3::new(xi[3], xi[4], xi[5]);
        Pose {
            rotation: so3_exp(&phi),
            translation: left_jacobian(&phi) * rho,
        }
    }

    /// Orthonormality error `||R^T R - I||_F`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }

    pub fn is_proper(&self, tol: f64) -> bool {
        self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
            && self.orthonormality_error() <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
    }

    /// Replace the rotation by its closest proper rotation (polar decomposition).
    pub fn orthonormalized(&self) -> Pose {
        Pose {
            rotation: nearest_rotation(&self.rotation),
            translation: self.translation,
        }
    }

    /// Row-major 3x4 `[R | t]`.
    #[rustfmt::skip]
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    pub fn from_row_major(v: &[f64; 12]) -> Pose {
        Pose {
            rotation: Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
            translation: Vector3::new(v[3], v[7], v[11]),
        }
    }
}

pub fn rot_z(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Closest rotation in the Frobenius sense, via SVD.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let (a, b) = if theta2 < SERIES_THRESHOLD {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let w = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    if theta < 1e-6 {
        // sin(theta)/theta ~ 1 - theta^2/6
        return w * (0.5 * (1.0 + theta * theta / 6.0));
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // Near pi the antisymmetric part vanishes; read the axis off R + I.
        let b = (r + Matrix3::identity()) * 0.5;
        let mut axis = Vector3::new(
            b[(0, 0)].max(0.0).sqrt(),
            b[(1, 1)].max(0.0).sqrt(),
            b[(2, 2)].max(0.0).sqrt(),
        );
        let i = axis.imax();
        for j in 0..3 {
            if j != i && b[(i, j)] < 0.0 {
                axis[j] = -axis[j];
            }
        }
        return axis.normalize() * theta;
    }
    w * (theta / (2.0 * theta.sin()))
}

fn left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let (a, b) = if theta2 < SERIES_THRESHOLD {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * a + k * k * b
}

fn left_jacobian_inverse(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let c = if theta2 < SERIES_THRESHOLD {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn twist_strategy(max_angle: f64) -> impl Strategy<Value = Twist> {
        (
            -5.0..5.0f64,
            -5.0..5.0f64,
            -5.0..5.0f64,
            -max_angle..max_angle,
            -max_angle..max_angle,
            -max_angle..max_angle,
        )
            .prop_map(|(a, b, c, d, e, f)| Twist::new(a, b, c, d, e, f))
    }

    #[test]
    fn identity_log_is_zero() {
        assert_eq!(Pose::identity().log(), Twist::zeros());
    }

    #[test]
    fn pure_translation_log() {
        let p = Pose::from_translation(Vector3::new(1.0, -2.0, 0.5));
        let xi = p.log();
        assert!((xi - Twist::new(1.0, -2.0, 0.5, 0.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn near_pi_rotation_log() {
        let phi = Vector3::new(0.0, 0.0, std::f64::consts::PI - 1e-9);
        let back = so3_log(&so3_exp(&phi));
        assert!((back - phi).norm() < 1e-6);
    }

    #[test]
    fn polar_fixes_scaled_rotation() {
        let r = rot_z(0.3) * 1.001;
        let fixed = nearest_rotation(&r);
        assert!((fixed - rot_z(0.3)).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn exp_log_round_trip(xi in twist_strategy(1.75)) {
            let back = Pose::exp(&xi).log();
            prop_assert!((back - xi).norm() < 1e-8);
        }

        #[test]
        fn inverse_composes_to_identity(xi in twist_strategy(3.1)) {
            let p = Pose::exp(&xi);
            let id = p.inverse().compose(&p);
            prop_assert!((id.rotation - Matrix3::identity()).norm() < 1e-9);
            prop_assert!(id.translation.norm() < 1e-9);
            prop_assert!(p.is_proper(1e-9));
        }
    }
}
