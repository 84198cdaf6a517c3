//! Rotation-group primitives shared by the dynamics, controller and bridge.
//!
//! Conventions: ZYX (yaw-pitch-roll) Euler angles, `R` maps body vectors into
//! the world frame, world frame is NED.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance on `|M + Mᵀ|` entries accepted by [`vee`].
pub const SKEW_TOLERANCE: f64 = 1e-9;

const GIMBAL_LOCK_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum Se3Error {
    #[error("matrix is not skew-symmetric (max |M + Mᵀ| entry = {0:e})")]
    NotSkew(f64),
    #[error("matrix is too far from SO(3) to reproject (determinant {0:e})")]
    NonPositiveDeterminant(f64),
    #[error("matrix contains non-finite entries")]
    NonFinite,
}

/// Roll, pitch, yaw in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerAngles {
    pub phi: f64,
    pub theta: f64,
    pub psi: f64,
}

impl EulerAngles {
    pub const fn new(phi: f64, theta: f64, psi: f64) -> Self {
        Self { phi, theta, psi }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.phi, self.theta, self.psi]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

/// Result of [`euler_from_rotation`]. `gimbal_lock` is set when pitch sits at
/// ±π/2; roll is then pinned to zero and the remaining rotation lands in yaw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerDecomposition {
    pub angles: EulerAngles,
    pub gimbal_lock: bool,
}

/// The skew-symmetric matrix `v̂` with `v̂ w = v × w`.
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`]. Reads `(M₃₂, M₁₃, M₂₁)`.
pub fn vee(m: &Mat3) -> Result<Vec3, Se3Error> {
    let sym = m + m.transpose();
    let worst = sym.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
    if !worst.is_finite() {
        return Err(Se3Error::NonFinite);
    }
    if worst > SKEW_TOLERANCE {
        return Err(Se3Error::NotSkew(worst));
    }
    Ok(Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)]))
}

/// Body-to-world rotation for ZYX angles, written out entry by entry.
pub fn rotation_from_euler(e: &EulerAngles) -> Mat3 {
    let (sf, cf) = e.phi.sin_cos();
    let (st, ct) = e.theta.sin_cos();
    let (sp, cp) = e.psi.sin_cos();
    Mat3::new(
        ct * cp,
        sf * st * cp - cf * sp,
        cf * st * cp + sf * sp,
        ct * sp,
        sf * st * sp + cf * cp,
        cf * st * sp - sf * cp,
        -st,
        sf * ct,
        cf * ct,
    )
}

pub fn euler_from_rotation(r: &Mat3) -> EulerDecomposition {
    let r31 = r[(2, 0)].clamp(-1.0, 1.0);
    let theta = -r31.asin();
    if r31.abs() > 1.0 - GIMBAL_LOCK_MARGIN {
        // phi := 0. With theta = ∓π/2 the top-right 2x2 block only depends on
        // psi ∓ phi, so all of it goes into psi.
        let theta = if r31 < 0.0 { FRAC_PI_2 } else { -FRAC_PI_2 };
        let psi = (-r[(0, 1)]).atan2(r[(1, 1)]);
        return EulerDecomposition {
            angles: EulerAngles::new(0.0, theta, wrap_angle(psi)),
            gimbal_lock: true,
        };
    }
    let phi = r[(2, 1)].atan2(r[(2, 2)]);
    let psi = r[(1, 0)].atan2(r[(0, 0)]);
    EulerDecomposition {
        angles: EulerAngles::new(wrap_angle(phi), theta, wrap_angle(psi)),
        gimbal_lock: false,
    }
}

/// Nearest rotation matrix (orthonormal polar factor) of `m`.
///
/// Iterates `M ← ½(M + M⁻ᵀ)`, which converges quadratically for matrices
/// close to SO(3).
pub fn reproject_so3(m: &Mat3) -> Result<Mat3, Se3Error> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Se3Error::NonFinite);
    }
    let mut x = *m;
    for _ in 0..64 {
        let Some(inv) = x.try_inverse() else {
            return Err(Se3Error::NonPositiveDeterminant(x.determinant()));
        };
        let next = 0.5 * (x + inv.transpose());
        let delta = (next - x).norm();
        x = next;
        if delta < 1e-15 {
            break;
        }
    }
    let det = x.determinant();
    if det <= 0.0 || !det.is_finite() {
        return Err(Se3Error::NonPositiveDeterminant(det));
    }
    Ok(x)
}

/// Max entry of `|RᵀR − I|` plus `|det R − 1|`.
pub fn orthonormality_defect(r: &Mat3) -> f64 {
    let e = r.transpose() * r - Mat3::identity();
    let worst = e.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
    worst.max((r.determinant() - 1.0).abs())
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Rodrigues formula for `exp(hat(w))`.
pub fn exp_so3(w: &Vec3) -> Mat3 {
    let angle = w.norm();
    let k = hat(w);
    if angle < 1e-8 {
        return Mat3::identity() + k + 0.5 * k * k;
    }
    let a = angle.sin() / angle;
    let b = (1.0 - angle.cos()) / (angle * angle);
    Mat3::identity() + a * k + b * k * k
}

/// Rotation vector `w` with `exp_so3(w) = r`, angle in [0, π].
pub fn log_so3(r: &Mat3) -> Vec3 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = cos.acos();
    let skew = Vec3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    if angle < 1e-8 {
        return 0.5 * skew;
    }
    if PI - angle < 1e-6 {
        // Near π the skew part vanishes; recover the axis from R + I.
        let b = (r + Mat3::identity()) * 0.5;
        let col = (0..3)
            .max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)]))
            .unwrap_or(0);
        let mut axis: Vec3 = b.column(col).into();
        axis /= axis.norm();
        if skew.dot(&axis) < 0.0 {
            axis = -axis;
        }
        return angle * axis;
    }
    angle / (2.0 * angle.sin()) * skew
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rot_x(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
    }
    fn rot_y(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
    }
    fn rot_z(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn hat_examples() {
        assert_eq!(hat(&Vec3::zeros()), Mat3::zeros());
        let m = hat(&Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(m, Mat3::new(0.0, -3.0, 2.0, 3.0, 0.0, -1.0, -2.0, 1.0, 0.0));
        let cross = hat(&Vec3::x()) * Vec3::y();
        assert_eq!(cross, Vec3::z());
    }

    #[test]
    fn vee_examples() {
        assert_eq!(vee(&hat(&Vec3::new(1.0, 2.0, 3.0))).unwrap(), Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(vee(&Mat3::zeros()).unwrap(), Vec3::zeros());
        let m = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(vee(&m).unwrap(), Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn vee_rejects_symmetric_part() {
        let mut m = hat(&Vec3::new(1.0, 2.0, 3.0));
        m[(0, 1)] += 1e-6;
        assert!(matches!(vee(&m), Err(Se3Error::NotSkew(_))));
        assert!(matches!(vee(&Mat3::identity()), Err(Se3Error::NotSkew(_))));
    }

    #[test]
    fn euler_examples() {
        assert_eq!(rotation_from_euler(&EulerAngles::default()), Mat3::identity());
        let yaw = rotation_from_euler(&EulerAngles::new(0.0, 0.0, FRAC_PI_2));
        let expected = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(yaw, expected, epsilon = 1e-15);

        let e = EulerAngles::new(PI / 6.0, -PI / 4.0, PI / 3.0);
        let oracle = rot_z(e.psi) * rot_y(e.theta) * rot_x(e.phi);
        assert_relative_eq!(rotation_from_euler(&e), oracle, epsilon = 1e-15);
    }

    #[test]
    fn euler_inverse_examples() {
        let d = euler_from_rotation(&Mat3::identity());
        assert_eq!(d.angles, EulerAngles::default());
        assert!(!d.gimbal_lock);

        let e = EulerAngles::new(0.1, 0.2, 0.3);
        let d = euler_from_rotation(&rotation_from_euler(&e));
        assert_relative_eq!(d.angles.phi, 0.1, epsilon = 1e-9);
        assert_relative_eq!(d.angles.theta, 0.2, epsilon = 1e-9);
        assert_relative_eq!(d.angles.psi, 0.3, epsilon = 1e-9);
    }

    #[test]
    fn gimbal_lock_folds_roll_into_yaw() {
        // R31 = -1 at theta = π/2.
        let r = rotation_from_euler(&EulerAngles::new(0.4, FRAC_PI_2, 0.1));
        assert_relative_eq!(r[(2, 0)], -1.0, epsilon = 1e-15);
        let d = euler_from_rotation(&r);
        assert!(d.gimbal_lock);
        assert_eq!(d.angles.phi, 0.0);
        assert_eq!(d.angles.theta, FRAC_PI_2);
        let back = rotation_from_euler(&d.angles);
        assert_relative_eq!(back, r, epsilon = 1e-9);

        let r = rotation_from_euler(&EulerAngles::new(-0.3, -FRAC_PI_2, 0.7));
        let d = euler_from_rotation(&r);
        assert!(d.gimbal_lock);
        assert_eq!(d.angles.theta, -FRAC_PI_2);
        assert_relative_eq!(rotation_from_euler(&d.angles), r, epsilon = 1e-9);
    }

    #[test]
    fn reproject_examples() {
        let r = rotation_from_euler(&EulerAngles::new(0.3, -0.2, 1.1));
        assert_relative_eq!(reproject_so3(&r).unwrap(), r, epsilon = 1e-12);

        let scaled = Mat3::identity() * 1.001;
        assert_relative_eq!(reproject_so3(&scaled).unwrap(), Mat3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn reproject_matches_svd_polar_factor() {
        let r = rotation_from_euler(&EulerAngles::new(-0.7, 0.4, 2.0));
        let noise = Mat3::new(1.0, -2.0, 0.5, 0.3, 1.5, -1.0, -0.8, 0.2, 0.9) * 1e-4;
        let perturbed = r + noise;
        let out = reproject_so3(&perturbed).unwrap();

        let svd = perturbed.svd(true, true);
        let polar = svd.u.unwrap() * svd.v_t.unwrap();
        assert_relative_eq!(out, polar, epsilon = 1e-12);
        assert!(orthonormality_defect(&out) < 1e-12);
        assert!((out - r).norm() <= (perturbed - r).norm() + 1e-6);
    }

    #[test]
    fn reproject_rejects_reflections() {
        let reflect = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(matches!(
            reproject_so3(&reflect),
            Err(Se3Error::NonPositiveDeterminant(_))
        ));
        assert!(matches!(reproject_so3(&Mat3::zeros()), Err(Se3Error::NonPositiveDeterminant(_))));
        let mut bad = Mat3::identity();
        bad[(1, 1)] = f64::NAN;
        assert_eq!(reproject_so3(&bad), Err(Se3Error::NonFinite));
    }

    #[test]
    fn exp_log_round_trip() {
        for w in [
            Vec3::new(0.1, -0.2, 0.3),
            Vec3::new(0.0, 0.0, 3.0),
            Vec3::new(1e-10, 0.0, 0.0),
            Vec3::new(0.0, PI - 1e-9, 0.0),
        ] {
            let r = exp_so3(&w);
            assert!(orthonormality_defect(&r) < 1e-12);
            assert_relative_eq!(exp_so3(&log_so3(&r)), r, epsilon = 1e-7);
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_relative_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-15);
        assert_relative_eq!(wrap_angle(0.25), 0.25);
    }
}
