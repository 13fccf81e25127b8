//! Rotations, rigid transforms, projective points and the pinhole projection.
//!
//! Every camera is calibrated and normalized. The projection matrix is fixed to
//!
//! ```text
//!     [ -1  0  0  0 ]
//! P = [  0 -1  0  0 ]
//!     [  0  0  1  0 ]
//! ```
//!
//! so a point `(x, y, z)` in front of the camera (`z > 0`) lands on the image
//! plane at `(-x/z, -y/z)`.

use nalgebra::{DVector, Matrix3, Matrix3x4, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this angle the Rodrigues coefficients switch to their Taylor series.
const SMALL_ANGLE: f64 = 1e-8;

/// `[v]×`, the matrix with `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// A proper rotation stored as its full 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix, checking orthonormality and handedness to `tol`.
    pub fn from_matrix(m: Matrix3<f64>, tol: f64) -> Result<Self> {
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if !(ortho <= tol && (det - 1.0).abs() <= tol) {
            return Err(Error::NotARotation { orthogonality: ortho, determinant: det });
        }
        Ok(Rotation(m))
    }

    /// Projects a nearly orthonormal matrix onto SO(3) through its SVD.
    pub fn orthonormalize(m: &Matrix3<f64>) -> Result<Self> {
        let svd = m.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return Err(Error::NotARotation { orthogonality: f64::NAN, determinant: f64::NAN }),
        };
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut fix = Matrix3::identity();
            fix[(2, 2)] = -1.0;
            r = u * fix * v_t;
        }
        Ok(Rotation(r))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Rotation vector `ω` with `exp_so3(ω) == self`, `‖ω‖ ∈ [0, π]`.
    pub fn log(&self) -> Vector3<f64> {
        // via the quaternion: the skew part of R vanishes at a half turn, the
        // quaternion's vector part does not
        let r = nalgebra::Rotation3::from_matrix_unchecked(self.0);
        nalgebra::UnitQuaternion::from_rotation_matrix(&r).scaled_axis()
    }

    /// Rotation by `angle` radians about the camera-frame `y` axis.
    pub fn about_y(angle: f64) -> Rotation {
        exp_so3(&Vector3::new(0.0, angle, 0.0))
    }
}

/// Rodrigues' formula. `‖ω‖` is the rotation angle about `ω/‖ω‖`.
pub fn exp_so3(omega: &Vector3<f64>) -> Rotation {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = skew(omega);
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// A rigid transform `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.apply(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt.apply(&self.translation)) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.apply(p) + self.translation
    }

    /// The 4×4 homogeneous matrix of this transform.
    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// A point of projective space, defined up to a non-zero scale.
#[derive(Debug, Clone, PartialEq)]
pub struct HomogeneousPoint(DVector<f64>);

impl HomogeneousPoint {
    pub fn new(coords: DVector<f64>) -> Result<Self> {
        if coords.len() < 2 || coords.iter().all(|c| *c == 0.0) {
            return Err(Error::ZeroHomogeneous);
        }
        Ok(Self(coords))
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn is_at_infinity(&self) -> bool {
        self.0[self.0.len() - 1] == 0.0
    }
}

/// Appends a unit last coordinate.
pub fn promote(x: &[f64]) -> HomogeneousPoint {
    let n = x.len();
    HomogeneousPoint(DVector::from_fn(n + 1, |i, _| if i < n { x[i] } else { 1.0 }))
}

/// Divides through by the last coordinate.
pub fn demote(x: &HomogeneousPoint) -> Result<Vec<f64>> {
    let n = x.0.len() - 1;
    let w = x.0[n];
    if w == 0.0 {
        return Err(Error::PointAtInfinity);
    }
    Ok(x.0.rows(0, n).iter().map(|c| c / w).collect())
}

/// The fixed camera projection matrix shared by every camera of the cluster.
pub fn projection_matrix() -> Matrix3x4<f64> {
    Matrix3x4::new(-1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0)
}

/// Normalized image-plane coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
}

impl ImagePoint {
    pub fn new(u: f64, v: f64) -> Result<Self> {
        if !(u.is_finite() && v.is_finite()) {
            return Err(Error::NonFinite("image point"));
        }
        Ok(Self { u, v })
    }

    pub fn to_vector(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }
}

/// Projects a camera-frame point, `(x, y, z) ↦ (-x/z, -y/z)`.
pub fn project_pinhole(p: &Vector3<f64>) -> Result<ImagePoint> {
    if !(p.z > 0.0) || !p.z.is_finite() {
        return Err(Error::BehindCamera { z: p.z });
    }
    ImagePoint::new(-p.x / p.z, -p.y / p.z)
}

/// Azimuth/altitude bearing `(φ, θ)` in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bearing {
    pub phi: f64,
    pub theta: f64,
}

impl Bearing {
    pub fn new(phi: f64, theta: f64) -> Self {
        Self { phi, theta }
    }

    pub fn in_field_of_view(&self) -> bool {
        let half = std::f64::consts::FRAC_PI_2;
        self.phi.abs() < half && self.theta.abs() < half
    }
}

/// `(sin φ cos θ, -sin θ, cos φ cos θ)`.
pub fn bearing_to_unit(mu: &Bearing) -> Result<Vector3<f64>> {
    if !mu.in_field_of_view() {
        return Err(Error::BearingOutsideFov { phi: mu.phi, theta: mu.theta });
    }
    let (sp, cp) = mu.phi.sin_cos();
    let (st, ct) = mu.theta.sin_cos();
    Ok(Vector3::new(sp * ct, -st, cp * ct))
}

/// Inverse of [`bearing_to_unit`] for unit vectors with positive `z`.
pub fn unit_to_bearing(p: &Vector3<f64>) -> Result<Bearing> {
    if !(p.z > 0.0) {
        return Err(Error::BehindCamera { z: p.z });
    }
    let norm = p.norm();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::NotUnit(norm));
    }
    let phi = p.x.atan2(p.z);
    let theta = (-p.y).atan2(p.x.hypot(p.z));
    Ok(Bearing { phi, theta })
}

/// Bearing angles of an arbitrary (not necessarily unit) direction with `z > 0`.
pub fn direction_to_bearing(p: &Vector3<f64>) -> Result<Bearing> {
    if !(p.z > 0.0) {
        return Err(Error::BehindCamera { z: p.z });
    }
    Ok(Bearing { phi: p.x.atan2(p.z), theta: (-p.y).atan2(p.x.hypot(p.z)) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    /// Truncated power series of the matrix exponential.
    fn series_exp(k: &Matrix3<f64>, terms: usize) -> Matrix3<f64> {
        let mut sum = Matrix3::identity();
        let mut term = Matrix3::identity();
        for i in 1..terms {
            term = term * k / i as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn skew_basics() {
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
        let e = skew(&Vector3::x()) * Vector3::y();
        assert_eq!(e, Vector3::z());
        let k = skew(&Vector3::new(0.3, -1.2, 2.0));
        assert_eq!(k.transpose(), -k);
    }

    #[test]
    fn exp_so3_cases() {
        assert_eq!(exp_so3(&Vector3::zeros()), Rotation::identity());
        let r = exp_so3(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        assert_relative_eq!(r.apply(&Vector3::x()), Vector3::y(), epsilon = 1e-15);
    }

    #[test]
    fn exp_so3_small_angle_branch_is_continuous() {
        let w = Vector3::new(3e-9, -2e-9, 1e-9);
        let r = exp_so3(&w);
        let oracle = series_exp(&skew(&w), 40);
        assert_relative_eq!(*r.matrix(), oracle, epsilon = 1e-15);
    }

    #[test]
    fn rotation_log_round_trip() {
        let w = Vector3::new(0.4, -0.9, 1.3);
        assert_relative_eq!(exp_so3(&w).log(), w, epsilon = 1e-12);
    }

    #[test]
    fn rotation_log_at_half_turn() {
        for w in [Vector3::new(0.0, PI, 0.0), Vector3::new(PI, 0.0, 0.0), Vector3::new(1.0, -2.0, 2.0).normalize() * PI] {
            let r = exp_so3(&w);
            let back = exp_so3(&r.log());
            assert!((back.matrix() - r.matrix()).amax() < 1e-12, "{w}");
            assert_relative_eq!(r.log().norm(), PI, epsilon = 1e-12);
        }
        let flip = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, -1.0));
        let r = Rotation::from_matrix(flip, 1e-12).unwrap();
        assert!((exp_so3(&r.log()).matrix() - flip).amax() < 1e-12);
    }

    #[test]
    fn from_matrix_rejects_reflection() {
        let mut m = Matrix3::identity();
        m[(2, 2)] = -1.0;
        assert!(Rotation::from_matrix(m, 1e-9).is_err());
        assert!(Rotation::from_matrix(Matrix3::identity(), 1e-12).is_ok());
    }

    #[test]
    fn orthonormalize_recovers_rotation() {
        let r = exp_so3(&Vector3::new(0.2, 0.1, -0.3));
        let noisy = r.matrix() + Matrix3::from_element(1e-7);
        let fixed = Rotation::orthonormalize(&noisy).unwrap();
        assert!(Rotation::from_matrix(*fixed.matrix(), 1e-12).is_ok());
        assert_relative_eq!(*fixed.matrix(), *r.matrix(), epsilon = 1e-6);
    }

    #[test]
    fn transform_inverse_is_identity() {
        let t = RigidTransform::new(exp_so3(&Vector3::new(0.1, 0.5, -0.2)), Vector3::new(1.0, -2.0, 0.5));
        let id = t.compose(&t.inverse());
        assert_relative_eq!(id.to_homogeneous(), Matrix4::identity(), epsilon = 1e-12);
    }

    #[test]
    fn promote_demote() {
        assert_eq!(promote(&[1.0, 2.0, 3.0]).coords().as_slice(), &[1.0, 2.0, 3.0, 1.0]);
        let p = HomogeneousPoint::new(DVector::from_vec(vec![2.0, 4.0, 6.0, 2.0])).unwrap();
        assert_eq!(demote(&p).unwrap(), vec![1.0, 2.0, 3.0]);
        let inf = HomogeneousPoint::new(DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(inf.is_at_infinity());
        assert!(matches!(demote(&inf), Err(Error::PointAtInfinity)));
        assert!(HomogeneousPoint::new(DVector::zeros(4)).is_err());
    }

    #[test]
    fn pinhole_cases() {
        assert_eq!(project_pinhole(&Vector3::new(0.0, 0.0, 1.0)).unwrap(), ImagePoint { u: 0.0, v: 0.0 });
        assert_eq!(project_pinhole(&Vector3::new(1.0, 2.0, 2.0)).unwrap(), ImagePoint { u: -0.5, v: -1.0 });
        assert!(matches!(project_pinhole(&Vector3::new(1.0, 1.0, 0.0)), Err(Error::BehindCamera { .. })));
        assert!(project_pinhole(&Vector3::new(1.0, 1.0, -3.0)).is_err());
    }

    #[test]
    fn pinhole_agrees_with_projection_matrix() {
        let p = Vector3::new(0.3, -0.7, 2.5);
        let u = projection_matrix() * promote(p.as_slice()).coords().fixed_rows::<4>(0);
        let hp = HomogeneousPoint::new(DVector::from_column_slice(u.as_slice())).unwrap();
        let uv = demote(&hp).unwrap();
        let img = project_pinhole(&p).unwrap();
        assert_relative_eq!(img.u, uv[0], epsilon = 1e-15);
        assert_relative_eq!(img.v, uv[1], epsilon = 1e-15);
    }

    #[test]
    fn bearing_cases() {
        assert_eq!(bearing_to_unit(&Bearing::new(0.0, 0.0)).unwrap(), Vector3::z());
        let h = 2f64.sqrt() / 2.0;
        assert_relative_eq!(
            bearing_to_unit(&Bearing::new(FRAC_PI_4, 0.0)).unwrap(),
            Vector3::new(h, 0.0, h),
            epsilon = 1e-15
        );
        assert!(bearing_to_unit(&Bearing::new(FRAC_PI_2, 0.0)).is_err());
        assert!(bearing_to_unit(&Bearing::new(0.0, -PI)).is_err());
        assert_eq!(unit_to_bearing(&Vector3::z()).unwrap(), Bearing::new(0.0, 0.0));
        assert!(unit_to_bearing(&-Vector3::z()).is_err());
        assert!(unit_to_bearing(&Vector3::new(0.0, 0.0, 2.0)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
            (-r..r, -r..r, -r..r).prop_map(|(a, b, c)| Vector3::new(a, b, c))
        }

        fn in_fov() -> impl Strategy<Value = Bearing> {
            let lim = FRAC_PI_2 - 1e-3;
            (-lim..lim, -lim..lim).prop_map(|(p, t)| Bearing::new(p, t))
        }

        proptest! {
            #[test]
            fn skew_matches_cross(v in vec3(10.0), w in vec3(10.0)) {
                let d = skew(&v) * w - v.cross(&w);
                prop_assert!(d.amax() <= 1e-15 * (1.0 + v.amax() * w.amax()));
                prop_assert!((skew(&v) * w + skew(&w) * v).amax() <= 1e-13);
            }

            #[test]
            fn exp_matches_series(w in vec3(2.0)) {
                let oracle = series_exp(&skew(&w), 40);
                prop_assert!((exp_so3(&w).matrix() - oracle).amax() < 1e-12);
            }

            #[test]
            fn exp_inverse(w in vec3(PI / 3f64.sqrt())) {
                let r = exp_so3(&w).compose(&exp_so3(&-w));
                prop_assert!((r.matrix() - Matrix3::identity()).amax() < 1e-12);
                let m = exp_so3(&w);
                prop_assert!(Rotation::from_matrix(*m.matrix(), 1e-12).is_ok());
            }

            #[test]
            fn exp_of_log_is_identity_map(w in vec3(PI / 3f64.sqrt())) {
                let r = exp_so3(&w);
                prop_assert!((exp_so3(&r.log()).matrix() - r.matrix()).amax() < 1e-12);
            }

            #[test]
            fn pinhole_scale_invariant(p in vec3(5.0), z in 0.1f64..10.0, lambda in 0.01f64..100.0) {
                let p = Vector3::new(p.x, p.y, z);
                let a = project_pinhole(&p).unwrap();
                let b = project_pinhole(&(p * lambda)).unwrap();
                prop_assert!((a.u - b.u).abs() <= 1e-12 * (1.0 + a.u.abs()));
                prop_assert!((a.v - b.v).abs() <= 1e-12 * (1.0 + a.v.abs()));
            }

            #[test]
            fn bearing_unit_and_round_trip(mu in in_fov()) {
                let p = bearing_to_unit(&mu).unwrap();
                prop_assert!((p.norm() - 1.0).abs() <= 1e-15);
                prop_assert!(p.z > 0.0);
                let back = bearing_to_unit(&unit_to_bearing(&p).unwrap()).unwrap();
                prop_assert!((back - p).amax() <= 1e-12);
            }

            #[test]
            fn demote_scale_invariant(x in vec3(10.0), lambda in 0.1f64..10.0, neg in any::<bool>()) {
                let lambda = if neg { -lambda } else { lambda };
                let h = promote(x.as_slice());
                let scaled = HomogeneousPoint::new(h.coords() * lambda).unwrap();
                let a = demote(&scaled).unwrap();
                for i in 0..3 {
                    prop_assert!((a[i] - x[i]).abs() <= 1e-12 * (1.0 + x[i].abs()));
                }
            }
        }
    }
}
