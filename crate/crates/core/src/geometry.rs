//! Rigid-body geometry shared by every stage of the pipeline.
//!
//! Poses are stored as a unit quaternion plus a translation. Optimizers work
//! in a 6-dimensional tangent space ordered `[rotation(3), translation(3)]`;
//! see [`Se3Pose::perturb`] for the local parameterization they use.
//!
//! Frame convention: x forward, y left, z up. The sensor frame is the body
//! frame.

use nalgebra::{Matrix3, Matrix3x6, Matrix4, SymmetricEigen, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Element of the tangent space: axis-angle rotation (radians) and a
/// translation (meters).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub rotation: Vec3,
    pub translation: Vec3,
}

impl Twist {
    pub fn new(rotation: Vec3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rotation: Vec3::new(v[0], v[1], v[2]),
            translation: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let r = &self.rotation;
        let t = &self.translation;
        Vector6::new(r.x, r.y, r.z, t.x, t.y, t.z)
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// Rigid transform `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vec3,
}

impl Default for Se3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Left Jacobian of SO(3) (the `V` matrix of the SE(3) exponential).
fn so3_left_jacobian(omega: &Vec3) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let w = skew(omega);
    let (a, b) = if theta2 < 1e-10 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + w * a + w * w * b
}

fn so3_left_jacobian_inv(omega: &Vec3) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let w = skew(omega);
    let c = if theta2 < 1e-10 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    Matrix3::identity() - w * 0.5 + w * w * c
}

impl Se3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a pose, renormalizing the quaternion.
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation: UnitQuaternion::new_normalize(rotation.into_inner()),
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    pub fn from_rotation_matrix(rotation: &Matrix3<f64>, translation: Vec3) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    /// Rotation about `axis` by `angle` radians, no translation.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        Self::new(
            UnitQuaternion::from_scaled_axis(axis.normalize() * angle),
            Vec3::zeros(),
        )
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::z(), angle)
    }

    /// Builds a pose from the `tx ty tz qx qy qz qw` layout.
    pub fn from_xyz_quat(t: [f64; 3], q: [f64; 4]) -> Self {
        let quat = nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]);
        Self::new(
            UnitQuaternion::new_normalize(quat),
            Vec3::new(t[0], t[1], t[2]),
        )
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Rotation angle in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Se3Pose) -> Se3Pose {
        Se3Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Se3Pose {
        let inv = self.rotation.inverse();
        Se3Pose::new(inv, -(inv * self.translation))
    }

    /// Relative transform `self⁻¹ ∘ other`.
    pub fn between(&self, other: &Se3Pose) -> Se3Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// SE(3) exponential.
    pub fn exp(twist: &Twist) -> Se3Pose {
        let rot = UnitQuaternion::from_scaled_axis(twist.rotation);
        let v = so3_left_jacobian(&twist.rotation);
        Se3Pose::new(rot, v * twist.translation)
    }

    /// SE(3) logarithm. Exact inverse of [`Se3Pose::exp`] for angles below π.
    pub fn log(&self) -> Twist {
        let omega = self.rotation.scaled_axis();
        let v_inv = so3_left_jacobian_inv(&omega);
        Twist::new(omega, v_inv * self.translation)
    }

    /// Optimizer retraction: rotation is left-multiplied by `Exp(δ.rotation)`
    /// and the translation is shifted additively by `δ.translation`.
    ///
    /// The translation update never mixes with the rotation update, so a
    /// direction the residuals cannot observe receives exactly zero change.
    pub fn perturb(&self, delta: &Twist) -> Se3Pose {
        Se3Pose::new(
            UnitQuaternion::from_scaled_axis(delta.rotation) * self.rotation,
            self.translation + delta.translation,
        )
    }

    /// Jacobian of `perturb(δ).transform_point(x)` with respect to δ at δ = 0.
    pub fn transform_point_jacobian(&self, x: &Vec3) -> Matrix3x6<f64> {
        let rx = self.rotation * x;
        let mut j = Matrix3x6::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&rx)));
        j.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&Matrix3::identity());
        j
    }

    /// Translation distance and rotation angle between two poses.
    pub fn distance_to(&self, other: &Se3Pose) -> (f64, f64) {
        let rel = self.between(other);
        (rel.translation.norm(), rel.rotation_angle())
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
    }
}

/// Closed-form weighted rigid alignment: the pose `(R, T)` minimizing
/// `Σ wₙ ‖dstₙ − (R·srcₙ + T)‖²`.
///
/// Fails when the weighted source covariance has rank below 2.
pub fn weighted_rigid_align(
    src: &[Vec3],
    dst: &[Vec3],
    weights: &[f64],
) -> Result<Se3Pose, GeometryError> {
    check_inputs(src, dst, weights)?;
    let stats = WeightedStats::new(src, dst, weights)?;
    let eig = SymmetricEigen::new(stats.src_cov);
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0].max(1e-300) || ev[1] < 1e-24 {
        return Err(GeometryError::DegenerateConfiguration(
            "weighted source points are collinear or coincident".into(),
        ));
    }
    Ok(stats.solve())
}

/// Same objective as [`weighted_rigid_align`] but accepts rank-deficient
/// inputs, returning one of the optimal transforms. Used for trajectory
/// alignment where straight-line paths are common.
pub fn rigid_align_any(
    src: &[Vec3],
    dst: &[Vec3],
    weights: &[f64],
) -> Result<Se3Pose, GeometryError> {
    check_inputs(src, dst, weights)?;
    Ok(WeightedStats::new(src, dst, weights)?.solve())
}

fn check_inputs(src: &[Vec3], dst: &[Vec3], weights: &[f64]) -> Result<(), GeometryError> {
    if src.len() != dst.len() || src.len() != weights.len() {
        return Err(GeometryError::InvalidInput(format!(
            "length mismatch: {} src, {} dst, {} weights",
            src.len(),
            dst.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(GeometryError::InvalidInput(
            "weights must be finite and nonnegative".into(),
        ));
    }
    Ok(())
}

struct WeightedStats {
    src_centroid: Vec3,
    dst_centroid: Vec3,
    src_cov: Matrix3<f64>,
    cross: Matrix3<f64>,
}

impl WeightedStats {
    fn new(src: &[Vec3], dst: &[Vec3], weights: &[f64]) -> Result<Self, GeometryError> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(GeometryError::DegenerateConfiguration(
                "total weight is zero".into(),
            ));
        }
        let mut cs = Vec3::zeros();
        let mut cd = Vec3::zeros();
        for ((s, d), w) in src.iter().zip(dst).zip(weights) {
            cs += s * *w;
            cd += d * *w;
        }
        cs /= total;
        cd /= total;
        let mut src_cov = Matrix3::zeros();
        let mut cross = Matrix3::zeros();
        for ((s, d), w) in src.iter().zip(dst).zip(weights) {
            if *w == 0.0 {
                continue;
            }
            let a = s - cs;
            let b = d - cd;
            src_cov += a * a.transpose() * (*w / total);
            cross += a * b.transpose() * (*w / total);
        }
        Ok(Self {
            src_centroid: cs,
            dst_centroid: cd,
            src_cov,
            cross,
        })
    }

    fn solve(&self) -> Se3Pose {
        let svd = self.cross.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let v = v_t.transpose();
        let mut d = Matrix3::identity();
        if (v * u.transpose()).determinant() < 0.0 {
            // flip the direction of the smallest singular value
            let smallest = svd
                .singular_values
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(2);
            d[(smallest, smallest)] = -1.0;
        }
        let r = v * d * u.transpose();
        let t = self.dst_centroid - r * self.src_centroid;
        Se3Pose::from_rotation_matrix(&r, t)
    }
}
