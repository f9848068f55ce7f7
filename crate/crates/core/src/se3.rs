//! Rigid camera poses and the continuous linear motion model inside one
//! exposure window.
//!
//! Rotations are unit quaternions, translations plain 3-vectors; a `Pose`
//! maps world points into the camera frame (`x_c = R x_w + t`). Pose
//! tangents are 6-vectors `[v; w]` (translation first) on the product
//! manifold SO(3) x R^3 with the left retraction
//! `R <- Exp(w) R, t <- t + v`. All gradients with respect to poses in
//! this crate are expressed in that convention.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, Vector6};

use crate::error::{EvsplatError, Result};

const SMALL_ANGLE_SQ: f64 = 1e-10;

/// Skew-symmetric matrix such that `hat(a) * b == a.cross(&b)`.
#[inline]
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SO(3) exponential map: rotation vector to unit quaternion.
pub fn exp_so3(w: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta_sq = w.norm_squared();
    if theta_sq < SMALL_ANGLE_SQ {
        // sin(t/2)/t = 1/2 - t^2/48 + ...
        let k = 0.5 - theta_sq / 48.0;
        let cos_half = 1.0 - theta_sq / 8.0 + theta_sq * theta_sq / 384.0;
        UnitQuaternion::new_normalize(Quaternion::new(cos_half, k * w.x, k * w.y, k * w.z))
    } else {
        let theta = theta_sq.sqrt();
        let half = 0.5 * theta;
        let k = half.sin() / theta;
        UnitQuaternion::new_normalize(Quaternion::new(
            half.cos(),
            k * w.x,
            k * w.y,
            k * w.z,
        ))
    }
}

/// SO(3) logarithm: unit quaternion to rotation vector with angle in
/// [0, pi]. The quaternion route stays well-conditioned at pi, where the
/// vector part carries the axis directly.
pub fn log_so3(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    // Canonicalize to non-negative scalar part (short arc).
    let (w, v) = {
        let qq = q.quaternion();
        if qq.w < 0.0 {
            (-qq.w, -Vector3::new(qq.i, qq.j, qq.k))
        } else {
            (qq.w, Vector3::new(qq.i, qq.j, qq.k))
        }
    };
    let vn = v.norm();
    if vn < 1e-9 {
        // angle/2 ~ vn, axis*angle ~ 2v * (1 + vn^2/(6 w^2)) / w
        return v * (2.0 / w.max(1e-300)) * (1.0 + vn * vn / (6.0 * w * w));
    }
    let angle = 2.0 * vn.atan2(w);
    v * (angle / vn)
}

fn so3_coeffs(theta_sq: f64) -> (f64, f64) {
    // c1 = (1 - cos t)/t^2, c2 = (t - sin t)/t^3
    if theta_sq < SMALL_ANGLE_SQ {
        (0.5 - theta_sq / 24.0, 1.0 / 6.0 - theta_sq / 120.0)
    } else {
        let theta = theta_sq.sqrt();
        (
            (1.0 - theta.cos()) / theta_sq,
            (theta - theta.sin()) / (theta_sq * theta),
        )
    }
}

/// Right Jacobian of SO(3).
pub fn right_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let (c1, c2) = so3_coeffs(w.norm_squared());
    let wx = hat(w);
    Matrix3::identity() - wx * c1 + wx * wx * c2
}

/// Left Jacobian of SO(3).
pub fn left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let (c1, c2) = so3_coeffs(w.norm_squared());
    let wx = hat(w);
    Matrix3::identity() + wx * c1 + wx * wx * c2
}

fn inv_jac_coeff(theta_sq: f64) -> f64 {
    // c3 = 1/t^2 - (1 + cos t)/(2 t sin t); finite limit 1/pi^2 at t = pi.
    if theta_sq < SMALL_ANGLE_SQ {
        1.0 / 12.0 + theta_sq / 720.0
    } else {
        let theta = theta_sq.sqrt();
        let s = theta.sin();
        if s.abs() < 1e-9 {
            1.0 / theta_sq
        } else {
            1.0 / theta_sq - (1.0 + theta.cos()) / (2.0 * theta * s)
        }
    }
}

/// Inverse of the right Jacobian of SO(3).
pub fn right_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let wx = hat(w);
    Matrix3::identity() + wx * 0.5 + wx * wx * inv_jac_coeff(w.norm_squared())
}

/// Inverse of the left Jacobian of SO(3).
pub fn left_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let wx = hat(w);
    Matrix3::identity() - wx * 0.5 + wx * wx * inv_jac_coeff(w.norm_squared())
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, re-normalizing the quaternion.
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::new_normalize(*rotation.quaternion()),
            translation,
        }
    }

    pub fn from_quaternion_coords(
        w: f64,
        x: f64,
        y: f64,
        z: f64,
        translation: Vector3<f64>,
    ) -> Self {
        Self {
            rotation: UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z)),
            translation,
        }
    }

    #[inline]
    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    #[inline]
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    #[inline]
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Applies the transform to a world point.
    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rinv = self.rotation.inverse();
        Pose {
            rotation: rinv,
            translation: -(rinv * self.translation),
        }
    }

    /// Rotation angle (radians) of `self ∘ other⁻¹`.
    pub fn rotation_distance(&self, other: &Pose) -> f64 {
        log_so3(&(self.rotation * other.rotation.inverse())).norm()
    }

    pub fn translation_distance(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Left retraction on SO(3) x R^3: `R <- Exp(w) R, t <- t + v` with
    /// `delta = [v; w]`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        let v = Vector3::new(delta[0], delta[1], delta[2]);
        let w = Vector3::new(delta[3], delta[4], delta[5]);
        Pose {
            rotation: UnitQuaternion::new_normalize(*(exp_so3(&w) * self.rotation).quaternion()),
            translation: self.translation + v,
        }
    }

    /// Camera position in the world frame (`-R^T t`).
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }
}

/// Exponential map from a 6-vector tangent `[v; w]` to a pose on the
/// product manifold SO(3) x R^3.
pub fn pose_exp(delta: &Vector6<f64>) -> Pose {
    Pose::identity().retract(delta)
}

/// Logarithm inverse to [`pose_exp`].
pub fn pose_log(pose: &Pose) -> Vector6<f64> {
    let w = log_so3(pose.rotation());
    let t = pose.translation();
    Vector6::new(t.x, t.y, t.z, w.x, w.y, w.z)
}

/// Geodesic blend of two poses: Slerp on rotations (short arc), linear
/// on translations, at fraction `s` in [0, 1].
pub fn interpolate_poses(a: &Pose, b: &Pose, s: f64) -> Pose {
    if s <= 0.0 {
        return *a;
    }
    if s >= 1.0 {
        return *b;
    }
    let delta = log_so3(&(a.rotation.inverse() * b.rotation));
    Pose::new(
        a.rotation * exp_so3(&(delta * s)),
        a.translation * (1.0 - s) + b.translation * s,
    )
}

/// Start/end poses plus the event-quantile sub-times covering one
/// exposure window.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureTrajectory {
    pub start: Pose,
    pub end: Pose,
    /// Exposure duration tau in seconds.
    pub exposure: f64,
    /// K+1 strictly increasing instants in [0, tau], endpoints pinned.
    pub sub_times: Vec<f64>,
}

impl ExposureTrajectory {
    /// Uniform sub-times (the zero-event fallback).
    pub fn uniform(start: Pose, end: Pose, exposure: f64, k: usize) -> Result<Self> {
        Self::with_events(start, end, exposure, k, &[])
    }

    /// Sub-times from the event quantile split.
    pub fn with_events(
        start: Pose,
        end: Pose,
        exposure: f64,
        k: usize,
        event_times: &[f64],
    ) -> Result<Self> {
        if exposure <= 0.0 {
            return Err(EvsplatError::InvalidArgument(format!(
                "exposure must be positive, got {exposure}"
            )));
        }
        let sub_times = assign_sub_times(exposure, k, event_times)?;
        Ok(Self {
            start,
            end,
            exposure,
            sub_times,
        })
    }

    /// Number of sub-intervals K.
    pub fn intervals(&self) -> usize {
        self.sub_times.len() - 1
    }

    /// Pose at instant `eta` in `[0, exposure]`: Slerp on rotations along
    /// the short geodesic, linear blend on translations.
    pub fn interpolate_pose(&self, eta: f64) -> Result<Pose> {
        if !(0.0..=self.exposure).contains(&eta) || !eta.is_finite() {
            return Err(EvsplatError::OutOfRange(format!(
                "eta {eta} outside exposure [0, {}]",
                self.exposure
            )));
        }
        let s = eta / self.exposure;
        if s == 0.0 {
            return Ok(self.start);
        }
        if s == 1.0 {
            return Ok(self.end);
        }
        let delta = log_so3(&(self.start.rotation.inverse() * self.end.rotation));
        let rot = self.start.rotation * exp_so3(&(delta * s));
        let trans = self.start.translation * (1.0 - s) + self.end.translation * s;
        Ok(Pose::new(rot, trans))
    }

    /// Poses at all sub-times.
    pub fn sub_poses(&self) -> Result<Vec<Pose>> {
        self.sub_times
            .iter()
            .map(|&eta| self.interpolate_pose(eta))
            .collect()
    }

    /// Chain-rule factors mapping a tangent perturbation of the pose at
    /// `eta` back to tangent perturbations of the endpoint poses.
    pub fn interpolation_jacobian(&self, eta: f64) -> InterpJacobian {
        let s = (eta / self.exposure).clamp(0.0, 1.0);
        let r0 = self.start.rotation_matrix();
        let delta = log_so3(&(self.start.rotation.inverse() * self.end.rotation));
        let r_s = r0 * exp_so3(&(delta * s)).to_rotation_matrix().into_inner();
        // S(s) = s * R(s) * Jr(s d) * Jl^{-1}(d) * R0^T
        let s_mat =
            r_s * right_jacobian(&(delta * s)) * left_jacobian_inv(&delta) * r0.transpose() * s;
        InterpJacobian { s, s_mat }
    }
}

/// Differential of the exposure interpolation at one instant.
///
/// For a left-tangent perturbation `(v, w)` of the interpolated pose:
/// translation splits linearly `(1-s, s)` between the endpoints; rotation
/// splits as `(I - S)` for the start and `S` for the end.
#[derive(Debug, Clone, Copy)]
pub struct InterpJacobian {
    pub s: f64,
    pub s_mat: Matrix3<f64>,
}

impl InterpJacobian {
    /// Transports a gradient w.r.t. the interpolated pose tangent into
    /// gradients w.r.t. the start/end pose tangents (accumulating).
    pub fn accumulate(
        &self,
        grad_pose: &Vector6<f64>,
        grad_start: &mut Vector6<f64>,
        grad_end: &mut Vector6<f64>,
    ) {
        let gv = Vector3::new(grad_pose[0], grad_pose[1], grad_pose[2]);
        let gw = Vector3::new(grad_pose[3], grad_pose[4], grad_pose[5]);
        let gw_start = (Matrix3::identity() - self.s_mat).transpose() * gw;
        let gw_end = self.s_mat.transpose() * gw;
        for i in 0..3 {
            grad_start[i] += (1.0 - self.s) * gv[i];
            grad_end[i] += self.s * gv[i];
            grad_start[3 + i] += gw_start[i];
            grad_end[3 + i] += gw_end[i];
        }
    }
}

/// Splits the exposure into K intervals holding as near as possible an
/// equal share of the events (quantile split); uniform in time when no
/// events are present. Returns the K+1 boundary instants.
pub fn assign_sub_times(exposure: f64, k: usize, event_times: &[f64]) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(EvsplatError::InvalidArgument(
            "sub-interval count K must be >= 1".into(),
        ));
    }
    let uniform = |i: usize| exposure * i as f64 / k as f64;
    let mut times = Vec::with_capacity(k + 1);
    times.push(0.0);
    let m = event_times.len();
    for i in 1..k {
        let candidate = if m == 0 {
            uniform(i)
        } else {
            // 1-based event index nearest to the i-th K-quantile.
            let idx = ((i * m) as f64 / k as f64).round().max(1.0) as usize;
            event_times[idx.min(m) - 1].clamp(0.0, exposure)
        };
        let prev = *times.last().unwrap();
        if candidate > prev && candidate < exposure {
            times.push(candidate);
        } else {
            // Degenerate quantile (duplicate or boundary timestamp):
            // fill the remaining span uniformly from here.
            times.push(prev + (exposure - prev) / (k - i + 1) as f64);
        }
    }
    times.push(exposure);
    debug_assert!(times.windows(2).all(|w| w[1] > w[0]));
    Ok(times)
}

/// Formats a pose as one TUM trajectory line: `timestamp tx ty tz qx qy
/// qz qw`. The serialized pose is camera-to-world.
pub fn format_tum_line(timestamp: f64, world_to_camera: &Pose) -> String {
    let cw = world_to_camera.inverse();
    let t = cw.translation();
    let q = cw.rotation().quaternion();
    format!(
        "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
        timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
    )
}

/// Parses a TUM line back into `(timestamp, world_to_camera)`.
pub fn parse_tum_line(line: &str) -> Result<(f64, Pose)> {
    let fields: Vec<f64> = line
        .split_whitespace()
        .map(|f| f.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| EvsplatError::InvalidArgument(format!("bad TUM line {line:?}: {e}")))?;
    if fields.len() != 8 {
        return Err(EvsplatError::InvalidArgument(format!(
            "TUM line needs 8 fields, got {}",
            fields.len()
        )));
    }
    let cam_to_world = Pose::from_quaternion_coords(
        fields[7],
        fields[4],
        fields[5],
        fields[6],
        Vector3::new(fields[1], fields[2], fields[3]),
    );
    Ok((fields[0], cam_to_world.inverse()))
}
