//! The 3D Gaussian scene container.
//!
//! Constrained parameters are stored through unconstrained latents so
//! gradient steps cannot leave the feasible set: scale through an
//! exponential, opacity through a sigmoid. Rotations are kept as raw
//! quaternions and normalized on use.

use std::io::{BufRead, BufReader};
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::camera::CameraIntrinsics;
use crate::error::{EvsplatError, Result};
use crate::img::{ColorImage, ScalarImage};
use crate::se3::Pose;

pub const MIN_SCALE: f64 = 1e-7;
pub const MAX_OPACITY_LOGIT: f64 = 13.8;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// One anisotropic 3D Gaussian primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    /// Raw (unnormalized) quaternion latent, (w, i, j, k).
    pub rot: Quaternion<f64>,
    /// Scale latent; s = exp(log_scale), clamped to MIN_SCALE.
    pub log_scale: Vector3<f64>,
    /// Opacity latent; o = sigmoid(opacity_logit).
    pub opacity_logit: f64,
    /// HDR linear color, non-negative.
    pub color: Vector3<f64>,
}

impl Gaussian {
    pub fn from_natural(
        mean: Vector3<f64>,
        rotation: UnitQuaternion<f64>,
        scale: Vector3<f64>,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Self {
        Self {
            mean,
            rot: *rotation.quaternion(),
            log_scale: scale.map(|s| s.max(MIN_SCALE).ln()),
            opacity_logit: logit(opacity),
            color,
        }
    }

    #[inline]
    pub fn rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::new_normalize(self.rot)
    }

    #[inline]
    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(|l| l.exp().max(MIN_SCALE))
    }

    #[inline]
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    /// World-frame covariance R diag(s^2) R^T, SPD by construction.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation().to_rotation_matrix().into_inner();
        let s = self.scale();
        let d = Matrix3::from_diagonal(&Vector3::new(s.x * s.x, s.y * s.y, s.z * s.z));
        r * d * r.transpose()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite())
            && self.rot.coords.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.color.iter().all(|v| v.is_finite())
    }
}

/// Bookkeeping the mapper maintains per Gaussian.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GaussianMeta {
    /// Keyframe id current when this Gaussian was inserted.
    pub inserted_kf: u64,
    /// Number of keyframe renders that observed it.
    pub observed: u32,
}

/// Scene map: Gaussians plus stable ids and mapper bookkeeping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianScene {
    gaussians: Vec<Gaussian>,
    ids: Vec<u64>,
    meta: Vec<GaussianMeta>,
    next_id: u64,
}

impl GaussianScene {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    pub fn gaussians_mut(&mut self) -> &mut [Gaussian] {
        &mut self.gaussians
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn meta(&self) -> &[GaussianMeta] {
        &self.meta
    }

    pub fn get(&self, idx: usize) -> &Gaussian {
        &self.gaussians[idx]
    }

    pub fn push(&mut self, g: Gaussian, inserted_kf: u64) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.gaussians.push(g);
        self.ids.push(id);
        self.meta.push(GaussianMeta {
            inserted_kf,
            observed: 0,
        });
        id
    }

    pub fn mark_observed(&mut self, idx: usize) {
        self.meta[idx].observed += 1;
    }

    /// Index of the first Gaussian with non-finite parameters, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.gaussians.iter().position(|g| !g.is_finite())
    }

    /// Removes Gaussians that are nearly transparent or that have been
    /// around for `min_age` keyframes without enough observations.
    /// Returns the number removed.
    pub fn prune(
        &mut self,
        min_opacity: f64,
        min_observations: u32,
        min_age: u64,
        current_kf: u64,
    ) -> usize {
        let before = self.gaussians.len();
        let keep: Vec<bool> = self
            .gaussians
            .iter()
            .zip(self.meta.iter())
            .map(|(g, m)| {
                if g.opacity() < min_opacity {
                    return false;
                }
                let age = current_kf.saturating_sub(m.inserted_kf);
                !(age >= min_age && m.observed < min_observations)
            })
            .collect();
        let mut keep_it = keep.iter();
        self.gaussians.retain(|_| *keep_it.next().unwrap());
        let mut keep_it = keep.iter();
        self.ids.retain(|_| *keep_it.next().unwrap());
        let mut keep_it = keep.iter();
        self.meta.retain(|_| *keep_it.next().unwrap());
        before - self.gaussians.len()
    }

    /// Back-projects valid depth pixels on a stride grid into new
    /// Gaussians. Pixels where `coverage` alpha exceeds the threshold
    /// are skipped. Returns `(inserted, invalid_skipped)`.
    pub fn insert_from_depth(
        &mut self,
        depth: &ScalarImage,
        image: &ColorImage,
        pose: &Pose,
        intr: &CameraIntrinsics,
        stride: usize,
        coverage: Option<(&ScalarImage, f64)>,
        inserted_kf: u64,
    ) -> (usize, usize) {
        assert!(stride >= 1);
        let cam_to_world = pose.inverse();
        let mut inserted = 0;
        let mut invalid = 0;
        for y in (0..depth.height).step_by(stride) {
            for x in (0..depth.width).step_by(stride) {
                let d = depth.get(x, y);
                if !(d > 0.0) || !d.is_finite() {
                    invalid += 1;
                    continue;
                }
                if let Some((alpha, thresh)) = coverage {
                    if alpha.get(x, y) > thresh {
                        continue;
                    }
                }
                let cam_pt = intr.back_project(x as f64, y as f64, d);
                let world = cam_to_world.transform(&cam_pt);
                let s = d / intr.fx * stride as f64;
                let px = image.get(x, y);
                let g = Gaussian::from_natural(
                    world,
                    UnitQuaternion::identity(),
                    Vector3::new(s, s, s),
                    0.5,
                    Vector3::new(px[0].max(0.0), px[1].max(0.0), px[2].max(0.0)),
                );
                self.push(g, inserted_kf);
                inserted += 1;
            }
        }
        (inserted, invalid)
    }

    /// Writes the checkpoint: a one-line header `gsmap v1 <count>`, then
    /// one Gaussian per row `mx my mz qw qx qy qz sx sy sz o r g b`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("gsmap v1 {}\n", self.gaussians.len()));
        for g in &self.gaussians {
            let q = g.rotation();
            let qq = q.quaternion();
            let s = g.scale();
            out.push_str(&format!(
                "{} {} {} {} {} {} {} {} {} {} {} {} {} {}\n",
                g.mean.x,
                g.mean.y,
                g.mean.z,
                qq.w,
                qq.i,
                qq.j,
                qq.k,
                s.x,
                s.y,
                s.z,
                g.opacity(),
                g.color.x,
                g.color.y,
                g.color.z
            ));
        }
        std::fs::write(path, out).map_err(|e| EvsplatError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| EvsplatError::io(path.display().to_string(), e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| EvsplatError::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: "empty checkpoint".into(),
            })?
            .map_err(|e| EvsplatError::io(path.display().to_string(), e))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "gsmap" || parts[1] != "v1" {
            return Err(EvsplatError::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: format!("bad header {header:?}"),
            });
        }
        let count: usize = parts[2].parse().map_err(|_| EvsplatError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "bad count".into(),
        })?;
        let mut scene = GaussianScene::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| EvsplatError::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| EvsplatError::Parse {
                    path: path.display().to_string(),
                    line: i + 2,
                    msg: e.to_string(),
                })?;
            if vals.len() != 14 {
                return Err(EvsplatError::Parse {
                    path: path.display().to_string(),
                    line: i + 2,
                    msg: format!("expected 14 values, got {}", vals.len()),
                });
            }
            let g = Gaussian::from_natural(
                Vector3::new(vals[0], vals[1], vals[2]),
                UnitQuaternion::new_normalize(Quaternion::new(vals[3], vals[4], vals[5], vals[6])),
                Vector3::new(vals[7], vals[8], vals[9]),
                vals[10],
                Vector3::new(vals[11], vals[12], vals[13]),
            );
            scene.push(g, 0);
        }
        if scene.len() != count {
            return Err(EvsplatError::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: format!("header count {count} != rows {}", scene.len()),
            });
        }
        Ok(scene)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_scene() -> GaussianScene {
        let mut scene = GaussianScene::new();
        scene.push(
            Gaussian::from_natural(
                Vector3::new(0.1, -0.2, 3.0),
                UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.4),
                Vector3::new(0.1, 0.2, 0.05),
                0.77,
                Vector3::new(0.2, 0.5, 0.9),
            ),
            0,
        );
        scene
    }

    #[test]
    fn latent_accessors_satisfy_constraints() {
        let g = Gaussian::from_natural(
            Vector3::zeros(),
            UnitQuaternion::identity(),
            Vector3::new(1e-12, 1.0, 2.0),
            0.25,
            Vector3::zeros(),
        );
        let s = g.scale();
        assert!(s.x >= MIN_SCALE && s.y > 0.0 && s.z > 0.0);
        let o = g.opacity();
        assert!(o > 0.0 && o < 1.0);
        assert_relative_eq!(o, 0.25, epsilon = 1e-9);
    }

    #[test]
    fn covariance_is_spd() {
        let scene = unit_scene();
        let cov = scene.get(0).covariance();
        assert_relative_eq!(cov, cov.transpose(), epsilon = 1e-14);
        let eig = cov.symmetric_eigenvalues();
        assert!(eig.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn insert_from_depth_principal_point() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64).unwrap();
        let mut depth = ScalarImage::new(64, 64);
        depth.set(32, 32, 2.0);
        let image = ColorImage::filled(64, 64, [0.5, 0.5, 0.5]);
        let mut scene = GaussianScene::new();
        let (ins, _) = scene.insert_from_depth(
            &depth,
            &image,
            &Pose::identity(),
            &intr,
            1,
            None,
            0,
        );
        assert_eq!(ins, 1);
        assert_relative_eq!(scene.get(0).mean, Vector3::new(0.0, 0.0, 2.0), epsilon = 1e-12);
    }

    #[test]
    fn insert_from_depth_counts() {
        let intr = CameraIntrinsics::new(200.0, 200.0, 224.0, 128.0, 448, 256).unwrap();
        let depth = ScalarImage::filled(448, 256, 2.0);
        let image = ColorImage::new(448, 256);
        let mut scene = GaussianScene::new();
        let (ins, invalid) = scene.insert_from_depth(
            &depth,
            &image,
            &Pose::identity(),
            &intr,
            4,
            None,
            0,
        );
        assert_eq!(ins, 112 * 64);
        assert_eq!(invalid, 0);
    }

    #[test]
    fn insert_from_depth_all_invalid() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 16.0, 16.0, 32, 32).unwrap();
        let depth = ScalarImage::new(32, 32);
        let image = ColorImage::new(32, 32);
        let mut scene = GaussianScene::new();
        let (ins, invalid) = scene.insert_from_depth(
            &depth,
            &image,
            &Pose::identity(),
            &intr,
            1,
            None,
            0,
        );
        assert_eq!(ins, 0);
        assert_eq!(invalid, 32 * 32);
    }

    #[test]
    fn prune_keeps_healthy_gaussians() {
        let mut scene = unit_scene();
        scene.gaussians_mut()[0].opacity_logit = logit(0.9);
        for _ in 0..4 {
            scene.mark_observed(0);
        }
        let removed = scene.prune(0.05, 3, 3, 5);
        assert_eq!(removed, 0);
        assert_eq!(scene.len(), 1);
    }

    #[test]
    fn prune_removes_transparent() {
        let mut scene = unit_scene();
        scene.gaussians_mut()[0].opacity_logit = logit(0.01);
        let removed = scene.prune(0.05, 3, 3, 0);
        assert_eq!(removed, 1);
    }

    #[test]
    fn prune_removes_unobserved_old() {
        let mut scene = unit_scene();
        // inserted at kf 0, never observed, now at kf 3
        let removed = scene.prune(0.05, 3, 3, 3);
        assert_eq!(removed, 1);
        // but a freshly inserted one survives
        let mut scene = unit_scene();
        let removed = scene.prune(0.05, 3, 3, 2);
        assert_eq!(removed, 0);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.txt");
        let mut scene = unit_scene();
        scene.push(
            Gaussian::from_natural(
                Vector3::new(-1.0, 0.5, 4.0),
                UnitQuaternion::from_axis_angle(&Vector3::x_axis(), -0.9),
                Vector3::new(0.01, 0.02, 0.3),
                0.33,
                Vector3::new(1.2, 0.0, 0.4),
            ),
            0,
        );
        scene.save(&path).unwrap();
        let loaded = GaussianScene::load(&path).unwrap();
        assert_eq!(loaded.len(), scene.len());
        for (a, b) in scene.gaussians().iter().zip(loaded.gaussians()) {
            assert_relative_eq!(a.mean, b.mean, epsilon = 1e-12);
            assert_relative_eq!(a.scale(), b.scale(), epsilon = 1e-12);
            assert_relative_eq!(a.opacity(), b.opacity(), epsilon = 1e-9);
            assert_relative_eq!(a.color, b.color, epsilon = 1e-12);
            assert!(
                (a.rotation().quaternion().coords - b.rotation().quaternion().coords).norm()
                    < 1e-9
            );
        }
    }
}
