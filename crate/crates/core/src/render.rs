//! Differentiable forward rasterizer for color and depth, plus analytic
//! gradients with respect to every Gaussian parameter and the camera
//! pose tangent.
//!
//! Rasterization is naive per-pixel over a per-Gaussian bounding
//! rectangle. The rectangle is derived from the contribution cutoff
//! `alpha_min` (the level set where `o * exp(-q/2)` drops below it), so
//! truncation and cutoff are one and the same condition; at the default
//! cutoff of 1/255 and typical opacities this is close to the usual
//! 3-sigma box. Compositing is front to back in ascending center depth
//! with a stable index tie-break, alpha clamped at `alpha_clamp`, and
//! per-pixel termination once transmittance falls below
//! `transmittance_min`.

use nalgebra::{Matrix2, Matrix3, Matrix2x3, Quaternion, Vector2, Vector3, Vector6};

use crate::camera::CameraIntrinsics;
use crate::error::{EvsplatError, Result};
use crate::img::{ColorImage, ScalarImage};
use crate::scene::{Gaussian, GaussianScene};
use crate::se3::Pose;

/// Rasterizer knobs. Defaults follow standard splatting practice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterSettings {
    /// Near plane; Gaussians with camera-frame z at or below it are culled.
    pub near: f64,
    /// Contribution cutoff; also defines the bounding rectangle.
    pub alpha_min: f64,
    /// Upper clamp on per-contribution alpha.
    pub alpha_clamp: f64,
    /// Per-pixel compositing stops below this transmittance.
    pub transmittance_min: f64,
    /// Low-pass added to both diagonal entries of the 2D covariance.
    pub cov_lowpass: f64,
    /// Background color composited behind the scene.
    pub background: [f64; 3],
}

impl Default for RasterSettings {
    fn default() -> Self {
        Self {
            near: 0.01,
            alpha_min: 1.0 / 255.0,
            alpha_clamp: 0.999,
            transmittance_min: 1e-4,
            cov_lowpass: 0.3,
            background: [0.0; 3],
        }
    }
}

impl RasterSettings {
    /// Tight settings for gradient checking: the contribution cutoff is
    /// pushed down so truncation jumps are far below finite-difference
    /// resolution.
    pub fn gradcheck() -> Self {
        Self {
            alpha_min: 1e-9,
            ..Self::default()
        }
    }
}

/// Result of projecting one Gaussian into the image plane.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
}

/// Projects a Gaussian through the camera; `None` marks a behind-camera
/// cull, not an error. The 2D covariance is the first-order propagation
/// through the projection Jacobian plus the low-pass floor.
pub fn project_gaussian(
    g: &Gaussian,
    pose: &Pose,
    intr: &CameraIntrinsics,
    settings: &RasterSettings,
) -> Option<Projection> {
    let rot = pose.rotation_matrix();
    let x_c = rot * g.mean + pose.translation();
    if x_c.z <= settings.near {
        return None;
    }
    let mean2d = intr.project(&x_c);
    let j = projection_jacobian(intr, &x_c);
    let m = j * rot;
    let cov3 = g.covariance();
    let mut cov2d = m * cov3 * m.transpose();
    cov2d[(0, 0)] += settings.cov_lowpass;
    cov2d[(1, 1)] += settings.cov_lowpass;
    Some(Projection {
        mean2d,
        cov2d,
        depth: x_c.z,
    })
}

#[inline]
fn projection_jacobian(intr: &CameraIntrinsics, x_c: &Vector3<f64>) -> Matrix2x3<f64> {
    let z = x_c.z;
    let inv_z = 1.0 / z;
    let inv_z2 = inv_z * inv_z;
    Matrix2x3::new(
        intr.fx * inv_z,
        0.0,
        -intr.fx * x_c.x * inv_z2,
        0.0,
        intr.fy * inv_z,
        -intr.fy * x_c.y * inv_z2,
    )
}

/// Per-Gaussian forward cache retained for the backward pass.
#[derive(Debug, Clone)]
struct Splat {
    gauss_idx: usize,
    mean2d: Vector2<f64>,
    cov2d_inv: Matrix2<f64>,
    depth: f64,
    opacity: f64,
    color: Vector3<f64>,
    q_max: f64,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

/// Rendered color/depth/alpha plus the retained per-contributor state
/// needed by [`render_backward`].
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: ColorImage,
    pub depth: ScalarImage,
    pub alpha: ScalarImage,
    /// Peak per-contribution alpha each scene Gaussian reached anywhere
    /// in the image (0 for culled Gaussians).
    pub max_alpha: Vec<f64>,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub settings: RasterSettings,
    splats: Vec<Splat>,
    /// Foreground color sums, before the background term.
    fg_color: Vec<[f64; 3]>,
}

/// Gradients with respect to the natural Gaussian parameters.
#[derive(Debug, Clone)]
pub struct SceneGrads {
    pub mean: Vec<Vector3<f64>>,
    /// W.r.t. the raw quaternion latent, ordered (w, i, j, k).
    pub quat: Vec<[f64; 4]>,
    /// W.r.t. the natural scale s.
    pub scale: Vec<Vector3<f64>>,
    /// W.r.t. the natural opacity o.
    pub opacity: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
}

impl SceneGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            mean: vec![Vector3::zeros(); n],
            quat: vec![[0.0; 4]; n],
            scale: vec![Vector3::zeros(); n],
            opacity: vec![0.0; n],
            color: vec![Vector3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    pub fn add_assign(&mut self, other: &SceneGrads) {
        assert_eq!(self.len(), other.len());
        for i in 0..self.len() {
            self.mean[i] += other.mean[i];
            for c in 0..4 {
                self.quat[i][c] += other.quat[i][c];
            }
            self.scale[i] += other.scale[i];
            self.opacity[i] += other.opacity[i];
            self.color[i] += other.color[i];
        }
    }

    pub fn scale_by(&mut self, f: f64) {
        for i in 0..self.len() {
            self.mean[i] *= f;
            for c in 0..4 {
                self.quat[i][c] *= f;
            }
            self.scale[i] *= f;
            self.opacity[i] *= f;
            self.color[i] *= f;
        }
    }
}

/// Output of one backward pass.
#[derive(Debug, Clone)]
pub struct RenderGrads {
    pub scene: SceneGrads,
    /// W.r.t. the camera pose tangent `[v; w]` (left convention).
    pub pose: Vector6<f64>,
}

fn build_splats(
    scene: &GaussianScene,
    pose: &Pose,
    intr: &CameraIntrinsics,
    settings: &RasterSettings,
) -> Result<Vec<Splat>> {
    if let Some(idx) = scene.first_non_finite() {
        return Err(EvsplatError::NonFiniteGaussian { index: idx });
    }
    let mut splats = Vec::with_capacity(scene.len());
    for (gi, g) in scene.gaussians().iter().enumerate() {
        let opacity = g.opacity();
        if opacity <= settings.alpha_min {
            continue;
        }
        let Some(proj) = project_gaussian(g, pose, intr, settings) else {
            continue;
        };
        let q_max = 2.0 * (opacity / settings.alpha_min).ln();
        let det = proj.cov2d[(0, 0)] * proj.cov2d[(1, 1)] - proj.cov2d[(0, 1)] * proj.cov2d[(1, 0)];
        if det <= 0.0 || !det.is_finite() {
            continue;
        }
        let cov2d_inv = Matrix2::new(
            proj.cov2d[(1, 1)] / det,
            -proj.cov2d[(0, 1)] / det,
            -proj.cov2d[(1, 0)] / det,
            proj.cov2d[(0, 0)] / det,
        );
        let hx = (q_max * proj.cov2d[(0, 0)]).sqrt();
        let hy = (q_max * proj.cov2d[(1, 1)]).sqrt();
        let lo_x = (proj.mean2d.x - hx).ceil();
        let hi_x = (proj.mean2d.x + hx).floor();
        let lo_y = (proj.mean2d.y - hy).ceil();
        let hi_y = (proj.mean2d.y + hy).floor();
        if hi_x < 0.0 || hi_y < 0.0 || lo_x > (intr.width - 1) as f64 || lo_y > (intr.height - 1) as f64
        {
            continue;
        }
        let x0 = lo_x.max(0.0) as usize;
        let x1 = hi_x.min((intr.width - 1) as f64) as usize;
        let y0 = lo_y.max(0.0) as usize;
        let y1 = hi_y.min((intr.height - 1) as f64) as usize;
        if x0 > x1 || y0 > y1 {
            continue;
        }
        splats.push(Splat {
            gauss_idx: gi,
            mean2d: proj.mean2d,
            cov2d_inv,
            depth: proj.depth,
            opacity,
            color: g.color,
            q_max,
            x0,
            x1,
            y0,
            y1,
        });
    }
    // Front-to-back order: ascending center depth, stable index tie-break.
    splats.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap()
            .then(a.gauss_idx.cmp(&b.gauss_idx))
    });
    Ok(splats)
}

/// Renders the scene from a pose. Deterministic for a fixed scene.
pub fn render(
    scene: &GaussianScene,
    pose: &Pose,
    intr: &CameraIntrinsics,
    settings: &RasterSettings,
) -> Result<RenderOutput> {
    let (w, h) = (intr.width, intr.height);
    let splats = build_splats(scene, pose, intr, settings)?;
    let mut trans = vec![1.0f64; w * h];
    let mut fg_color = vec![[0.0f64; 3]; w * h];
    let mut fg_depth = vec![0.0f64; w * h];
    let mut max_alpha = vec![0.0f64; scene.len()];

    for splat in &splats {
        for y in splat.y0..=splat.y1 {
            let row = y * w;
            for x in splat.x0..=splat.x1 {
                let px = row + x;
                let t = trans[px];
                if t < settings.transmittance_min {
                    continue;
                }
                let dx = x as f64 - splat.mean2d.x;
                let dy = y as f64 - splat.mean2d.y;
                let q = splat.cov2d_inv[(0, 0)] * dx * dx
                    + (splat.cov2d_inv[(0, 1)] + splat.cov2d_inv[(1, 0)]) * dx * dy
                    + splat.cov2d_inv[(1, 1)] * dy * dy;
                if q > splat.q_max || q < 0.0 {
                    continue;
                }
                let alpha = (splat.opacity * (-0.5 * q).exp()).min(settings.alpha_clamp);
                let weight = alpha * t;
                fg_color[px][0] += splat.color.x * weight;
                fg_color[px][1] += splat.color.y * weight;
                fg_color[px][2] += splat.color.z * weight;
                fg_depth[px] += splat.depth * weight;
                trans[px] = t * (1.0 - alpha);
                if alpha > max_alpha[splat.gauss_idx] {
                    max_alpha[splat.gauss_idx] = alpha;
                }
            }
        }
    }

    let mut color = ColorImage::new(w, h);
    let mut depth = ScalarImage::new(w, h);
    let mut alpha_map = ScalarImage::new(w, h);
    for px in 0..w * h {
        let t = trans[px];
        color.data[px] = [
            fg_color[px][0] + settings.background[0] * t,
            fg_color[px][1] + settings.background[1] * t,
            fg_color[px][2] + settings.background[2] * t,
        ];
        depth.data[px] = fg_depth[px];
        alpha_map.data[px] = 1.0 - t;
    }

    Ok(RenderOutput {
        color,
        depth,
        alpha: alpha_map,
        max_alpha,
        pose: *pose,
        intrinsics: *intr,
        settings: *settings,
        splats,
        fg_color,
    })
}

/// Ids of the Gaussians visible from a pose: not culled and reaching a
/// peak contribution above `alpha_threshold` at some pixel.
pub fn visible_ids(
    scene: &GaussianScene,
    pose: &Pose,
    intr: &CameraIntrinsics,
    settings: &RasterSettings,
    alpha_threshold: f64,
) -> Result<Vec<u64>> {
    let out = render(scene, pose, intr, settings)?;
    Ok(visible_ids_from_output(scene, &out, alpha_threshold))
}

pub fn visible_ids_from_output(
    scene: &GaussianScene,
    out: &RenderOutput,
    alpha_threshold: f64,
) -> Vec<u64> {
    scene
        .ids()
        .iter()
        .zip(out.max_alpha.iter())
        .filter(|(_, &a)| a > alpha_threshold)
        .map(|(&id, _)| id)
        .collect()
}

/// Derivatives of the rotation matrix w.r.t. the unit quaternion
/// components (w, x, y, z).
fn rotation_quat_derivatives(q: &Quaternion<f64>) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

/// Analytic gradients of a pixel loss through the rasterizer. The pixel
/// loss is specified by its gradient images w.r.t. rendered color and
/// depth. Culled Gaussians receive zero gradients.
pub fn render_backward(
    scene: &GaussianScene,
    out: &RenderOutput,
    grad_color: &ColorImage,
    grad_depth: &ScalarImage,
) -> Result<RenderGrads> {
    let (w, h) = (out.intrinsics.width, out.intrinsics.height);
    if grad_color.width != w || grad_color.height != h {
        return Err(EvsplatError::DimensionMismatch {
            expected: format!("{w}x{h}"),
            got: format!("{}x{}", grad_color.width, grad_color.height),
        });
    }
    if grad_depth.width != w || grad_depth.height != h {
        return Err(EvsplatError::DimensionMismatch {
            expected: format!("{w}x{h}"),
            got: format!("{}x{}", grad_depth.width, grad_depth.height),
        });
    }
    let settings = &out.settings;
    let bg = settings.background;

    // Per-splat accumulators from the pixel loops.
    let n_splats = out.splats.len();
    let mut g_mean2d = vec![Vector2::<f64>::zeros(); n_splats];
    let mut g_cov2d = vec![Matrix2::<f64>::zeros(); n_splats];
    let mut g_opacity = vec![0.0f64; n_splats];
    let mut g_color_splat = vec![Vector3::<f64>::zeros(); n_splats];
    let mut g_depthval = vec![0.0f64; n_splats];

    // Replay the forward walk to rebuild per-pixel prefix sums.
    let mut trans = vec![1.0f64; w * h];
    let mut prefix_c = vec![[0.0f64; 3]; w * h];
    let mut prefix_d = vec![0.0f64; w * h];

    for (si, splat) in out.splats.iter().enumerate() {
        let inv = &splat.cov2d_inv;
        for y in splat.y0..=splat.y1 {
            let row = y * w;
            for x in splat.x0..=splat.x1 {
                let px = row + x;
                let t = trans[px];
                if t < settings.transmittance_min {
                    continue;
                }
                let dx = x as f64 - splat.mean2d.x;
                let dy = y as f64 - splat.mean2d.y;
                let q = inv[(0, 0)] * dx * dx
                    + (inv[(0, 1)] + inv[(1, 0)]) * dx * dy
                    + inv[(1, 1)] * dy * dy;
                if q > splat.q_max || q < 0.0 {
                    continue;
                }
                let gauss_w = (-0.5 * q).exp();
                let alpha_raw = splat.opacity * gauss_w;
                let clamped = alpha_raw > settings.alpha_clamp;
                let alpha = if clamped {
                    settings.alpha_clamp
                } else {
                    alpha_raw
                };
                let weight = alpha * t;
                let gc = grad_color.data[px];
                let gd = grad_depth.data[px];

                g_color_splat[si].x += gc[0] * weight;
                g_color_splat[si].y += gc[1] * weight;
                g_color_splat[si].z += gc[2] * weight;
                g_depthval[si] += gd * weight;

                let contrib = [
                    splat.color.x * weight,
                    splat.color.y * weight,
                    splat.color.z * weight,
                ];
                let contrib_d = splat.depth * weight;
                let t_fin = 1.0 - out.alpha.data[px];
                let one_minus = 1.0 - alpha;
                let mut dl_dalpha = 0.0;
                for c in 0..3 {
                    let behind =
                        out.fg_color[px][c] - prefix_c[px][c] - contrib[c] + bg[c] * t_fin;
                    dl_dalpha += gc[c] * (splat.color[c] * t - behind / one_minus);
                }
                let behind_d = out.depth.data[px] - prefix_d[px] - contrib_d;
                dl_dalpha += gd * (splat.depth * t - behind_d / one_minus);

                if !clamped {
                    g_opacity[si] += dl_dalpha * gauss_w;
                    // alpha = o e^{-q/2}: dL/dq = -alpha/2 * dL/dalpha
                    let dl_dq = -0.5 * alpha_raw * dl_dalpha;
                    let lam_d = Vector2::new(
                        inv[(0, 0)] * dx + inv[(0, 1)] * dy,
                        inv[(1, 0)] * dx + inv[(1, 1)] * dy,
                    );
                    // q = (u - m)^T Lam (u - m): dq/dm = -2 Lam (u - m)
                    g_mean2d[si] += lam_d * (-2.0 * dl_dq);
                    // dq/dcov = -Lam d d^T Lam
                    let outer = lam_d * lam_d.transpose();
                    g_cov2d[si] -= outer * dl_dq;
                }

                prefix_c[px][0] += contrib[0];
                prefix_c[px][1] += contrib[1];
                prefix_c[px][2] += contrib[2];
                prefix_d[px] += contrib_d;
                trans[px] = t * one_minus;
            }
        }
    }

    // Chain per-splat image-space gradients back to 3D parameters and
    // the camera pose tangent.
    let mut grads = SceneGrads::zeros(scene.len());
    let mut g_pose = Vector6::<f64>::zeros();
    let rot = out.pose.rotation_matrix();
    let intr = &out.intrinsics;

    for (si, splat) in out.splats.iter().enumerate() {
        let gi = splat.gauss_idx;
        let g = scene.get(gi);
        let x_c = rot * g.mean + out.pose.translation();
        let j = projection_jacobian(intr, &x_c);
        let m = j * rot;
        let quat = g.rotation();
        let r_g = quat.to_rotation_matrix().into_inner();
        let s = g.scale();
        let d_diag = Matrix3::from_diagonal(&Vector3::new(s.x * s.x, s.y * s.y, s.z * s.z));
        let sigma3 = r_g * d_diag * r_g.transpose();

        // Covariance chain.
        let g2s = g_cov2d[si] + g_cov2d[si].transpose();
        let dl_dm = g2s * m * sigma3;
        let g3 = m.transpose() * g_cov2d[si] * m;
        let dl_dj = dl_dm * rot.transpose();
        let dl_dw_cov = j.transpose() * dl_dm;

        // Scale and rotation of the Gaussian.
        let g3s = g3 + g3.transpose();
        let dl_drg = g3s * r_g * d_diag;
        let rt_g3_r = r_g.transpose() * g3 * r_g;
        for k in 0..3 {
            grads.scale[gi][k] += 2.0 * s[k] * rt_g3_r[(k, k)];
        }
        let dr_dq = rotation_quat_derivatives(quat.quaternion());
        let mut g_unit_q = [0.0f64; 4];
        for c in 0..4 {
            g_unit_q[c] = dl_drg.component_mul(&dr_dq[c]).sum();
        }
        // Chain through normalization of the raw quaternion latent.
        let raw = g.rot;
        let norm = raw.norm().max(1e-300);
        let unit = [raw.w / norm, raw.i / norm, raw.j / norm, raw.k / norm];
        let dot: f64 = (0..4).map(|c| g_unit_q[c] * unit[c]).sum();
        for c in 0..4 {
            grads.quat[gi][c] += (g_unit_q[c] - dot * unit[c]) / norm;
        }

        // Camera-frame point chain: projection, depth, J(x_c).
        let mut dl_dxc = j.transpose() * g_mean2d[si];
        dl_dxc.z += g_depthval[si];
        let z = x_c.z;
        let inv_z2 = 1.0 / (z * z);
        let inv_z3 = inv_z2 / z;
        dl_dxc.x += dl_dj[(0, 2)] * (-intr.fx * inv_z2);
        dl_dxc.y += dl_dj[(1, 2)] * (-intr.fy * inv_z2);
        dl_dxc.z += dl_dj[(0, 0)] * (-intr.fx * inv_z2)
            + dl_dj[(1, 1)] * (-intr.fy * inv_z2)
            + dl_dj[(0, 2)] * (2.0 * intr.fx * x_c.x * inv_z3)
            + dl_dj[(1, 2)] * (2.0 * intr.fy * x_c.y * inv_z3);

        grads.mean[gi] += rot.transpose() * dl_dxc;
        grads.opacity[gi] += g_opacity[si];
        grads.color[gi] += g_color_splat[si];

        // Pose tangent: translation part, then rotation part from both
        // the point action and the covariance's explicit R factor.
        for k in 0..3 {
            g_pose[k] += dl_dxc[k];
        }
        let rxw = x_c - out.pose.translation();
        let cross = rxw.cross(&dl_dxc);
        let b = dl_dw_cov * rot.transpose();
        g_pose[3] += cross.x + (b[(2, 1)] - b[(1, 2)]);
        g_pose[4] += cross.y + (b[(0, 2)] - b[(2, 0)]);
        g_pose[5] += cross.z + (b[(1, 0)] - b[(0, 1)]);
    }

    Ok(RenderGrads {
        scene: grads,
        pose: g_pose,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::logit;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn test_intr() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 128.0, 128.0, 256, 256).unwrap()
    }

    fn small_intr() -> CameraIntrinsics {
        CameraIntrinsics::new(40.0, 40.0, 16.0, 16.0, 32, 32).unwrap()
    }

    #[test]
    fn project_on_axis_hits_principal_point() {
        let g = Gaussian::from_natural(
            Vector3::new(0.0, 0.0, 5.0),
            UnitQuaternion::identity(),
            Vector3::new(0.1, 0.1, 0.1),
            0.8,
            Vector3::new(1.0, 1.0, 1.0),
        );
        let proj = project_gaussian(
            &g,
            &Pose::identity(),
            &test_intr(),
            &RasterSettings::default(),
        )
        .unwrap();
        assert_relative_eq!(proj.mean2d, Vector2::new(128.0, 128.0), epsilon = 1e-12);
        assert_relative_eq!(proj.depth, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn project_isotropic_covariance_closed_form() {
        let sigma = 0.2;
        let z = 4.0;
        let g = Gaussian::from_natural(
            Vector3::new(0.0, 0.0, z),
            UnitQuaternion::identity(),
            Vector3::new(sigma, sigma, sigma),
            0.8,
            Vector3::new(1.0, 1.0, 1.0),
        );
        let intr = test_intr();
        let proj =
            project_gaussian(&g, &Pose::identity(), &intr, &RasterSettings::default()).unwrap();
        let expect = (intr.fx * sigma / z).powi(2) + 0.3;
        assert_relative_eq!(proj.cov2d[(0, 0)], expect, epsilon = 1e-9);
        assert_relative_eq!(proj.cov2d[(1, 1)], expect, epsilon = 1e-9);
        assert_relative_eq!(proj.cov2d[(0, 1)], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn project_culls_behind_camera() {
        let g = Gaussian::from_natural(
            Vector3::new(0.0, 0.0, -1.0),
            UnitQuaternion::identity(),
            Vector3::new(0.1, 0.1, 0.1),
            0.8,
            Vector3::new(1.0, 1.0, 1.0),
        );
        assert!(project_gaussian(
            &g,
            &Pose::identity(),
            &test_intr(),
            &RasterSettings::default()
        )
        .is_none());
    }

    #[test]
    fn render_single_opaque_gaussian() {
        let mut scene = GaussianScene::new();
        scene.push(
            Gaussian::from_natural(
                Vector3::new(0.0, 0.0, 2.0),
                UnitQuaternion::identity(),
                Vector3::new(0.5, 0.5, 0.5),
                0.999,
                Vector3::new(0.3, 0.7, 0.2),
            ),
            0,
        );
        let intr = small_intr();
        let out = render(
            &scene,
            &Pose::identity(),
            &intr,
            &RasterSettings::default(),
        )
        .unwrap();
        let c = out.color.get(16, 16);
        assert!((c[0] - 0.3).abs() < 1e-3, "{c:?}");
        assert!((c[1] - 0.7).abs() < 1e-3);
        assert!((c[2] - 0.2).abs() < 1e-3);
        assert!((out.depth.get(16, 16) - 2.0 * out.alpha.get(16, 16)).abs() < 1e-6);
    }

    #[test]
    fn render_two_gaussian_hand_oracle() {
        // Front alpha 0.5 red, back nearly opaque green, both centered:
        // pixel = 0.5 red + 0.5 * green_alpha ~ (0.5, 0.5, 0).
        let mut scene = GaussianScene::new();
        let big = Vector3::new(3.0, 3.0, 3.0);
        scene.push(
            Gaussian::from_natural(
                Vector3::new(0.0, 0.0, 2.0),
                UnitQuaternion::identity(),
                big,
                0.5,
                Vector3::new(1.0, 0.0, 0.0),
            ),
            0,
        );
        scene.push(
            Gaussian::from_natural(
                Vector3::new(0.0, 0.0, 4.0),
                UnitQuaternion::identity(),
                big * 2.0,
                0.999,
                Vector3::new(0.0, 1.0, 0.0),
            ),
            0,
        );
        let out = render(
            &scene,
            &Pose::identity(),
            &small_intr(),
            &RasterSettings::default(),
        )
        .unwrap();
        let c = out.color.get(16, 16);
        assert!((c[0] - 0.5).abs() < 2e-3, "{c:?}");
        assert!((c[1] - 0.5).abs() < 2e-3, "{c:?}");
        assert!(c[2].abs() < 1e-9);
    }

    #[test]
    fn render_empty_scene_is_background() {
        let settings = RasterSettings {
            background: [0.1, 0.2, 0.3],
            ..Default::default()
        };
        let out = render(
            &GaussianScene::new(),
            &Pose::identity(),
            &small_intr(),
            &settings,
        )
        .unwrap();
        for px in 0..out.color.len() {
            assert_eq!(out.color.data[px], [0.1, 0.2, 0.3]);
            assert_eq!(out.alpha.data[px], 0.0);
            assert_eq!(out.depth.data[px], 0.0);
        }
    }

    #[test]
    fn render_rejects_non_finite() {
        let mut scene = GaussianScene::new();
        scene.push(
            Gaussian::from_natural(
                Vector3::new(0.0, 0.0, 2.0),
                UnitQuaternion::identity(),
                Vector3::new(0.1, 0.1, 0.1),
                0.5,
                Vector3::new(1.0, 0.0, 0.0),
            ),
            0,
        );
        scene.gaussians_mut()[0].mean.x = f64::NAN;
        let err = render(
            &scene,
            &Pose::identity(),
            &small_intr(),
            &RasterSettings::default(),
        )
        .unwrap_err();
        match err {
            EvsplatError::NonFiniteGaussian { index } => assert_eq!(index, 0),
            other => panic!("unexpected error {other}"),
        }
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> GaussianScene {
        let mut scene = GaussianScene::new();
        for _ in 0..n {
            let mean = Vector3::new(
                (rng.random::<f64>() - 0.5) * 1.2,
                (rng.random::<f64>() - 0.5) * 1.2,
                1.5 + rng.random::<f64>() * 2.0,
            );
            let axis = Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            )
            .normalize();
            let quat = UnitQuaternion::from_axis_angle(
                &nalgebra::Unit::new_normalize(axis),
                rng.random::<f64>() * 3.0,
            );
            let scale = Vector3::new(
                0.05 + rng.random::<f64>() * 0.2,
                0.05 + rng.random::<f64>() * 0.2,
                0.05 + rng.random::<f64>() * 0.2,
            );
            let opacity = 0.25 + rng.random::<f64>() * 0.55;
            let color = Vector3::new(
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            );
            scene.push(
                Gaussian::from_natural(mean, quat, scale, opacity, color),
                0,
            );
        }
        scene
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vector3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        )
        .normalize();
        let q = UnitQuaternion::from_axis_angle(
            &nalgebra::Unit::new_normalize(axis),
            (rng.random::<f64>() - 0.5) * 0.2,
        );
        let t = Vector3::new(
            (rng.random::<f64>() - 0.5) * 0.1,
            (rng.random::<f64>() - 0.5) * 0.1,
            (rng.random::<f64>() - 0.5) * 0.1,
        );
        Pose::new(q, t)
    }

    #[test]
    fn compositing_conservation() {
        // alpha = 1 - prod(1 - alpha_i) over processed contributors.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scene = random_scene(&mut rng, 15);
        let intr = small_intr();
        let settings = RasterSettings::default();
        let out = render(&scene, &Pose::identity(), &intr, &settings).unwrap();
        // Independent product over the same walk.
        let mut prod = vec![1.0f64; 32 * 32];
        for splat in &out.splats {
            for y in splat.y0..=splat.y1 {
                for x in splat.x0..=splat.x1 {
                    let px = y * 32 + x;
                    if prod[px] < settings.transmittance_min {
                        continue;
                    }
                    let dx = x as f64 - splat.mean2d.x;
                    let dy = y as f64 - splat.mean2d.y;
                    let inv = &splat.cov2d_inv;
                    let q = inv[(0, 0)] * dx * dx
                        + (inv[(0, 1)] + inv[(1, 0)]) * dx * dy
                        + inv[(1, 1)] * dy * dy;
                    if q > splat.q_max || q < 0.0 {
                        continue;
                    }
                    let alpha = (splat.opacity * (-0.5 * q).exp()).min(settings.alpha_clamp);
                    prod[px] *= 1.0 - alpha;
                }
            }
        }
        for px in 0..prod.len() {
            assert!((out.alpha.data[px] - (1.0 - prod[px])).abs() < 1e-6);
        }
    }

    #[test]
    fn depth_sort_invariance_under_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let scene = random_scene(&mut rng, 12);
        let intr = small_intr();
        let settings = RasterSettings::default();
        let out_a = render(&scene, &Pose::identity(), &intr, &settings).unwrap();

        // Reverse storage order (depths are distinct almost surely).
        let mut reversed = GaussianScene::new();
        for g in scene.gaussians().iter().rev() {
            reversed.push(g.clone(), 0);
        }
        let out_b = render(&reversed, &Pose::identity(), &intr, &settings).unwrap();
        assert_eq!(out_a.color.data, out_b.color.data);
        assert_eq!(out_a.depth.data, out_b.depth.data);
        assert_eq!(out_a.alpha.data, out_b.alpha.data);
    }

    #[test]
    fn backward_zero_grad_images_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let scene = random_scene(&mut rng, 5);
        let intr = small_intr();
        let out = render(
            &scene,
            &Pose::identity(),
            &intr,
            &RasterSettings::default(),
        )
        .unwrap();
        let grads = render_backward(
            &scene,
            &out,
            &ColorImage::new(32, 32),
            &ScalarImage::new(32, 32),
        )
        .unwrap();
        assert_eq!(grads.pose, Vector6::zeros());
        for i in 0..scene.len() {
            assert_eq!(grads.scene.mean[i], Vector3::zeros());
            assert_eq!(grads.scene.quat[i], [0.0; 4]);
            assert_eq!(grads.scene.scale[i], Vector3::zeros());
            assert_eq!(grads.scene.opacity[i], 0.0);
            assert_eq!(grads.scene.color[i], Vector3::zeros());
        }
    }

    #[test]
    fn backward_rejects_mismatched_dims() {
        let scene = GaussianScene::new();
        let out = render(
            &scene,
            &Pose::identity(),
            &small_intr(),
            &RasterSettings::default(),
        )
        .unwrap();
        assert!(render_backward(
            &scene,
            &out,
            &ColorImage::new(16, 16),
            &ScalarImage::new(32, 32)
        )
        .is_err());
    }

    /// Scalar test loss: fixed random weights against color and depth.
    fn weighted_loss(
        scene: &GaussianScene,
        pose: &Pose,
        intr: &CameraIntrinsics,
        settings: &RasterSettings,
        wc: &ColorImage,
        wd: &ScalarImage,
    ) -> f64 {
        let out = render(scene, pose, intr, settings).unwrap();
        let mut loss = 0.0;
        for px in 0..out.color.len() {
            for c in 0..3 {
                loss += wc.data[px][c] * out.color.data[px][c];
            }
            loss += wd.data[px] * out.depth.data[px];
        }
        loss
    }

    fn random_weight_images(rng: &mut ChaCha8Rng, w: usize, h: usize) -> (ColorImage, ScalarImage) {
        let mut wc = ColorImage::new(w, h);
        let mut wd = ScalarImage::new(w, h);
        for px in 0..w * h {
            wc.data[px] = [
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            ];
            wd.data[px] = (rng.random::<f64>() - 0.5) * 0.2;
        }
        (wc, wd)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let intr = small_intr();
        let settings = RasterSettings::gradcheck();
        let h = 1e-4;

        for trial in 0..4 {
            let mut scene = random_scene(&mut rng, 4);
            let pose = random_pose(&mut rng);
            let (wc, wd) = random_weight_images(&mut rng, 32, 32);
            let out = render(&scene, &pose, &intr, &settings).unwrap();
            let grads = render_backward(&scene, &out, &wc, &wd).unwrap();

            let mut checked = 0usize;
            let mut failed = 0usize;
            let mut check = |analytic: f64, fd: f64, what: &str| {
                if analytic.abs() < 1e-8 && fd.abs() < 1e-6 {
                    return;
                }
                checked += 1;
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-12);
                if rel > 1e-3 {
                    failed += 1;
                    eprintln!("trial {trial} {what}: analytic {analytic} fd {fd} rel {rel}");
                }
            };

            for gi in 0..scene.len() {
                // mean
                for k in 0..3 {
                    let orig = scene.gaussians()[gi].mean[k];
                    scene.gaussians_mut()[gi].mean[k] = orig + h;
                    let lp = weighted_loss(&scene, &pose, &intr, &settings, &wc, &wd);
                    scene.gaussians_mut()[gi].mean[k] = orig - h;
                    let lm = weighted_loss(&scene, &pose, &intr, &settings, &wc, &wd);
                    scene.gaussians_mut()[gi].mean[k] = orig;
                    check(grads.scene.mean[gi][k], (lp - lm) / (2.0 * h), "mean");
                }
                // raw quaternion
                for k in 0..4 {
                    let mut set = |v: f64, s: &mut GaussianScene| {
                        let q = &mut s.gaussians_mut()[gi].rot;
                        match k {
                            0 => q.w = v,
                            1 => q.i = v,
                            2 => q.j = v,
                            _ => q.k = v,
                        }
                    };
                    let get = |s: &GaussianScene| {
                        let q = &s.gaussians()[gi].rot;
                        match k {
                            0 => q.w,
                            1 => q.i,
                            2 => q.j,
                            _ => q.k,
                        }
                    };
                    let orig = get(&scene);
                    set(orig + h, &mut scene);
                    let lp = weighted_loss(&scene, &pose, &intr, &settings, &wc, &wd);
                    set(orig - h, &mut scene);
                    let lm = weighted_loss(&scene, &pose, &intr, &settings, &wc, &wd);
                    set(orig, &mut scene);
                    check(grads.scene.quat[gi][k], (lp - lm) / (2.0 * h), "quat");
                }
                // natural scale via log-scale perturbation
                for k in 0..3 {
                    let orig = scene.gaussians()[gi].log_scale[k];
                    let s_nat = orig.exp();
                    scene.gaussians_mut()[gi].log_scale[k] = (s_nat + h).ln();
                    let lp = weighted_loss(&scene, &pose, &intr, &settings, &wc, &wd);
                    scene.gaussians_mut()[gi].log_scale[k] = (s_nat - h).ln();
                    let lm = weighted_loss(&scene, &pose, &intr, &settings, &wc, &wd);
                    scene.gaussians_mut()[gi].log_scale[k] = orig;
                    check(grads.scene.scale[gi][k], (lp - lm) / (2.0 * h), "scale");
                }
                // natural opacity via logit perturbation
                {
                    let orig = scene.gaussians()[gi].opacity_logit;
                    let o = crate::scene::sigmoid(orig);
                    scene.gaussians_mut()[gi].opacity_logit = logit(o + h);
                    let lp = weighted_loss(&scene, &pose, &intr, &settings, &wc, &wd);
                    scene.gaussians_mut()[gi].opacity_logit = logit(o - h);
                    let lm = weighted_loss(&scene, &pose, &intr, &settings, &wc, &wd);
                    scene.gaussians_mut()[gi].opacity_logit = orig;
                    check(grads.scene.opacity[gi], (lp - lm) / (2.0 * h), "opacity");
                }
                // color
                for k in 0..3 {
                    let orig = scene.gaussians()[gi].color[k];
                    scene.gaussians_mut()[gi].color[k] = orig + h;
                    let lp = weighted_loss(&scene, &pose, &intr, &settings, &wc, &wd);
                    scene.gaussians_mut()[gi].color[k] = orig - h;
                    let lm = weighted_loss(&scene, &pose, &intr, &settings, &wc, &wd);
                    scene.gaussians_mut()[gi].color[k] = orig;
                    check(grads.scene.color[gi][k], (lp - lm) / (2.0 * h), "color");
                }
            }

            // Pose tangent.
            for k in 0..6 {
                let mut dp = Vector6::zeros();
                dp[k] = h;
                let lp = weighted_loss(&scene, &pose.retract(&dp), &intr, &settings, &wc, &wd);
                dp[k] = -h;
                let lm = weighted_loss(&scene, &pose.retract(&dp), &intr, &settings, &wc, &wd);
                check(grads.pose[k], (lp - lm) / (2.0 * h), "pose");
            }

            assert!(checked > 20, "too few gradient coordinates exercised");
            assert_eq!(failed, 0, "{failed}/{checked} gradient coords mismatched");
        }
    }

    #[test]
    fn occluded_gaussian_gets_zero_color_gradient() {
        // Three nearly opaque layers: transmittance terminates before the
        // last one, so analytic and finite-difference gradients are both
        // exactly zero.
        let mut scene = GaussianScene::new();
        // Scales chosen so each layer's alpha stays > 0.99 across the
        // whole 32x32 image: T < 1e-4 everywhere after two layers.
        for (z, scale, color) in [
            (2.0, 10.0, [1.0, 0.0, 0.0]),
            (3.0, 15.0, [0.0, 1.0, 0.0]),
            (4.0, 20.0, [0.0, 0.0, 1.0]),
        ] {
            scene.push(
                Gaussian::from_natural(
                    Vector3::new(0.0, 0.0, z),
                    UnitQuaternion::identity(),
                    Vector3::new(scale, scale, scale),
                    0.999,
                    Vector3::new(color[0], color[1], color[2]),
                ),
                0,
            );
        }
        let intr = small_intr();
        let settings = RasterSettings::default();
        let out = render(&scene, &Pose::identity(), &intr, &settings).unwrap();
        // After two layers of alpha 0.999, T = 1e-6 < 1e-4: terminated.
        let (wc, wd) = (ColorImage::filled(32, 32, [1.0, 1.0, 1.0]), ScalarImage::new(32, 32));
        let grads = render_backward(&scene, &out, &wc, &wd).unwrap();
        assert_eq!(grads.scene.color[2], Vector3::zeros());

        let h = 1e-4;
        let mut perturbed = scene.clone();
        perturbed.gaussians_mut()[2].color.x += h;
        let lp = weighted_loss(&perturbed, &Pose::identity(), &intr, &settings, &wc, &wd);
        perturbed.gaussians_mut()[2].color.x -= 2.0 * h;
        let lm = weighted_loss(&perturbed, &Pose::identity(), &intr, &settings, &wc, &wd);
        assert_eq!(lp, lm, "occluded color must not affect the loss");
    }
}
