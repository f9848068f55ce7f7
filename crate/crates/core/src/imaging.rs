//! Physical blur formation over the exposure window and the photometric
//! loss through the camera response function.

use rayon::prelude::*;

use crate::camera::CameraIntrinsics;
use crate::crf::CrfNodes;
use crate::error::{EvsplatError, Result};
use crate::events::Event;
use crate::img::{ColorImage, ScalarImage};
use crate::render::{render, RasterSettings, RenderOutput};
use crate::scene::GaussianScene;
use crate::se3::ExposureTrajectory;

/// BT.601 luma coefficients.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Scalar brightness of an RGB value (BT.601 luma transform).
#[inline]
pub fn luma(rgb: &[f64; 3]) -> f64 {
    LUMA_WEIGHTS[0] * rgb[0] + LUMA_WEIGHTS[1] * rgb[1] + LUMA_WEIGHTS[2] * rgb[2]
}

/// One observation: blurred LDR image, depth map, exposure interval, and
/// the raw events inside it (timestamps relative to exposure start).
#[derive(Debug, Clone)]
pub struct FrameBundle {
    pub image_obs: ColorImage,
    /// Depth in scene units; 0 marks invalid pixels.
    pub depth_obs: ScalarImage,
    /// Absolute start-of-exposure time in seconds.
    pub t_start: f64,
    /// Exposure duration tau > 0.
    pub exposure: f64,
    pub events: Vec<Event>,
}

impl FrameBundle {
    pub fn t_end(&self) -> f64 {
        self.t_start + self.exposure
    }

    /// Mean of the valid (non-zero) observed depths; 0 when none.
    pub fn mean_valid_depth(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for &d in &self.depth_obs.data {
            if d > 0.0 {
                sum += d;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn valid_depth_count(&self) -> usize {
        self.depth_obs.data.iter().filter(|&&d| d > 0.0).count()
    }
}

/// Blur integration result: the exposure-averaged HDR image and the
/// latent sharp renders at every sub-time (K+1 renders for K
/// sub-intervals; the average runs over the first K, the extra endpoint
/// render feeds event prediction and the depth loss).
#[derive(Debug)]
pub struct BlurIntegration {
    pub hdr_blur: ColorImage,
    pub latents: Vec<RenderOutput>,
}

/// Renders the latent sharp frames along the exposure trajectory and
/// averages the first K into the blurred HDR image.
pub fn integrate_blur(
    scene: &GaussianScene,
    traj: &ExposureTrajectory,
    intr: &CameraIntrinsics,
    settings: &RasterSettings,
) -> Result<BlurIntegration> {
    let poses = traj.sub_poses()?;
    let latents: Vec<RenderOutput> = poses
        .par_iter()
        .map(|pose| render(scene, pose, intr, settings))
        .collect::<Result<_>>()?;
    let k = traj.intervals();
    let colors: Vec<&ColorImage> = latents[..k].iter().map(|r| &r.color).collect();
    let hdr_blur = ColorImage::mean_of(&colors);
    Ok(BlurIntegration { hdr_blur, latents })
}

/// Photometric L1 loss and its gradients.
#[derive(Debug, Clone)]
pub struct PhotometricLoss {
    /// Mean absolute difference over all pixels and channels.
    pub value: f64,
    /// d(value)/d(hdr input), including the CRF chain.
    pub grad_hdr: ColorImage,
    /// d(value)/d(node_hdr).
    pub grad_nodes: Vec<f64>,
}

/// Mean L1 between the CRF-mapped HDR image and the LDR observation.
pub fn photometric_loss(
    hdr: &ColorImage,
    crf: &CrfNodes,
    image_obs: &ColorImage,
) -> Result<PhotometricLoss> {
    if !hdr.same_dims(image_obs) {
        return Err(EvsplatError::DimensionMismatch {
            expected: format!("{}x{}", image_obs.width, image_obs.height),
            got: format!("{}x{}", hdr.width, hdr.height),
        });
    }
    let count = (hdr.len() * 3) as f64;
    let inv = 1.0 / count;
    let mut value = 0.0;
    let mut grad_hdr = ColorImage::new(hdr.width, hdr.height);
    let mut grad_nodes = vec![0.0f64; crf.len()];
    for px in 0..hdr.len() {
        for c in 0..3 {
            let (ldr, deriv) = crf.apply_with_deriv(hdr.data[px][c]);
            let r = ldr - image_obs.data[px][c];
            value += r.abs();
            let g_ldr = sign(r) * inv;
            grad_hdr.data[px][c] = g_ldr * deriv.d_input;
            if let Some((i, dq0, dq1)) = deriv.segment {
                grad_nodes[i] += g_ldr * dq0;
                grad_nodes[i + 1] += g_ldr * dq1;
            }
        }
    }
    Ok(PhotometricLoss {
        value: value * inv,
        grad_hdr,
        grad_nodes,
    })
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Gaussian;
    use crate::se3::{exp_so3, Pose};
    use approx::assert_relative_eq;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn luma_values() {
        assert_relative_eq!(luma(&[1.0, 1.0, 1.0]), 1.0, epsilon = 1e-12);
        assert_relative_eq!(luma(&[1.0, 0.0, 0.0]), 0.299, epsilon = 1e-12);
        assert_eq!(luma(&[0.0, 0.0, 0.0]), 0.0);
    }

    fn small_intr() -> CameraIntrinsics {
        CameraIntrinsics::new(40.0, 40.0, 16.0, 16.0, 32, 32).unwrap()
    }

    fn one_gaussian_scene() -> GaussianScene {
        let mut scene = GaussianScene::new();
        scene.push(
            Gaussian::from_natural(
                Vector3::new(0.0, 0.0, 2.0),
                UnitQuaternion::identity(),
                Vector3::new(0.08, 0.08, 0.08),
                0.9,
                Vector3::new(0.9, 0.6, 0.3),
            ),
            0,
        );
        scene
    }

    #[test]
    fn static_trajectory_blur_equals_sharp_render() {
        let scene = one_gaussian_scene();
        let intr = small_intr();
        let settings = RasterSettings::default();
        let pose = Pose::identity();
        let traj = ExposureTrajectory::uniform(pose, pose, 0.04, 4).unwrap();
        let blur = integrate_blur(&scene, &traj, &intr, &settings).unwrap();
        let sharp = render(&scene, &pose, &intr, &settings).unwrap();
        for px in 0..blur.hdr_blur.len() {
            for c in 0..3 {
                assert!((blur.hdr_blur.data[px][c] - sharp.color.data[px][c]).abs() < 1e-12);
            }
        }
        assert_eq!(blur.latents.len(), 5);
    }

    #[test]
    fn blur_is_pixelwise_mean_of_first_k() {
        let scene = one_gaussian_scene();
        let intr = small_intr();
        let settings = RasterSettings::default();
        let start = Pose::identity();
        let end = Pose::new(
            exp_so3(&Vector3::new(0.0, 0.02, 0.0)),
            Vector3::new(0.05, 0.0, 0.0),
        );
        let traj = ExposureTrajectory::uniform(start, end, 0.04, 2).unwrap();
        let blur = integrate_blur(&scene, &traj, &intr, &settings).unwrap();
        for px in 0..blur.hdr_blur.len() {
            for c in 0..3 {
                let mean = 0.5
                    * (blur.latents[0].color.data[px][c] + blur.latents[1].color.data[px][c]);
                assert!((blur.hdr_blur.data[px][c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn translating_camera_blur_has_larger_support() {
        let scene = one_gaussian_scene();
        let intr = small_intr();
        let settings = RasterSettings::default();
        let start = Pose::identity();
        let end = Pose::new(UnitQuaternion::identity(), Vector3::new(0.4, 0.0, 0.0));
        let traj = ExposureTrajectory::uniform(start, end, 0.04, 6).unwrap();
        let blur = integrate_blur(&scene, &traj, &intr, &settings).unwrap();
        let support = |img: &ColorImage| {
            img.data
                .iter()
                .filter(|px| luma(&[px[0], px[1], px[2]]) > 1e-6)
                .count()
        };
        let blur_support = support(&blur.hdr_blur);
        for latent in &blur.latents[..traj.intervals()] {
            assert!(
                blur_support > support(&latent.color),
                "blur support {blur_support} not larger"
            );
        }
    }

    #[test]
    fn blur_linearity_in_scene_color() {
        let mut scene = one_gaussian_scene();
        let intr = small_intr();
        let settings = RasterSettings::default();
        let start = Pose::identity();
        let end = Pose::new(UnitQuaternion::identity(), Vector3::new(0.1, 0.05, 0.0));
        let traj = ExposureTrajectory::uniform(start, end, 0.04, 3).unwrap();
        let base = integrate_blur(&scene, &traj, &intr, &settings).unwrap();
        let lambda = 1.7;
        scene.gaussians_mut()[0].color *= lambda;
        let scaled = integrate_blur(&scene, &traj, &intr, &settings).unwrap();
        for px in 0..base.hdr_blur.len() {
            for c in 0..3 {
                assert!(
                    (scaled.hdr_blur.data[px][c] - lambda * base.hdr_blur.data[px][c]).abs()
                        < 1e-6
                );
            }
        }
    }

    #[test]
    fn photometric_loss_examples() {
        let crf = CrfNodes::identity(32);
        let a = ColorImage::filled(8, 8, [0.4, 0.5, 0.6]);
        let exact = photometric_loss(&a, &crf, &a).unwrap();
        assert_eq!(exact.value, 0.0);

        let mut obs = a.clone();
        for px in obs.data.iter_mut() {
            for c in 0..3 {
                px[c] -= 0.1;
            }
        }
        let offset = photometric_loss(&a, &crf, &obs).unwrap();
        assert_relative_eq!(offset.value, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn photometric_loss_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let crf = CrfNodes::identity(16);
        let (w, h) = (7, 5);
        let mut hdr = ColorImage::new(w, h);
        let mut obs = ColorImage::new(w, h);
        for px in 0..w * h {
            for c in 0..3 {
                hdr.data[px][c] = rng.random::<f64>() * 1.4 - 0.2;
                obs.data[px][c] = rng.random::<f64>();
            }
        }
        let loss = photometric_loss(&hdr, &crf, &obs).unwrap();
        let mut oracle = 0.0;
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    oracle += (crf.apply(hdr.get(x, y)[c]) - obs.get(x, y)[c]).abs();
                }
            }
        }
        oracle /= (w * h * 3) as f64;
        assert_relative_eq!(loss.value, oracle, epsilon = 1e-7);
    }

    #[test]
    fn photometric_loss_rejects_mismatch() {
        let crf = CrfNodes::identity(8);
        let a = ColorImage::new(4, 4);
        let b = ColorImage::new(4, 5);
        assert!(photometric_loss(&a, &crf, &b).is_err());
    }

    #[test]
    fn photometric_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut crf = CrfNodes::identity(8);
        for (i, q) in crf.node_hdr.iter_mut().enumerate() {
            *q = (i as f64 / 7.0).powf(1.5);
        }
        crf.project_monotone();
        let (w, h) = (5, 4);
        let mut hdr = ColorImage::new(w, h);
        let mut obs = ColorImage::new(w, h);
        for px in 0..w * h {
            for c in 0..3 {
                hdr.data[px][c] = rng.random::<f64>();
                obs.data[px][c] = rng.random::<f64>();
            }
        }
        let loss = photometric_loss(&hdr, &crf, &obs).unwrap();
        let fd_h = 1e-6;
        // Input gradients.
        for px in [0usize, 7, 13] {
            for c in 0..3 {
                let orig = hdr.data[px][c];
                hdr.data[px][c] = orig + fd_h;
                let up = photometric_loss(&hdr, &crf, &obs).unwrap().value;
                hdr.data[px][c] = orig - fd_h;
                let dn = photometric_loss(&hdr, &crf, &obs).unwrap().value;
                hdr.data[px][c] = orig;
                let fd = (up - dn) / (2.0 * fd_h);
                assert_relative_eq!(loss.grad_hdr.data[px][c], fd, epsilon = 1e-6, max_relative = 1e-4);
            }
        }
        // Node gradients.
        for node in 1..7 {
            let orig = crf.node_hdr[node];
            crf.node_hdr[node] = orig + fd_h;
            let up = photometric_loss(&hdr, &crf, &obs).unwrap().value;
            crf.node_hdr[node] = orig - fd_h;
            let dn = photometric_loss(&hdr, &crf, &obs).unwrap().value;
            crf.node_hdr[node] = orig;
            let fd = (up - dn) / (2.0 * fd_h);
            assert_relative_eq!(loss.grad_nodes[node], fd, epsilon = 1e-6, max_relative = 1e-4);
        }
    }

    #[test]
    fn mean_valid_depth_ignores_invalid() {
        let mut depth = ScalarImage::new(4, 4);
        depth.set(0, 0, 2.0);
        depth.set(1, 0, 4.0);
        let bundle = FrameBundle {
            image_obs: ColorImage::new(4, 4),
            depth_obs: depth,
            t_start: 0.0,
            exposure: 0.04,
            events: vec![],
        };
        assert_relative_eq!(bundle.mean_valid_depth(), 3.0, epsilon = 1e-12);
        assert_eq!(bundle.valid_depth_count(), 2);
    }
}
