//! Tracking and mapping objectives assembled from the loss primitives.
//!
//! One frame's objective is
//! `lambda_E * L_E + lambda_ID * (lambda_I * L_I + lambda_D * L_D)`;
//! the mapping objective sums it over a keyframe set and adds
//! `lambda_iso * L_iso`.

use nalgebra::{Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::crf::CrfNodes;
use crate::error::{EvsplatError, Result};
use crate::events::{accumulate_events, event_loss, EventMap, EventParams};
use crate::imaging::{integrate_blur, luma, photometric_loss, FrameBundle, LUMA_WEIGHTS};
use crate::img::{ColorImage, ScalarImage};
use crate::render::{render_backward, RasterSettings, SceneGrads};
use crate::scene::GaussianScene;
use crate::se3::{assign_sub_times, ExposureTrajectory};

/// Weights of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_e: f64,
    pub lambda_i: f64,
    pub lambda_d: f64,
    pub lambda_id: f64,
    pub lambda_ne: f64,
    pub lambda_iso: f64,
}

impl LossWeights {
    pub fn synthetic() -> Self {
        Self {
            lambda_e: 0.05,
            lambda_i: 0.9,
            lambda_d: 0.1,
            lambda_id: 0.95,
            lambda_ne: 0.4,
            lambda_iso: 10.0,
        }
    }

    pub fn real() -> Self {
        Self {
            lambda_e: 0.15,
            lambda_id: 0.85,
            ..Self::synthetic()
        }
    }
}

/// Depth loss result: min-over-latents mean L1 on valid pixels.
#[derive(Debug, Clone)]
pub struct DepthLoss {
    pub value: f64,
    /// Index of the latent depth achieving the minimum.
    pub argmin: usize,
    /// d(value)/d(latent depth at argmin).
    pub grad: ScalarImage,
    /// Set when the observation had no valid pixels (value forced to 0).
    pub no_valid: bool,
}

/// Minimum over latent depth renders of the mean L1 distance to the
/// observed depth on valid pixels. Gradients flow only into the argmin
/// render; ties break toward the smallest index.
pub fn depth_loss(latent_depths: &[&ScalarImage], depth_obs: &ScalarImage) -> Result<DepthLoss> {
    if latent_depths.is_empty() {
        return Err(EvsplatError::InvalidArgument(
            "need at least one latent depth".into(),
        ));
    }
    for d in latent_depths {
        if !d.same_dims(depth_obs) {
            return Err(EvsplatError::DimensionMismatch {
                expected: format!("{}x{}", depth_obs.width, depth_obs.height),
                got: format!("{}x{}", d.width, d.height),
            });
        }
    }
    let valid: Vec<usize> = depth_obs
        .data
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > 0.0)
        .map(|(i, _)| i)
        .collect();
    if valid.is_empty() {
        return Ok(DepthLoss {
            value: 0.0,
            argmin: 0,
            grad: ScalarImage::new(depth_obs.width, depth_obs.height),
            no_valid: true,
        });
    }
    let inv = 1.0 / valid.len() as f64;
    let mut best = (0usize, f64::INFINITY);
    for (k, depth) in latent_depths.iter().enumerate() {
        let err: f64 = valid
            .iter()
            .map(|&px| (depth.data[px] - depth_obs.data[px]).abs())
            .sum::<f64>()
            * inv;
        if err < best.1 {
            best = (k, err);
        }
    }
    let (argmin, value) = best;
    let mut grad = ScalarImage::new(depth_obs.width, depth_obs.height);
    for &px in &valid {
        grad.data[px] = sign(latent_depths[argmin].data[px] - depth_obs.data[px]) * inv;
    }
    Ok(DepthLoss {
        value,
        argmin,
        grad,
        no_valid: false,
    })
}

/// Mean over Gaussians of the L1 deviation of the scale vector from its
/// own component mean. Returns the loss and d(loss)/d(scale).
pub fn isotropic_loss(scene: &GaussianScene) -> (f64, Vec<Vector3<f64>>) {
    let n = scene.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grads = vec![Vector3::zeros(); n];
    for (i, g) in scene.gaussians().iter().enumerate() {
        let s = g.scale();
        let mean = (s.x + s.y + s.z) / 3.0;
        let dev = Vector3::new(s.x - mean, s.y - mean, s.z - mean);
        value += dev.x.abs() + dev.y.abs() + dev.z.abs();
        let signs = Vector3::new(sign(dev.x), sign(dev.y), sign(dev.z));
        let sign_mean = (signs.x + signs.y + signs.z) / 3.0;
        grads[i] = (signs - Vector3::new(sign_mean, sign_mean, sign_mean)) * inv;
    }
    (value * inv, grads)
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

/// A frame bundle plus its ingestion-time event digest: sub-times fixed
/// by the event quantile split and the accumulated per-interval maps.
#[derive(Debug, Clone)]
pub struct FrameObservation {
    pub bundle: FrameBundle,
    pub sub_times: Vec<f64>,
    pub event_maps: Vec<EventMap>,
    pub dropped_events: usize,
}

impl FrameObservation {
    pub fn new(bundle: FrameBundle, k: usize) -> Result<Self> {
        let times: Vec<f64> = bundle.events.iter().map(|e| e.t).collect();
        let sub_times = assign_sub_times(bundle.exposure, k, &times)?;
        let (event_maps, dropped_events) = accumulate_events(
            &bundle.events,
            &sub_times,
            bundle.image_obs.width,
            bundle.image_obs.height,
        );
        Ok(Self {
            bundle,
            sub_times,
            event_maps,
            dropped_events,
        })
    }

    /// Builds the exposure trajectory for this frame from endpoint poses,
    /// reusing the frozen sub-times.
    pub fn trajectory(&self, start: crate::se3::Pose, end: crate::se3::Pose) -> ExposureTrajectory {
        ExposureTrajectory {
            start,
            end,
            exposure: self.bundle.exposure,
            sub_times: self.sub_times.clone(),
        }
    }
}

/// Which gradients the caller wants computed.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradScope {
    pub poses: bool,
    pub scene: bool,
    pub crf: bool,
}

impl GradScope {
    pub fn tracking() -> Self {
        Self {
            poses: true,
            scene: false,
            crf: false,
        }
    }

    pub fn mapping(crf: bool) -> Self {
        Self {
            poses: true,
            scene: true,
            crf,
        }
    }

    pub fn all() -> Self {
        Self {
            poses: true,
            scene: true,
            crf: true,
        }
    }

    fn any(&self) -> bool {
        self.poses || self.scene || self.crf
    }
}

/// One frame's objective value, loss decomposition, and gradients.
#[derive(Debug, Clone)]
pub struct FrameEval {
    pub value: f64,
    pub l_i: f64,
    pub l_d: f64,
    pub l_he: f64,
    pub l_ne: f64,
    pub l_e: f64,
    pub depth_argmin: usize,
    pub depth_no_valid: bool,
    pub grad_start: Vector6<f64>,
    pub grad_end: Vector6<f64>,
    pub scene_grads: Option<SceneGrads>,
    pub crf_node_grads: Option<Vec<f64>>,
}

/// Evaluates one frame's objective
/// `lambda_E L_E + lambda_ID (lambda_I L_I + lambda_D L_D)` and routes
/// gradients from every latent render through the interpolation chain
/// into the endpoint pose tangents (and optionally into the Gaussians
/// and CRF nodes).
pub fn evaluate_frame(
    obs: &FrameObservation,
    scene: &GaussianScene,
    traj: &ExposureTrajectory,
    crf: &CrfNodes,
    weights: &LossWeights,
    eparams: &EventParams,
    intr: &CameraIntrinsics,
    settings: &RasterSettings,
    scope: GradScope,
) -> Result<FrameEval> {
    let k = traj.intervals();
    let blur = integrate_blur(scene, traj, intr, settings)?;
    let (w, h) = (intr.width, intr.height);

    // Photometric term through the CRF.
    let photo = photometric_loss(&blur.hdr_blur, crf, &obs.bundle.image_obs)?;

    // Event term from consecutive latent renders.
    let lumas: Vec<Vec<f64>> = blur
        .latents
        .iter()
        .map(|r| r.color.data.iter().map(luma).collect())
        .collect();
    let eparams_eff = EventParams {
        lambda_ne: weights.lambda_ne,
        ..*eparams
    };
    let (ev, preds_grad): (Option<_>, Option<Vec<ScalarImage>>) = if weights.lambda_e > 0.0 {
        let mut preds = Vec::with_capacity(k);
        for i in 1..=k {
            let mut pred = ScalarImage::new(w, h);
            for px in 0..w * h {
                let prev = (lumas[i - 1][px] + eparams_eff.log_eps).max(1e-12);
                let cur = (lumas[i][px] + eparams_eff.log_eps).max(1e-12);
                pred.data[px] = cur.ln() - prev.ln();
            }
            preds.push(pred);
        }
        let loss = event_loss(&obs.event_maps, &preds, &eparams_eff)?;
        let grads = loss.grad_preds.clone();
        (Some(loss), Some(grads))
    } else {
        (None, None)
    };
    let (l_he, l_ne, l_e) = ev
        .as_ref()
        .map(|e| (e.l_he, e.l_ne, e.l_e))
        .unwrap_or((0.0, 0.0, 0.0));

    // Depth term over all latent depths.
    let latent_depths: Vec<&ScalarImage> = blur.latents.iter().map(|r| &r.depth).collect();
    let dl = depth_loss(&latent_depths, &obs.bundle.depth_obs)?;

    let value = weights.lambda_e * l_e
        + weights.lambda_id * (weights.lambda_i * photo.value + weights.lambda_d * dl.value);

    let mut eval = FrameEval {
        value,
        l_i: photo.value,
        l_d: dl.value,
        l_he,
        l_ne,
        l_e,
        depth_argmin: dl.argmin,
        depth_no_valid: dl.no_valid,
        grad_start: Vector6::zeros(),
        grad_end: Vector6::zeros(),
        scene_grads: None,
        crf_node_grads: None,
    };
    if !scope.any() {
        return Ok(eval);
    }

    // Assemble per-latent-render gradient images.
    let wi = weights.lambda_id * weights.lambda_i;
    let wd = weights.lambda_id * weights.lambda_d;
    let mut grad_colors: Vec<ColorImage> = (0..=k).map(|_| ColorImage::new(w, h)).collect();
    let mut grad_depths: Vec<ScalarImage> = (0..=k).map(|_| ScalarImage::new(w, h)).collect();
    let mut active = vec![false; k + 1];

    if wi > 0.0 {
        let inv_k = 1.0 / k as f64;
        for (i, gc) in grad_colors.iter_mut().enumerate().take(k) {
            for px in 0..w * h {
                for c in 0..3 {
                    gc.data[px][c] += wi * inv_k * photo.grad_hdr.data[px][c];
                }
            }
            active[i] = true;
        }
    }
    if let Some(gp) = &preds_grad {
        for (i, g) in gp.iter().enumerate() {
            // Prediction i spans latents i and i+1.
            for px in 0..w * h {
                let coef = weights.lambda_e * g.data[px];
                if coef == 0.0 {
                    continue;
                }
                let cur = (lumas[i + 1][px] + eparams_eff.log_eps).max(1e-12);
                let prev = (lumas[i][px] + eparams_eff.log_eps).max(1e-12);
                for c in 0..3 {
                    grad_colors[i + 1].data[px][c] += coef * LUMA_WEIGHTS[c] / cur;
                    grad_colors[i].data[px][c] -= coef * LUMA_WEIGHTS[c] / prev;
                }
            }
            active[i] = true;
            active[i + 1] = true;
        }
    }
    if wd > 0.0 && !dl.no_valid {
        for px in 0..w * h {
            grad_depths[dl.argmin].data[px] = wd * dl.grad.data[px];
        }
        active[dl.argmin] = true;
    }

    // Backward through each active latent render, then through the
    // interpolation into the endpoint tangents. Latents are independent;
    // the reduction runs in sub-time order for determinism.
    let per_latent: Vec<Option<crate::render::RenderGrads>> = (0..=k)
        .into_par_iter()
        .map(|i| {
            if !active[i] {
                return Ok(None);
            }
            render_backward(scene, &blur.latents[i], &grad_colors[i], &grad_depths[i]).map(Some)
        })
        .collect::<Result<_>>()?;

    let mut scene_grads = if scope.scene {
        Some(SceneGrads::zeros(scene.len()))
    } else {
        None
    };
    for (i, grads) in per_latent.iter().enumerate() {
        let Some(grads) = grads else { continue };
        if scope.poses {
            let jac = traj.interpolation_jacobian(traj.sub_times[i]);
            jac.accumulate(&grads.pose, &mut eval.grad_start, &mut eval.grad_end);
        }
        if let Some(sg) = scene_grads.as_mut() {
            sg.add_assign(&grads.scene);
        }
    }
    eval.scene_grads = scene_grads;
    if scope.crf {
        eval.crf_node_grads = Some(photo.grad_nodes.iter().map(|g| g * wi).collect());
    }
    Ok(eval)
}

/// Mapping objective over an extended keyframe window.
#[derive(Debug)]
pub struct MappingEval {
    pub value: f64,
    pub l_iso: f64,
    pub scene_grads: SceneGrads,
    pub crf_node_grads: Vec<f64>,
    /// Per input frame: (grad_start, grad_end); zero for frames outside
    /// the pose mask.
    pub pose_grads: Vec<(Vector6<f64>, Vector6<f64>)>,
    pub frame_values: Vec<f64>,
}

/// Sums per-keyframe objectives plus the isotropic regularizer.
/// `pose_mask[i]` enables pose gradients for frame `i`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_mapping(
    frames: &[(&FrameObservation, &ExposureTrajectory)],
    pose_mask: &[bool],
    scene: &GaussianScene,
    crf: &CrfNodes,
    weights: &LossWeights,
    eparams: &EventParams,
    intr: &CameraIntrinsics,
    settings: &RasterSettings,
    want_crf: bool,
) -> Result<MappingEval> {
    assert_eq!(frames.len(), pose_mask.len());
    let evals: Vec<FrameEval> = frames
        .par_iter()
        .enumerate()
        .map(|(i, (obs, traj))| {
            let scope = GradScope {
                poses: pose_mask[i],
                scene: true,
                crf: want_crf,
            };
            evaluate_frame(obs, scene, traj, crf, weights, eparams, intr, settings, scope)
        })
        .collect::<Result<_>>()?;

    let (l_iso, iso_grads) = isotropic_loss(scene);
    let mut scene_grads = SceneGrads::zeros(scene.len());
    for (i, g) in iso_grads.iter().enumerate() {
        scene_grads.scale[i] += g * weights.lambda_iso;
    }
    let mut value = weights.lambda_iso * l_iso;
    let mut crf_node_grads = vec![0.0f64; crf.len()];
    let mut pose_grads = Vec::with_capacity(frames.len());
    let mut frame_values = Vec::with_capacity(frames.len());
    for e in &evals {
        value += e.value;
        frame_values.push(e.value);
        if let Some(sg) = &e.scene_grads {
            scene_grads.add_assign(sg);
        }
        if let Some(cg) = &e.crf_node_grads {
            for (a, b) in crf_node_grads.iter_mut().zip(cg.iter()) {
                *a += b;
            }
        }
        pose_grads.push((e.grad_start, e.grad_end));
    }
    Ok(MappingEval {
        value,
        l_iso,
        scene_grads,
        crf_node_grads,
        pose_grads,
        frame_values,
    })
}
