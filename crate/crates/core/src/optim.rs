//! Adaptive-moment first-order optimizer with per-group learning rates,
//! tangent-space retraction for poses, and constraint projections.

use nalgebra::{Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::crf::CrfNodes;
use crate::render::SceneGrads;
use crate::scene::{GaussianScene, MAX_OPACITY_LOGIT, MIN_SCALE};
use crate::se3::Pose;

/// Per-group learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    pub pose: f64,
    pub mean: f64,
    pub rotation: f64,
    /// Scales, opacity, and color share one rate.
    pub appearance: f64,
    pub crf: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            pose: 2e-3,
            mean: 1.6e-3,
            rotation: 1e-3,
            appearance: 5e-3,
            crf: 1e-3,
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Flat Adam state over one parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    /// Steps skipped because a gradient was non-finite.
    pub skipped: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            skipped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Computes the update `-lr * mhat / (sqrt(vhat) + eps)` for each
    /// coordinate; `None` (and an incident count) if any gradient is
    /// non-finite, leaving the state untouched.
    pub fn compute_update(&mut self, grads: &[f64], lr: &[f64]) -> Option<Vec<f64>> {
        assert_eq!(grads.len(), self.m.len());
        assert_eq!(lr.len(), self.m.len());
        if grads.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            log::warn!("optimizer step skipped: non-finite gradient");
            return None;
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let mut update = vec![0.0; grads.len()];
        for i in 0..grads.len() {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grads[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            update[i] = -lr[i] * mhat / (vhat.sqrt() + EPS);
        }
        Some(update)
    }
}

/// Adam over a set of (start, end) pose pairs, updated by tangent-space
/// retraction. Returns the update norm for early stopping.
#[derive(Debug, Clone)]
pub struct PoseOptimizer {
    adam: Adam,
    lr: Vec<f64>,
}

impl PoseOptimizer {
    pub fn new(n_pairs: usize, lr_pose: f64) -> Self {
        Self {
            adam: Adam::new(n_pairs * 12),
            lr: vec![lr_pose; n_pairs * 12],
        }
    }

    pub fn skipped(&self) -> u64 {
        self.adam.skipped
    }

    /// One step over all pose pairs. `grads[i]` holds the (start, end)
    /// tangent gradients of pair `i`.
    pub fn step(
        &mut self,
        poses: &mut [(Pose, Pose)],
        grads: &[(Vector6<f64>, Vector6<f64>)],
    ) -> Option<f64> {
        assert_eq!(poses.len() * 12, self.adam.len());
        assert_eq!(poses.len(), grads.len());
        let mut flat = Vec::with_capacity(self.adam.len());
        for (gs, ge) in grads {
            flat.extend_from_slice(gs.as_slice());
            flat.extend_from_slice(ge.as_slice());
        }
        let update = self.adam.compute_update(&flat, &self.lr)?;
        let mut norm_sq = 0.0;
        for (i, pair) in poses.iter_mut().enumerate() {
            let ds = Vector6::from_column_slice(&update[i * 12..i * 12 + 6]);
            let de = Vector6::from_column_slice(&update[i * 12 + 6..i * 12 + 12]);
            pair.0 = pair.0.retract(&ds);
            pair.1 = pair.1.retract(&de);
            norm_sq += ds.norm_squared() + de.norm_squared();
        }
        Some(norm_sq.sqrt())
    }
}

/// Adam over all Gaussian latents with per-group learning rates and
/// post-step constraint projections.
#[derive(Debug, Clone)]
pub struct SceneOptimizer {
    adam: Adam,
    lr: Vec<f64>,
}

/// Latent layout per Gaussian: mean(3), quat(4), log_scale(3), logit(1),
/// color(3).
const LATENTS_PER_GAUSSIAN: usize = 14;

impl SceneOptimizer {
    pub fn new(n_gaussians: usize, rates: &LearningRates) -> Self {
        let mut lr = Vec::with_capacity(n_gaussians * LATENTS_PER_GAUSSIAN);
        for _ in 0..n_gaussians {
            lr.extend_from_slice(&[rates.mean; 3]);
            lr.extend_from_slice(&[rates.rotation; 4]);
            lr.extend_from_slice(&[rates.appearance; 3]);
            lr.push(rates.appearance);
            lr.extend_from_slice(&[rates.appearance; 3]);
        }
        Self {
            adam: Adam::new(n_gaussians * LATENTS_PER_GAUSSIAN),
            lr,
        }
    }

    pub fn skipped(&self) -> u64 {
        self.adam.skipped
    }

    /// One step from natural-parameter gradients; chains them into the
    /// latents, applies the update, then projects constraints.
    pub fn step(&mut self, scene: &mut GaussianScene, grads: &SceneGrads) -> Option<f64> {
        let n = scene.len();
        assert_eq!(n, grads.len());
        assert_eq!(n * LATENTS_PER_GAUSSIAN, self.adam.len());
        let mut flat = vec![0.0f64; n * LATENTS_PER_GAUSSIAN];
        for (i, g) in scene.gaussians().iter().enumerate() {
            let base = i * LATENTS_PER_GAUSSIAN;
            for k in 0..3 {
                flat[base + k] = grads.mean[i][k];
            }
            for k in 0..4 {
                flat[base + 3 + k] = grads.quat[i][k];
            }
            let s = g.scale();
            for k in 0..3 {
                // d/d(log s) = d/ds * s
                flat[base + 7 + k] = grads.scale[i][k] * s[k];
            }
            let o = g.opacity();
            flat[base + 10] = grads.opacity[i] * o * (1.0 - o);
            for k in 0..3 {
                flat[base + 11 + k] = grads.color[i][k];
            }
        }
        let update = self.adam.compute_update(&flat, &self.lr)?;
        let mut norm_sq = 0.0;
        for (i, g) in scene.gaussians_mut().iter_mut().enumerate() {
            let base = i * LATENTS_PER_GAUSSIAN;
            for k in 0..3 {
                g.mean[k] += update[base + k];
            }
            g.rot.w += update[base + 3];
            g.rot.i += update[base + 4];
            g.rot.j += update[base + 5];
            g.rot.k += update[base + 6];
            for k in 0..3 {
                g.log_scale[k] += update[base + 7 + k];
            }
            g.opacity_logit += update[base + 10];
            for k in 0..3 {
                g.color[k] += update[base + 11 + k];
            }
            norm_sq += update[base..base + LATENTS_PER_GAUSSIAN]
                .iter()
                .map(|u| u * u)
                .sum::<f64>();
            project_gaussian_constraints(g);
        }
        Some(norm_sq.sqrt())
    }
}

/// Clamps latents back into their feasible ranges.
pub fn project_gaussian_constraints(g: &mut crate::scene::Gaussian) {
    let min_log = MIN_SCALE.ln();
    for k in 0..3 {
        if g.log_scale[k] < min_log {
            g.log_scale[k] = min_log;
        }
        if g.color[k] < 0.0 {
            g.color[k] = 0.0;
        }
    }
    g.opacity_logit = g.opacity_logit.clamp(-MAX_OPACITY_LOGIT, MAX_OPACITY_LOGIT);
    let norm = g.rot.norm();
    if norm < 1e-12 || !norm.is_finite() {
        g.rot = nalgebra::Quaternion::new(1.0, 0.0, 0.0, 0.0);
    } else {
        g.rot /= norm;
    }
}

/// Adam over the CRF control nodes with the monotone projection.
#[derive(Debug, Clone)]
pub struct CrfOptimizer {
    adam: Adam,
    lr: Vec<f64>,
}

impl CrfOptimizer {
    pub fn new(n_nodes: usize, lr_crf: f64) -> Self {
        Self {
            adam: Adam::new(n_nodes),
            lr: vec![lr_crf; n_nodes],
        }
    }

    pub fn skipped(&self) -> u64 {
        self.adam.skipped
    }

    pub fn step(&mut self, crf: &mut CrfNodes, grads: &[f64]) -> Option<f64> {
        let update = self.adam.compute_update(grads, &self.lr)?;
        for (q, u) in crf.node_hdr.iter_mut().zip(update.iter()) {
            *q += u;
        }
        crf.project_monotone();
        Some(update.iter().map(|u| u * u).sum::<f64>().sqrt())
    }
}

/// Chains natural scale/opacity gradients into latent space without
/// stepping; used by gradient checks that work on latents directly.
pub fn natural_to_latent_grads(scene: &GaussianScene, grads: &SceneGrads) -> Vec<f64> {
    let n = scene.len();
    let mut flat = vec![0.0f64; n * LATENTS_PER_GAUSSIAN];
    for (i, g) in scene.gaussians().iter().enumerate() {
        let base = i * LATENTS_PER_GAUSSIAN;
        for k in 0..3 {
            flat[base + k] = grads.mean[i][k];
        }
        for k in 0..4 {
            flat[base + 3 + k] = grads.quat[i][k];
        }
        let s = g.scale();
        for k in 0..3 {
            flat[base + 7 + k] = grads.scale[i][k] * s[k];
        }
        let o = g.opacity();
        flat[base + 10] = grads.opacity[i] * o * (1.0 - o);
        for k in 0..3 {
            flat[base + 11 + k] = grads.color[i][k];
        }
    }
    flat
}

/// Scale gradients expressed on the natural parameters, for callers that
/// add regularizer terms (e.g. isotropic) onto render gradients.
pub fn add_scale_grads(grads: &mut SceneGrads, extra: &[Vector3<f64>], weight: f64) {
    for (g, e) in grads.scale.iter_mut().zip(extra.iter()) {
        *g += e * weight;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_gradient_means_no_change() {
        let mut adam = Adam::new(3);
        let update = adam
            .compute_update(&[0.0, 0.0, 0.0], &[0.1, 0.1, 0.1])
            .unwrap();
        assert_eq!(update, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut adam = Adam::new(1);
        let mut x = 1.0;
        for _ in 0..100 {
            let update = adam.compute_update(&[2.0], &[0.01]).unwrap();
            x += update[0];
        }
        assert!(x < 1.0 - 0.5, "x barely moved: {x}");
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut adam = Adam::new(2);
        assert!(adam.compute_update(&[1.0, f64::NAN], &[0.1, 0.1]).is_none());
        assert_eq!(adam.skipped, 1);
        // State untouched: next valid step behaves like the first.
        let u = adam.compute_update(&[1.0, 1.0], &[0.1, 0.1]).unwrap();
        assert_relative_eq!(u[0], -0.1, epsilon = 1e-6);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x) = (x - 3)^2 / 2, grad = x - 3.
        let target = 3.0;
        let mut x = 2.0;
        let mut adam = Adam::new(1);
        let mut converged_at = None;
        for step in 0..500 {
            let g = x - target;
            let update = adam.compute_update(&[g], &[0.05]).unwrap();
            x += update[0];
            if (x - target).abs() < 1e-5 && converged_at.is_none() {
                converged_at = Some(step);
            }
        }
        assert!(
            (x - target).abs() < 1e-5,
            "did not converge: x = {x}, |err| = {}",
            (x - target).abs()
        );
    }

    #[test]
    fn pose_step_moves_against_gradient() {
        let mut opt = PoseOptimizer::new(1, 1e-2);
        let mut poses = [(Pose::identity(), Pose::identity())];
        let g = (
            Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0),
            Vector6::zeros(),
        );
        let norm = opt.step(&mut poses, &[g]).unwrap();
        assert!(norm > 0.0);
        assert!(poses[0].0.translation().x < 0.0);
        assert_eq!(*poses[0].1.translation(), nalgebra::Vector3::zeros());
    }

    #[test]
    fn scene_step_respects_constraints() {
        use crate::scene::Gaussian;
        use nalgebra::UnitQuaternion;
        let mut scene = GaussianScene::new();
        scene.push(
            Gaussian::from_natural(
                Vector3::zeros(),
                UnitQuaternion::identity(),
                Vector3::new(1e-7, 0.1, 0.1),
                0.5,
                Vector3::new(0.0, 0.5, 1.0),
            ),
            0,
        );
        let mut opt = SceneOptimizer::new(1, &LearningRates::default());
        let mut grads = SceneGrads::zeros(1);
        grads.scale[0] = Vector3::new(1e6, 0.0, 0.0); // push scale down hard
        grads.color[0] = Vector3::new(1e6, 0.0, 0.0); // push color negative
        for _ in 0..50 {
            opt.step(&mut scene, &grads).unwrap();
        }
        let g = scene.get(0);
        assert!(g.scale().x >= MIN_SCALE);
        assert!(g.color.x >= 0.0);
        assert!((g.rot.norm() - 1.0).abs() < 1e-9);
        let o = g.opacity();
        assert!(o > 0.0 && o < 1.0);
    }

    #[test]
    fn crf_step_keeps_monotonicity() {
        let mut crf = CrfNodes::identity(16);
        let mut opt = CrfOptimizer::new(16, 0.05);
        let mut grads = vec![0.0; 16];
        grads[7] = 1.0;
        grads[8] = -1.0; // squeeze two nodes toward each other
        for _ in 0..100 {
            opt.step(&mut crf, &grads).unwrap();
        }
        assert!(crf.node_hdr.windows(2).all(|w| w[1] > w[0]));
        assert!(crf.node_hdr[0] >= 0.0 && *crf.node_hdr.last().unwrap() <= 1.0);
    }
}
