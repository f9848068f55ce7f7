//! The online SLAM loop: per-frame tracking, keyframe selection, window
//! maintenance, map growth, and pruning. Strictly sequential alternation
//! of tracking and mapping; inner loss evaluations parallelize with
//! deterministic reductions, so a fixed seed and dataset reproduce runs
//! bit for bit.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraIntrinsics;
use crate::config::RunConfig;
use crate::crf::CrfNodes;
use crate::dataset::{write_trajectory, Dataset};
use crate::error::{EvsplatError, Result};
use crate::metrics::{compute_ate, compute_psnr, compute_ssim, MetricsReport};
use crate::objective::{evaluate_frame, evaluate_mapping, FrameObservation, GradScope, LossWeights};
use crate::optim::{CrfOptimizer, PoseOptimizer, SceneOptimizer};
use crate::render::{render, visible_ids_from_output, RasterSettings};
use crate::scene::GaussianScene;
use crate::se3::Pose;

/// Peak-contribution threshold defining Gaussian visibility for IoU.
pub const VISIBILITY_ALPHA: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: u64,
    pub frame_index: usize,
    pub obs: Arc<FrameObservation>,
    pub start: Pose,
    pub end: Pose,
    /// Ids of Gaussians visible at the exposure-end pose; recomputed
    /// after every pose or map update touching this keyframe.
    pub visible: Vec<u64>,
}

/// Per-frame trajectory log entry.
#[derive(Debug, Clone)]
pub struct FrameLog {
    pub frame_index: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub start: Pose,
    pub end: Pose,
    pub lost: bool,
    pub keyframe: Option<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct RunStats {
    pub tracking_seconds: f64,
    pub mapping_seconds: f64,
    pub tracking_iterations: usize,
    pub mapping_iterations: usize,
    pub dropped_events: usize,
    pub lost_frames: usize,
    pub optimizer_skipped: u64,
    pub inserted_gaussians: usize,
    pub pruned_gaussians: usize,
}

#[derive(Debug)]
pub struct SlamState {
    pub config: RunConfig,
    pub intrinsics: CameraIntrinsics,
    pub settings: RasterSettings,
    pub scene: GaussianScene,
    pub crf: CrfNodes,
    pub window: Vec<Keyframe>,
    pub historical: Vec<Keyframe>,
    pub trajectory_log: Vec<FrameLog>,
    pub rng: ChaCha8Rng,
    pub next_kf_id: u64,
    pub stats: RunStats,
}

/// Result of one tracking step.
#[derive(Debug, Clone)]
pub struct TrackOutcome {
    pub start: Pose,
    pub end: Pose,
    pub lost: bool,
    pub final_value: f64,
    pub iterations: usize,
    pub skipped: u64,
}

/// Minimizes the tracking objective over both endpoint pose tangents
/// with the scene and CRF frozen. A frame carrying no signal (black,
/// eventless, depthless) or a non-finite objective marks the frame lost
/// and keeps the initialization.
#[allow(clippy::too_many_arguments)]
pub fn optimize_frame_poses(
    obs: &FrameObservation,
    scene: &GaussianScene,
    crf: &CrfNodes,
    config: &RunConfig,
    intr: &CameraIntrinsics,
    settings: &RasterSettings,
    init_start: Pose,
    init_end: Pose,
) -> Result<TrackOutcome> {
    let (mut start, mut end) = (init_start, init_end);
    let mut outcome = TrackOutcome {
        start,
        end,
        lost: false,
        final_value: f64::NAN,
        iterations: 0,
        skipped: 0,
    };
    let black = obs
        .bundle
        .image_obs
        .data
        .iter()
        .all(|px| crate::imaging::luma(px) < 1e-9);
    if black && obs.bundle.events.is_empty() && obs.bundle.valid_depth_count() == 0 {
        outcome.lost = true;
        return Ok(outcome);
    }
    let weights = config.tracking_weights();
    let eparams = config.event_params();
    let mut opt = PoseOptimizer::new(1, config.lr.pose);
    for _ in 0..config.iters.tracking {
        let traj = obs.trajectory(start, end);
        let eval = evaluate_frame(
            obs,
            scene,
            &traj,
            crf,
            &weights,
            &eparams,
            intr,
            settings,
            GradScope::tracking(),
        )?;
        outcome.iterations += 1;
        if !eval.value.is_finite() {
            outcome.lost = true;
            start = init_start;
            end = init_end;
            break;
        }
        outcome.final_value = eval.value;
        let mut poses = [(start, end)];
        let Some(norm) = opt.step(&mut poses, &[(eval.grad_start, eval.grad_end)]) else {
            outcome.lost = true;
            start = init_start;
            end = init_end;
            break;
        };
        (start, end) = poses[0];
        if norm < config.iters.tracking_min_update {
            break;
        }
    }
    outcome.skipped = opt.skipped();
    outcome.start = start;
    outcome.end = end;
    Ok(outcome)
}

/// Tracking-only mode against a frozen checkpoint: every frame is
/// tracked (including the first, anchored at identity) and no mapping
/// runs.
pub fn track_sequence(
    dataset: &Dataset,
    config: RunConfig,
    scene: GaussianScene,
    crf: CrfNodes,
) -> Result<(Vec<FrameLog>, RunStats)> {
    let settings = config.raster.settings();
    let intr = dataset.intrinsics;
    let mut log: Vec<FrameLog> = Vec::with_capacity(dataset.frames);
    let mut stats = RunStats::default();
    for i in 0..dataset.frames {
        let t0 = Instant::now();
        let obs = FrameObservation::new(dataset.frame_bundle(i)?, config.k_intervals)?;
        let (init_start, init_end) = if let Some(prev) = log.last() {
            let rel = prev.end.compose(&prev.start.inverse());
            (prev.end, rel.compose(&prev.end))
        } else {
            (Pose::identity(), Pose::identity())
        };
        let outcome =
            optimize_frame_poses(&obs, &scene, &crf, &config, &intr, &settings, init_start, init_end)?;
        stats.tracking_iterations += outcome.iterations;
        stats.optimizer_skipped += outcome.skipped;
        stats.dropped_events += obs.dropped_events;
        if outcome.lost {
            stats.lost_frames += 1;
        }
        stats.tracking_seconds += t0.elapsed().as_secs_f64();
        log.push(FrameLog {
            frame_index: i,
            t_start: obs.bundle.t_start,
            t_end: obs.bundle.t_end(),
            start: outcome.start,
            end: outcome.end,
            lost: outcome.lost,
            keyframe: None,
        });
    }
    Ok((log, stats))
}

/// Summary of one mapping burst.
#[derive(Debug, Clone, Copy)]
pub struct MapUpdateSummary {
    pub first_value: f64,
    pub last_value: f64,
    pub inserted: usize,
    pub pruned: usize,
}

fn iou(a: &[u64], b: &[u64]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let mut i = 0;
    let mut j = 0;
    let mut inter = 0usize;
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

impl SlamState {
    /// Anchors the world frame to the first camera, seeds the map from
    /// the first depth map, and runs one mapping burst.
    pub fn initialize(
        config: RunConfig,
        intrinsics: CameraIntrinsics,
        first: FrameObservation,
    ) -> Result<Self> {
        if first.bundle.valid_depth_count() == 0 {
            return Err(EvsplatError::InitFailure(
                "first frame has no valid depth".into(),
            ));
        }
        let settings = config.raster.settings();
        let mut state = Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            scene: GaussianScene::new(),
            crf: CrfNodes::identity(config.crf_nodes),
            window: Vec::new(),
            historical: Vec::new(),
            trajectory_log: Vec::new(),
            next_kf_id: 0,
            stats: RunStats::default(),
            intrinsics,
            settings,
            config,
        };
        let t0 = Instant::now();
        let (inserted, _) = state.scene.insert_from_depth(
            &first.bundle.depth_obs,
            &first.bundle.image_obs,
            &Pose::identity(),
            &state.intrinsics,
            state.config.insert.stride,
            None,
            0,
        );
        if inserted == 0 {
            return Err(EvsplatError::InitFailure(
                "depth back-projection produced no Gaussians".into(),
            ));
        }
        state.stats.inserted_gaussians += inserted;
        state.stats.dropped_events += first.dropped_events;

        let obs = Arc::new(first);
        // Init burst: fit the map (and CRF) to the first frame with the
        // pose anchored.
        let weights = state.config.mapping_weights();
        let eparams = state.config.event_params();
        let mut scene_opt = SceneOptimizer::new(state.scene.len(), &state.config.lr);
        let mut crf_opt = CrfOptimizer::new(state.crf.len(), state.config.lr.crf);
        for _ in 0..state.config.iters.init {
            let traj = obs.trajectory(Pose::identity(), Pose::identity());
            let frames = [(obs.as_ref(), &traj)];
            let eval = evaluate_mapping(
                &frames,
                &[false],
                &state.scene,
                &state.crf,
                &weights,
                &eparams,
                &state.intrinsics,
                &state.settings,
                state.config.toggles.crf,
            )?;
            scene_opt.step(&mut state.scene, &eval.scene_grads);
            if state.config.toggles.crf {
                crf_opt.step(&mut state.crf, &eval.crf_node_grads);
            }
            state.stats.mapping_iterations += 1;
        }
        state.stats.optimizer_skipped += scene_opt.skipped() + crf_opt.skipped();

        let out = render(&state.scene, &Pose::identity(), &state.intrinsics, &state.settings)?;
        let visible = visible_ids_from_output(&state.scene, &out, VISIBILITY_ALPHA);
        state.observe(&visible);
        let exposure = obs.bundle.exposure;
        let t_start = obs.bundle.t_start;
        state.window.push(Keyframe {
            id: 0,
            frame_index: 0,
            obs,
            start: Pose::identity(),
            end: Pose::identity(),
            visible,
        });
        state.next_kf_id = 1;
        state.trajectory_log.push(FrameLog {
            frame_index: 0,
            t_start,
            t_end: t_start + exposure,
            start: Pose::identity(),
            end: Pose::identity(),
            lost: false,
            keyframe: Some(0),
        });
        state.stats.mapping_seconds += t0.elapsed().as_secs_f64();
        Ok(state)
    }

    fn observe(&mut self, visible: &[u64]) {
        let mut vi = 0usize;
        let ids = self.scene.ids().to_vec();
        for (idx, id) in ids.iter().enumerate() {
            if vi >= visible.len() {
                break;
            }
            if *id == visible[vi] {
                self.scene.mark_observed(idx);
                vi += 1;
            }
        }
    }

    /// Constant-velocity pose initialization from the last two logged
    /// endpoint poses.
    fn extrapolate(&self) -> (Pose, Pose) {
        let prev = self.trajectory_log.last().expect("initialized");
        let rel = prev.end.compose(&prev.start.inverse());
        (prev.end, rel.compose(&prev.end))
    }

    /// Tracks one frame: both endpoint pose tangents are optimized
    /// against the frozen scene. Appends to the trajectory log.
    pub fn track_frame(&mut self, obs: &FrameObservation) -> Result<TrackOutcome> {
        let t0 = Instant::now();
        let (init_start, init_end) = self.extrapolate();
        let outcome = optimize_frame_poses(
            obs,
            &self.scene,
            &self.crf,
            &self.config,
            &self.intrinsics,
            &self.settings,
            init_start,
            init_end,
        )?;
        self.stats.optimizer_skipped += outcome.skipped;
        if outcome.lost {
            self.stats.lost_frames += 1;
        }
        self.stats.dropped_events += obs.dropped_events;
        self.stats.tracking_iterations += outcome.iterations;
        self.stats.tracking_seconds += t0.elapsed().as_secs_f64();
        self.trajectory_log.push(FrameLog {
            frame_index: self.trajectory_log.len(),
            t_start: obs.bundle.t_start,
            t_end: obs.bundle.t_end(),
            start: outcome.start,
            end: outcome.end,
            lost: outcome.lost,
            keyframe: None,
        });
        Ok(outcome)
    }

    /// Keyframe rule: insert when the visible-Gaussian IoU against the
    /// last keyframe falls below tau_iou, or the camera moved more than
    /// tau_move times the frame's mean valid depth.
    pub fn keyframe_decision(&self, obs: &FrameObservation, end: &Pose) -> Result<bool> {
        let out = render(&self.scene, end, &self.intrinsics, &self.settings)?;
        let visible = visible_ids_from_output(&self.scene, &out, VISIBILITY_ALPHA);
        let last = self.window.last().expect("initialized");
        let overlap = iou(&visible, &last.visible);
        if overlap < self.config.keyframe.tau_iou {
            return Ok(true);
        }
        let mean_depth = obs.bundle.mean_valid_depth();
        let moved = (end.camera_center() - last.end.camera_center()).norm();
        Ok(moved > self.config.keyframe.tau_move * mean_depth)
    }

    /// Inserts the keyframe and enforces overlap and capacity rules:
    /// drop keyframes whose IoU with the new one falls below tau_drop,
    /// then evict the most redundant keyframe while over capacity (the
    /// one whose visible set is most covered by the union of the
    /// others; ties break toward the lowest id).
    pub fn maintain_window(&mut self, new_kf: Keyframe) {
        let new_id = new_kf.id;
        let new_visible = new_kf.visible.clone();
        self.window.push(new_kf);
        let tau_drop = self.config.keyframe.tau_drop;
        let mut kept = Vec::with_capacity(self.window.len());
        for kf in self.window.drain(..) {
            if kf.id != new_id && iou(&kf.visible, &new_visible) < tau_drop {
                self.historical.push(kf);
            } else {
                kept.push(kf);
            }
        }
        self.window = kept;

        while self.window.len() > self.config.window_max {
            let mut worst: Option<(usize, f64, u64)> = None;
            for (i, kf) in self.window.iter().enumerate() {
                if kf.id == new_id {
                    continue;
                }
                let mut union: Vec<u64> = Vec::new();
                for (j, other) in self.window.iter().enumerate() {
                    if i != j {
                        union.extend_from_slice(&other.visible);
                    }
                }
                union.sort_unstable();
                union.dedup();
                let covered = kf
                    .visible
                    .iter()
                    .filter(|id| union.binary_search(id).is_ok())
                    .count();
                let coverage = if kf.visible.is_empty() {
                    1.0
                } else {
                    covered as f64 / kf.visible.len() as f64
                };
                let better = match worst {
                    None => true,
                    Some((_, best_cov, best_id)) => {
                        coverage > best_cov + 1e-12
                            || ((coverage - best_cov).abs() <= 1e-12 && kf.id < best_id)
                    }
                };
                if better {
                    worst = Some((i, coverage, kf.id));
                }
            }
            let Some((idx, _, _)) = worst else { break };
            let removed = self.window.remove(idx);
            self.historical.push(removed);
        }
    }

    /// Densifies from the new keyframe's depth, runs the mapping burst
    /// over the window plus two random historical keyframes, prunes,
    /// and refreshes visibility bookkeeping.
    pub fn map_update(&mut self) -> Result<MapUpdateSummary> {
        let t0 = Instant::now();
        let new_pos = self.window.len() - 1;
        let new_kf_id = self.window[new_pos].id;
        let end_pose = self.window[new_pos].end;
        let obs = self.window[new_pos].obs.clone();

        // Grow the map where the current render is not yet covered.
        let coverage = render(&self.scene, &end_pose, &self.intrinsics, &self.settings)?;
        let (inserted, _) = self.scene.insert_from_depth(
            &obs.bundle.depth_obs,
            &obs.bundle.image_obs,
            &end_pose,
            &self.intrinsics,
            self.config.insert.stride,
            Some((&coverage.alpha, self.config.insert.coverage_alpha)),
            new_kf_id,
        );
        self.stats.inserted_gaussians += inserted;

        // Extended window: add two random historical keyframes.
        struct Entry {
            obs: Arc<FrameObservation>,
            start: Pose,
            end: Pose,
            window_pos: Option<usize>,
            optimizable: bool,
        }
        let mut latest_ids: Vec<u64> = self.window.iter().map(|kf| kf.id).collect();
        latest_ids.sort_unstable_by(|a, b| b.cmp(a));
        latest_ids.truncate(self.config.pose_finetune_count);
        let mut wprime: Vec<Entry> = self
            .window
            .iter()
            .enumerate()
            .map(|(i, kf)| Entry {
                obs: kf.obs.clone(),
                start: kf.start,
                end: kf.end,
                window_pos: Some(i),
                // Keyframe 0 stays fixed: it anchors the gauge.
                optimizable: kf.id != 0 && latest_ids.contains(&kf.id),
            })
            .collect();
        if !self.historical.is_empty() {
            let picks = if self.historical.len() <= 2 {
                (0..self.historical.len()).collect::<Vec<_>>()
            } else {
                let a = self.rng.random_range(0..self.historical.len());
                let mut b = self.rng.random_range(0..self.historical.len() - 1);
                if b >= a {
                    b += 1;
                }
                vec![a, b]
            };
            for i in picks {
                let kf = &self.historical[i];
                wprime.push(Entry {
                    obs: kf.obs.clone(),
                    start: kf.start,
                    end: kf.end,
                    window_pos: None,
                    optimizable: false,
                });
            }
        }

        let weights = self.config.mapping_weights();
        let eparams = self.config.event_params();
        let opt_indices: Vec<usize> = wprime
            .iter()
            .enumerate()
            .filter(|(_, e)| e.optimizable)
            .map(|(i, _)| i)
            .collect();
        let mut scene_opt = SceneOptimizer::new(self.scene.len(), &self.config.lr);
        let mut crf_opt = CrfOptimizer::new(self.crf.len(), self.config.lr.crf);
        let mut pose_opt = PoseOptimizer::new(opt_indices.len().max(1), self.config.lr.pose);
        let mut first_value = f64::NAN;
        let mut last_value = f64::NAN;

        for _ in 0..self.config.iters.mapping {
            let trajs: Vec<_> = wprime
                .iter()
                .map(|e| e.obs.trajectory(e.start, e.end))
                .collect();
            let frames: Vec<(&FrameObservation, &crate::se3::ExposureTrajectory)> = wprime
                .iter()
                .zip(trajs.iter())
                .map(|(e, t)| (e.obs.as_ref(), t))
                .collect();
            let mask: Vec<bool> = wprime.iter().map(|e| e.optimizable).collect();
            let eval = evaluate_mapping(
                &frames,
                &mask,
                &self.scene,
                &self.crf,
                &weights,
                &eparams,
                &self.intrinsics,
                &self.settings,
                self.config.toggles.crf,
            )?;
            if first_value.is_nan() {
                first_value = eval.value;
            }
            last_value = eval.value;
            scene_opt.step(&mut self.scene, &eval.scene_grads);
            if self.config.toggles.crf {
                crf_opt.step(&mut self.crf, &eval.crf_node_grads);
            }
            if !opt_indices.is_empty() {
                let mut poses: Vec<(Pose, Pose)> = opt_indices
                    .iter()
                    .map(|&i| (wprime[i].start, wprime[i].end))
                    .collect();
                let grads: Vec<_> = opt_indices.iter().map(|&i| eval.pose_grads[i]).collect();
                if pose_opt.step(&mut poses, &grads).is_some() {
                    for (j, &i) in opt_indices.iter().enumerate() {
                        wprime[i].start = poses[j].0;
                        wprime[i].end = poses[j].1;
                    }
                }
            }
            self.stats.mapping_iterations += 1;
        }
        self.stats.optimizer_skipped +=
            scene_opt.skipped() + crf_opt.skipped() + pose_opt.skipped();

        // Write optimized poses back into the window and trajectory log.
        for e in &wprime {
            if let Some(pos) = e.window_pos {
                self.window[pos].start = e.start;
                self.window[pos].end = e.end;
                let frame_index = self.window[pos].frame_index;
                self.trajectory_log[frame_index].start = e.start;
                self.trajectory_log[frame_index].end = e.end;
            }
        }

        let pruned = self.scene.prune(
            self.config.insert.min_opacity,
            self.config.insert.min_observations,
            self.config.insert.prune_age,
            new_kf_id,
        );
        self.stats.pruned_gaussians += pruned;

        // Refresh visibility for the whole window; the new keyframe's
        // render counts as an observation.
        for i in 0..self.window.len() {
            let out = render(
                &self.scene,
                &self.window[i].end,
                &self.intrinsics,
                &self.settings,
            )?;
            let visible = visible_ids_from_output(&self.scene, &out, VISIBILITY_ALPHA);
            if self.window[i].id == new_kf_id {
                self.observe(&visible);
            }
            self.window[i].visible = visible;
        }
        self.stats.mapping_seconds += t0.elapsed().as_secs_f64();
        Ok(MapUpdateSummary {
            first_value,
            last_value,
            inserted,
            pruned,
        })
    }

    /// Tracks a frame and, when the keyframe rule fires, updates the
    /// window and the map.
    pub fn process_frame(&mut self, obs: FrameObservation) -> Result<TrackOutcome> {
        let outcome = self.track_frame(&obs)?;
        if outcome.lost {
            return Ok(outcome);
        }
        if self.keyframe_decision(&obs, &outcome.end)? {
            let id = self.next_kf_id;
            self.next_kf_id += 1;
            let frame_index = self.trajectory_log.len() - 1;
            let out = render(&self.scene, &outcome.end, &self.intrinsics, &self.settings)?;
            let visible = visible_ids_from_output(&self.scene, &out, VISIBILITY_ALPHA);
            let kf = Keyframe {
                id,
                frame_index,
                obs: Arc::new(obs),
                start: outcome.start,
                end: outcome.end,
                visible,
            };
            self.trajectory_log[frame_index].keyframe = Some(id);
            self.maintain_window(kf);
            self.map_update()?;
        }
        Ok(outcome)
    }
}

/// Runs the full pipeline over a dataset.
pub fn run_sequence(dataset: &Dataset, config: RunConfig) -> Result<(SlamState, MetricsReport)> {
    if dataset.frames == 0 {
        return Err(EvsplatError::Dataset {
            path: dataset.root.display().to_string(),
            msg: "dataset has no frames".into(),
        });
    }
    let k = config.k_intervals;
    let first = FrameObservation::new(dataset.frame_bundle(0)?, k)?;
    let mut state = SlamState::initialize(config, dataset.intrinsics, first)?;
    for i in 1..dataset.frames {
        let obs = FrameObservation::new(dataset.frame_bundle(i)?, k)?;
        state.process_frame(obs)?;
    }
    let report = compute_run_metrics(&state, dataset)?;
    Ok((state, report))
}

/// Fills the metrics report: ATE against ground truth, per-frame PSNR
/// and SSIM of sharp re-renders at estimated end poses, the held-out
/// no-event residual of the converged map, runtimes, and seed echo.
pub fn compute_run_metrics(state: &SlamState, dataset: &Dataset) -> Result<MetricsReport> {
    let mut report = MetricsReport::new();
    report.set("seed", state.config.seed);
    report.set("frames", state.trajectory_log.len());
    report.set("keyframes_total", state.next_kf_id);
    report.set("gaussian_count_final", state.scene.len());
    report.set("event_drops", state.stats.dropped_events);
    report.set("lost_frames", state.stats.lost_frames);
    report.set("optimizer_skipped_steps", state.stats.optimizer_skipped);
    report.set_f64("runtime_tracking_s", state.stats.tracking_seconds);
    report.set_f64("runtime_mapping_s", state.stats.mapping_seconds);
    report.set("lpips", "unavailable");
    report.set(
        "alignment",
        "rigid umeyama (no scale), exposure-end positions",
    );

    let est: Vec<Vector3<f64>> = state
        .trajectory_log
        .iter()
        .map(|l| l.end.camera_center())
        .collect();
    if let Some(gt) = &dataset.gt_traj {
        let gt_pos: Vec<Vector3<f64>> = gt.iter().map(|(_, end)| end.camera_center()).collect();
        if gt_pos.len() == est.len() && est.len() >= 3 {
            report.set_f64("ate_rmse", compute_ate(&est, &gt_pos)?);
            let mut diameter = 0.0f64;
            for i in 0..gt_pos.len() {
                for j in i + 1..gt_pos.len() {
                    diameter = diameter.max((gt_pos[i] - gt_pos[j]).norm());
                }
            }
            report.set_f64("trajectory_diameter", diameter);
        }
    }

    if dataset.has_sharp_gt() {
        let mut psnr_sum = 0.0;
        let mut ssim_sum = 0.0;
        let mut n = 0usize;
        for log in &state.trajectory_log {
            let gt = dataset.sharp_gt(log.frame_index)?;
            let out = render(&state.scene, &log.end, &state.intrinsics, &state.settings)?;
            let mut ldr = state.crf.apply_image(&out.color);
            for px in ldr.data.iter_mut() {
                for c in 0..3 {
                    px[c] = px[c].clamp(0.0, 1.0);
                }
            }
            let psnr = compute_psnr(&ldr, &gt)?;
            let ssim = compute_ssim(&ldr, &gt)?;
            report.set_f64(&format!("psnr_{:06}", log.frame_index), psnr);
            psnr_sum += psnr;
            ssim_sum += ssim;
            n += 1;
        }
        if n > 0 {
            report.set_f64("mean_psnr", psnr_sum / n as f64);
            report.set_f64("mean_ssim", ssim_sum / n as f64);
        }
    }

    // Held-out no-event residual: non-keyframe frames only, measured
    // with the event model regardless of ablation toggles.
    let mut lne_sum = 0.0;
    let mut lne_n = 0usize;
    let holdout_weights = LossWeights {
        lambda_e: 1.0,
        lambda_i: 0.0,
        lambda_d: 0.0,
        lambda_id: 0.0,
        lambda_ne: 1.0,
        lambda_iso: 0.0,
    };
    let eparams = crate::events::EventParams {
        theta: state.config.events.theta,
        lambda_ne: 1.0,
        log_eps: state.config.events.log_eps,
    };
    for log in &state.trajectory_log {
        if log.keyframe.is_some() || log.lost {
            continue;
        }
        let obs = FrameObservation::new(
            dataset.frame_bundle(log.frame_index)?,
            state.config.k_intervals,
        )?;
        let traj = obs.trajectory(log.start, log.end);
        let eval = evaluate_frame(
            &obs,
            &state.scene,
            &traj,
            &state.crf,
            &holdout_weights,
            &eparams,
            &state.intrinsics,
            &state.settings,
            GradScope::default(),
        )?;
        lne_sum += eval.l_ne;
        lne_n += 1;
    }
    if lne_n > 0 {
        report.set_f64("lne_holdout", lne_sum / lne_n as f64);
    }
    Ok(report)
}

/// Writes the run artifacts: estimated trajectory (two TUM lines per
/// frame), scene and CRF checkpoints, metrics report, and a config echo.
pub fn emit_outputs(state: &SlamState, report: &MetricsReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| EvsplatError::io(out_dir.display().to_string(), e))?;
    let mut lines = Vec::with_capacity(2 * state.trajectory_log.len());
    for log in &state.trajectory_log {
        lines.push((log.t_start, log.start));
        lines.push((log.t_end, log.end));
    }
    write_trajectory(&out_dir.join("trajectory_est.txt"), &lines)?;
    state.scene.save(&out_dir.join("scene.txt"))?;
    state.crf.save(&out_dir.join("crf.txt"))?;
    report.save(&out_dir.join("metrics.txt"))?;
    state.config.save(&out_dir.join("config.toml"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_basics() {
        assert_eq!(iou(&[], &[]), 1.0);
        assert_eq!(iou(&[1, 2, 3], &[]), 0.0);
        assert_eq!(iou(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(iou(&[1, 2], &[2, 3]), 1.0 / 3.0);
        assert_eq!(iou(&[1, 2, 3, 4], &[5, 6]), 0.0);
    }
}
