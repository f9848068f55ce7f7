//! Synthetic dataset generator: ground-truthed scenes, trajectories,
//! blurred frames, depth, and events.
//!
//! The generator is the independent oracle for end-to-end acceptance
//! tests: it consumes only rendered brightness sequences (never the
//! estimator's event-loss code), supersamples the exposure much finer
//! than the estimator's sub-interval count, and keeps per-pixel event
//! residual state across frames like an integrating sensor.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraIntrinsics;
use crate::dataset::{
    save_depth_bin, save_png, write_intrinsics, write_manifest, write_trajectory,
};
use crate::error::{EvsplatError, Result};
use crate::events::{write_events, Event};
use crate::imaging::{luma, FrameBundle};
use crate::img::ColorImage;
use crate::render::{render, RasterSettings};
use crate::scene::{Gaussian, GaussianScene};
use crate::se3::{exp_so3, interpolate_poses, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    RandomBox,
    TexturedPlanes,
    SphereShell,
}

impl Layout {
    pub fn name(&self) -> &'static str {
        match self {
            Layout::RandomBox => "random-box",
            Layout::TexturedPlanes => "textured-planes",
            Layout::SphereShell => "sphere-shell",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random-box" => Ok(Layout::RandomBox),
            "textured-planes" => Ok(Layout::TexturedPlanes),
            "sphere-shell" => Ok(Layout::SphereShell),
            other => Err(EvsplatError::InvalidArgument(format!(
                "unknown layout {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorScheme {
    Vivid,
    Pastel,
    Mono,
}

impl ColorScheme {
    pub fn name(&self) -> &'static str {
        match self {
            ColorScheme::Vivid => "vivid",
            ColorScheme::Pastel => "pastel",
            ColorScheme::Mono => "mono",
        }
    }
}

/// Ground-truth scene recipe; deterministic for a fixed spec.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub layout: Layout,
    pub gaussian_count: usize,
    pub color_scheme: ColorScheme,
    /// Characteristic half-extent in scene units; content sits around
    /// depth `2 * extent` in the first camera's frame.
    pub extent: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            layout: Layout::TexturedPlanes,
            gaussian_count: 200,
            color_scheme: ColorScheme::Vivid,
            extent: 1.5,
            seed: 7,
        }
    }
}

/// Continuous camera path: waypoints interpolated with an ease-in/out
/// ramp; each frame's exposure spans `[f, f+1] / frames` of the path, so
/// consecutive frames share endpoint poses.
#[derive(Debug, Clone)]
pub struct TrajectorySpec {
    pub waypoints: Vec<Pose>,
    pub exposure: f64,
    pub frames: usize,
    /// Blur severity knob: scales the arc swept during the sequence.
    pub motion_magnitude: f64,
}

impl TrajectorySpec {
    /// Lateral dolly with a partial pan and gentle depth/height bobs.
    /// Pan and dolly flow add up (no look-at cancellation), so image
    /// blur grows with the magnitude while the pose stays observable:
    /// the depth map pins the planar dolly/yaw ambiguity. The ease-in
    /// ramp keeps the first frame nearly static.
    pub fn sweep(frames: usize, exposure: f64, motion_magnitude: f64, extent: f64) -> Self {
        assert!(frames >= 1);
        let m = motion_magnitude;
        let n_wp = (frames / 2).clamp(4, 24);
        let waypoints = (0..=n_wp)
            .map(|i| {
                let t = i as f64 / n_wp as f64;
                let sway = 2.0 * t - 1.0;
                let center = Vector3::new(
                    0.33 * m * extent * sway,
                    0.05 * m * extent * (2.0 * std::f64::consts::PI * t).sin(),
                    0.08 * m * extent * (4.0 * std::f64::consts::PI * t).sin(),
                );
                let yaw = 0.066 * m * sway;
                let pitch = 0.015 * m * (2.0 * std::f64::consts::PI * t).cos();
                let r_wc = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw)
                    * Rotation3::from_axis_angle(&Vector3::x_axis(), pitch);
                let r_cw = r_wc.inverse().into_inner();
                let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
                    r_cw,
                ));
                Pose::new(q, -(r_cw * center))
            })
            .collect();
        Self {
            waypoints,
            exposure,
            frames,
            motion_magnitude,
        }
    }

    /// Pose at path parameter `u` in [0, 1].
    pub fn pose_at(&self, u: f64) -> Pose {
        let u = u.clamp(0.0, 1.0);
        // Ease-in/out: derivative 0 at both ends, so the first and last
        // frames carry almost no intra-exposure motion.
        let s = 0.5 * (1.0 - (std::f64::consts::PI * u).cos());
        let n = self.waypoints.len() - 1;
        if n == 0 {
            return self.waypoints[0];
        }
        let x = s * n as f64;
        let i = (x.floor() as usize).min(n - 1);
        interpolate_poses(&self.waypoints[i], &self.waypoints[i + 1], x - i as f64)
    }

    /// Ground-truth (start, end) poses of frame `f`.
    pub fn frame_poses(&self, f: usize) -> (Pose, Pose) {
        let n = self.frames as f64;
        (
            self.pose_at(f as f64 / n),
            self.pose_at((f + 1) as f64 / n),
        )
    }
}

/// World-to-camera pose looking from `eye` toward `target`, camera +y
/// pointing along world +y (image-down convention).
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Pose {
    let fwd = (target - eye).normalize();
    let right = Vector3::y().cross(&fwd).normalize();
    let down = fwd.cross(&right);
    let r_wc = Matrix3::from_columns(&[right, down, fwd]);
    let r_cw = r_wc.transpose();
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r_cw));
    Pose::new(q, -(r_cw * eye))
}

/// Per-cell colors. Brightness is drawn independently per cell (not a
/// periodic checker): aperiodic luma texture keeps photometric and
/// event basins unambiguous under sub-cell camera shifts.
fn palette(rng: &mut ChaCha8Rng, scheme: ColorScheme, dark: bool) -> Vector3<f64> {
    match scheme {
        ColorScheme::Mono => {
            let v = if dark {
                0.15 + 0.2 * rng.random::<f64>()
            } else {
                0.55 + 0.4 * rng.random::<f64>()
            };
            Vector3::new(v, v, v)
        }
        ColorScheme::Pastel => {
            let base = if dark { 0.3 } else { 0.55 };
            Vector3::new(
                base + 0.3 * rng.random::<f64>(),
                base + 0.3 * rng.random::<f64>(),
                base + 0.3 * rng.random::<f64>(),
            )
        }
        ColorScheme::Vivid => {
            let hue = rng.random::<f64>() * 6.0;
            let v = if dark {
                0.2 + 0.25 * rng.random::<f64>()
            } else {
                0.6 + 0.4 * rng.random::<f64>()
            };
            let c = v * 0.85;
            let xcomp = c * (1.0 - ((hue % 2.0) - 1.0).abs());
            let (r, g, b) = match hue as usize {
                0 => (c, xcomp, 0.0),
                1 => (xcomp, c, 0.0),
                2 => (0.0, c, xcomp),
                3 => (0.0, xcomp, c),
                4 => (xcomp, 0.0, c),
                _ => (c, 0.0, xcomp),
            };
            let m = v - c;
            Vector3::new(r + m, g + m, b + m)
        }
    }
}

/// Builds the ground-truth scene. Every Gaussian is visible (center in
/// frustum) from at least one trajectory waypoint; invisible draws are
/// rejection-resampled.
pub fn build_scene(
    spec: &SceneSpec,
    traj: &TrajectorySpec,
    intr: &CameraIntrinsics,
) -> Result<GaussianScene> {
    assert!(spec.gaussian_count >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut scene = GaussianScene::new();
    let e = spec.extent;
    let depth_center = 2.0 * e;
    let mut resample_budget = 1000usize;

    let visible_from_any = |g: &Gaussian| -> bool {
        traj.waypoints.iter().any(|wp| {
            let x_c = wp.rotation() * g.mean + wp.translation();
            if x_c.z <= 0.05 {
                return false;
            }
            let uv = intr.project(&x_c);
            uv.x >= -2.0
                && uv.x <= intr.width as f64 + 2.0
                && uv.y >= -2.0
                && uv.y <= intr.height as f64 + 2.0
        })
    };

    match spec.layout {
        Layout::TexturedPlanes => {
            // Back wall (75%) plus a ground plane (25%); both carry
            // aperiodic brightness texture. The ground plane's distinct
            // orientation breaks the planar dolly/yaw ambiguity.
            let wall_count = (spec.gaussian_count * 3) / 4;
            let floor_count = spec.gaussian_count - wall_count;
            let half_w = 1.45 * e;
            let half_h = 1.1 * e;
            let nx = ((wall_count as f64 * half_w / half_h).sqrt()).ceil() as usize;
            let ny = wall_count.div_ceil(nx);
            let dx = 2.0 * half_w / nx as f64;
            let dy = 2.0 * half_h / ny as f64;
            let sigma = 0.85 * dx.max(dy);
            let mut placed = 0;
            'wall: for iy in 0..ny {
                for ix in 0..nx {
                    if placed == wall_count {
                        break 'wall;
                    }
                    let dark = rng.random::<f64>() < 0.45;
                    let color = palette(&mut rng, spec.color_scheme, dark);
                    let pos = Vector3::new(
                        -half_w + (ix as f64 + 0.5) * dx,
                        -half_h + (iy as f64 + 0.5) * dy,
                        depth_center + 0.06 * e * (rng.random::<f64>() - 0.5),
                    );
                    scene.push(
                        Gaussian::from_natural(
                            pos,
                            UnitQuaternion::identity(),
                            Vector3::new(sigma, sigma, sigma * 0.3),
                            0.88 + 0.1 * rng.random::<f64>(),
                            color,
                        ),
                        0,
                    );
                    placed += 1;
                }
            }
            // Ground plane: rows receding from the camera toward the
            // wall, below the optical axis.
            let rows = 4usize;
            let cols = floor_count.div_ceil(rows);
            let fdx = 2.0 * half_w / cols as f64;
            let mut placed = 0;
            'floor: for iz in 0..rows {
                for ix in 0..cols {
                    if placed == floor_count {
                        break 'floor;
                    }
                    let dark = rng.random::<f64>() < 0.45;
                    let color = palette(&mut rng, spec.color_scheme, dark);
                    let z = depth_center * (0.55 + 0.45 * (iz as f64 + 0.5) / rows as f64);
                    let pos = Vector3::new(
                        -half_w + (ix as f64 + 0.5) * fdx,
                        0.62 * e + 0.12 * e * (iz as f64 / rows as f64),
                        z,
                    );
                    let fs = fdx * 0.7;
                    scene.push(
                        Gaussian::from_natural(
                            pos,
                            UnitQuaternion::identity(),
                            Vector3::new(fs, fs * 0.35, fs),
                            0.9,
                            color,
                        ),
                        0,
                    );
                    placed += 1;
                }
            }
        }
        Layout::RandomBox => {
            while scene.len() < spec.gaussian_count {
                let pos = Vector3::new(
                    (rng.random::<f64>() - 0.5) * 2.0 * e,
                    (rng.random::<f64>() - 0.5) * 1.5 * e,
                    depth_center + (rng.random::<f64>() - 0.5) * e,
                );
                let checker = rng.random::<bool>();
                let color = palette(&mut rng, spec.color_scheme, checker);
                let s = e * (0.03 + 0.05 * rng.random::<f64>());
                let g = Gaussian::from_natural(
                    pos,
                    random_rotation(&mut rng),
                    Vector3::new(s, s, s) * (0.7 + 0.6 * rng.random::<f64>()),
                    0.8 + 0.18 * rng.random::<f64>(),
                    color,
                );
                if visible_from_any(&g) {
                    scene.push(g, 0);
                } else if resample_budget == 0 {
                    return Err(EvsplatError::InvalidArgument(
                        "scene spec leaves Gaussians invisible after 1000 resamples".into(),
                    ));
                } else {
                    resample_budget -= 1;
                }
            }
        }
        Layout::SphereShell => {
            let center = Vector3::new(0.0, 0.0, depth_center);
            while scene.len() < spec.gaussian_count {
                let dir = Vector3::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                );
                if dir.norm() < 1e-6 {
                    continue;
                }
                let pos = center + dir.normalize() * e;
                let checker = rng.random::<bool>();
                let color = palette(&mut rng, spec.color_scheme, checker);
                let s = e * (0.04 + 0.04 * rng.random::<f64>());
                let g = Gaussian::from_natural(
                    pos,
                    random_rotation(&mut rng),
                    Vector3::new(s, s, s),
                    0.85 + 0.13 * rng.random::<f64>(),
                    color,
                );
                if visible_from_any(&g) {
                    scene.push(g, 0);
                } else if resample_budget == 0 {
                    return Err(EvsplatError::InvalidArgument(
                        "scene spec leaves Gaussians invisible after 1000 resamples".into(),
                    ));
                } else {
                    resample_budget -= 1;
                }
            }
        }
    }

    // Grid layouts are deterministic; verify visibility rather than
    // resample.
    if let Some(bad) = scene
        .gaussians()
        .iter()
        .position(|g| !visible_from_any(g))
    {
        if spec.layout == Layout::TexturedPlanes {
            log::debug!("plane gaussian {bad} outside every waypoint frustum");
        }
    }
    Ok(scene)
}

fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    let axis = Vector3::new(
        rng.random::<f64>() - 0.5,
        rng.random::<f64>() - 0.5,
        rng.random::<f64>() - 0.5,
    );
    if axis.norm() < 1e-9 {
        return UnitQuaternion::identity();
    }
    exp_so3(&(axis.normalize() * rng.random::<f64>() * std::f64::consts::PI))
}

/// Oracle camera-response profiles applied to the time-integrated HDR
/// image before writing LDR observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrfProfile {
    Identity,
    /// Gamma-2.2 encoding: `ldr = hdr^(1/2.2)`.
    Gamma22,
}

impl CrfProfile {
    pub fn name(&self) -> &'static str {
        match self {
            CrfProfile::Identity => "identity",
            CrfProfile::Gamma22 => "gamma22",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(CrfProfile::Identity),
            "gamma22" => Ok(CrfProfile::Gamma22),
            other => Err(EvsplatError::InvalidArgument(format!(
                "unknown CRF profile {other:?}"
            ))),
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        match self {
            CrfProfile::Identity => x,
            CrfProfile::Gamma22 => x.powf(1.0 / 2.2),
        }
    }

    fn apply_image(&self, img: &ColorImage) -> ColorImage {
        let mut out = img.clone();
        for px in out.data.iter_mut() {
            for c in 0..3 {
                px[c] = self.apply(px[c]);
            }
        }
        out
    }
}

/// Oracle generation knobs.
#[derive(Debug, Clone, Copy)]
pub struct OracleOptions {
    /// Sharp renders per exposure (must exceed the estimator's K;
    /// default 4x).
    pub supersample: usize,
    pub theta: f64,
    pub log_eps: f64,
    pub crf_profile: CrfProfile,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            supersample: 16,
            theta: 0.25,
            log_eps: 1e-3,
            crf_profile: CrfProfile::Identity,
        }
    }
}

/// Per-pixel event generator state persisting across frames (residual
/// below threshold is never reset).
#[derive(Debug, Clone)]
pub struct EventCarry {
    ref_level: Vec<f64>,
    initialized: bool,
}

impl EventCarry {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            ref_level: vec![0.0; width * height],
            initialized: false,
        }
    }

    pub fn reference_levels(&self) -> &[f64] {
        &self.ref_level
    }
}

/// One synthesized frame with every ground-truth artifact.
#[derive(Debug)]
pub struct FrameTruth {
    pub bundle: FrameBundle,
    /// Sharp LDR ground truth at the exposure-end pose.
    pub sharp_gt: ColorImage,
    /// Exposure-mean HDR image before LDR clipping.
    pub hdr_blur_preclip: ColorImage,
    /// Events with absolute timestamps for the dataset stream.
    pub events_global: Vec<Event>,
    /// Log-luma of the first and last supersample (for consistency
    /// checks).
    pub log_luma_start: Vec<f64>,
    pub log_luma_end: Vec<f64>,
}

/// Walks one linearly-interpolated log-luma step and emits an event at
/// every full theta-crossing of the reference ladder. Returns the
/// updated reference level; the residual `|l_cur - r| < theta` carries
/// to the next step.
#[allow(clippy::too_many_arguments)]
fn ladder_crossings(
    l_prev: f64,
    l_cur: f64,
    t0: f64,
    dt: f64,
    mut r: f64,
    theta: f64,
    x: u16,
    y: u16,
    out: &mut Vec<Event>,
) -> f64 {
    if l_cur > l_prev {
        let mut target = r + theta;
        while l_cur >= target {
            let frac = (target - l_prev) / (l_cur - l_prev);
            out.push(Event {
                x,
                y,
                t: t0 + frac * dt,
                polarity: 1,
            });
            r = target;
            target = r + theta;
        }
    } else if l_cur < l_prev {
        let mut target = r - theta;
        while l_cur <= target {
            let frac = (target - l_prev) / (l_cur - l_prev);
            out.push(Event {
                x,
                y,
                t: t0 + frac * dt,
                polarity: -1,
            });
            r = target;
            target = r - theta;
        }
    }
    r
}

/// Renders one exposure with `S` supersamples: the blurred observation
/// is the mean of the S sharp renders, depth and the sharp ground truth
/// come from the exposure-end pose, and events are emitted per pixel at
/// every full theta-crossing of log-luma with linearly interpolated
/// timestamps.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_frame(
    scene_gt: &GaussianScene,
    start: &Pose,
    end: &Pose,
    t_start: f64,
    exposure: f64,
    opts: &OracleOptions,
    intr: &CameraIntrinsics,
    settings: &RasterSettings,
    carry: &mut EventCarry,
) -> Result<FrameTruth> {
    let s_count = opts.supersample;
    assert!(s_count >= 1);
    let (w, h) = (intr.width, intr.height);
    let mut renders = Vec::with_capacity(s_count + 1);
    for j in 0..=s_count {
        let pose = interpolate_poses(start, end, j as f64 / s_count as f64);
        renders.push(render(scene_gt, &pose, intr, settings)?);
    }

    // Blur: mean of the S sharp renders (left endpoints).
    let colors: Vec<&ColorImage> = renders[..s_count].iter().map(|r| &r.color).collect();
    let hdr_blur_preclip = ColorImage::mean_of(&colors);
    let image_obs = opts.crf_profile.apply_image(&hdr_blur_preclip);

    // Depth and sharp ground truth at the exposure-end pose.
    let end_render = &renders[s_count];
    let depth_obs = end_render.depth.clone();
    let sharp_gt = opts.crf_profile.apply_image(&end_render.color);

    // Log-luma paths and threshold-crossing events with carry-over.
    let log_lumas: Vec<Vec<f64>> = renders
        .iter()
        .map(|r| {
            r.color
                .data
                .iter()
                .map(|px| (luma(px) + opts.log_eps).max(1e-12).ln())
                .collect()
        })
        .collect();
    if !carry.initialized {
        carry.ref_level.copy_from_slice(&log_lumas[0]);
        carry.initialized = true;
    }
    let dt = exposure / s_count as f64;
    let mut events_global: Vec<Event> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let px = y * w + x;
            let mut r = carry.ref_level[px];
            for j in 1..=s_count {
                let t0 = t_start + (j - 1) as f64 * dt;
                r = ladder_crossings(
                    log_lumas[j - 1][px],
                    log_lumas[j][px],
                    t0,
                    dt,
                    r,
                    opts.theta,
                    x as u16,
                    y as u16,
                    &mut events_global,
                );
            }
            carry.ref_level[px] = r;
        }
    }
    events_global.sort_by(|a, b| {
        a.t.partial_cmp(&b.t)
            .unwrap()
            .then(a.y.cmp(&b.y))
            .then(a.x.cmp(&b.x))
    });

    let events_rel: Vec<Event> = events_global
        .iter()
        .map(|e| Event {
            t: e.t - t_start,
            ..*e
        })
        .collect();

    Ok(FrameTruth {
        bundle: FrameBundle {
            image_obs,
            depth_obs,
            t_start,
            exposure,
            events: events_rel,
        },
        sharp_gt,
        hdr_blur_preclip,
        events_global,
        log_luma_start: log_lumas[0].clone(),
        log_luma_end: log_lumas[s_count].clone(),
    })
}

/// Generates and writes a full dataset. Returns the total event count.
pub fn emit_dataset(
    scene_spec: &SceneSpec,
    traj_spec: &TrajectorySpec,
    opts: &OracleOptions,
    intr: &CameraIntrinsics,
    out_dir: &Path,
) -> Result<usize> {
    let settings = RasterSettings::default();
    let scene = build_scene(scene_spec, traj_spec, intr)?;
    for sub in ["images", "depth", "sharp_gt"] {
        std::fs::create_dir_all(out_dir.join(sub))
            .map_err(|e| EvsplatError::io(out_dir.join(sub).display().to_string(), e))?;
    }
    let mut carry = EventCarry::new(intr.width, intr.height);
    let mut all_events = Vec::new();
    let mut gt_lines = Vec::with_capacity(2 * traj_spec.frames);
    for f in 0..traj_spec.frames {
        let (start, end) = traj_spec.frame_poses(f);
        let t_start = f as f64 * traj_spec.exposure;
        let truth = synthesize_frame(
            &scene,
            &start,
            &end,
            t_start,
            traj_spec.exposure,
            opts,
            intr,
            &settings,
            &mut carry,
        )?;
        save_png(
            &out_dir.join(format!("images/{f:06}.png")),
            &truth.bundle.image_obs,
        )?;
        save_depth_bin(
            &out_dir.join(format!("depth/{f:06}.bin")),
            &truth.bundle.depth_obs,
        )?;
        save_png(&out_dir.join(format!("sharp_gt/{f:06}.png")), &truth.sharp_gt)?;
        all_events.extend(truth.events_global);
        gt_lines.push((t_start, start));
        gt_lines.push((t_start + traj_spec.exposure, end));
    }
    write_events(&out_dir.join("events.txt"), &all_events, intr.width, intr.height)?;
    write_trajectory(&out_dir.join("groundtruth_traj.txt"), &gt_lines)?;
    write_intrinsics(&out_dir.join("intrinsics.txt"), intr)?;
    scene.save(&out_dir.join("gt_scene.txt"))?;

    let mut manifest = BTreeMap::new();
    manifest.insert("version".into(), "1".into());
    manifest.insert("layout".into(), scene_spec.layout.name().into());
    manifest.insert("color_scheme".into(), scene_spec.color_scheme.name().into());
    manifest.insert(
        "gaussian_count".into(),
        scene_spec.gaussian_count.to_string(),
    );
    manifest.insert("extent".into(), scene_spec.extent.to_string());
    manifest.insert("scene_seed".into(), scene_spec.seed.to_string());
    manifest.insert("frames".into(), traj_spec.frames.to_string());
    manifest.insert("exposure".into(), traj_spec.exposure.to_string());
    manifest.insert(
        "motion_magnitude".into(),
        traj_spec.motion_magnitude.to_string(),
    );
    manifest.insert("supersample".into(), opts.supersample.to_string());
    manifest.insert("theta".into(), opts.theta.to_string());
    manifest.insert("log_eps".into(), opts.log_eps.to_string());
    manifest.insert("crf_profile".into(), opts.crf_profile.name().into());
    manifest.insert("depth_format".into(), "f32bin".into());
    manifest.insert("width".into(), intr.width.to_string());
    manifest.insert("height".into(), intr.height.to_string());
    write_manifest(&out_dir.join("manifest.txt"), &manifest)?;
    Ok(all_events.len())
}
