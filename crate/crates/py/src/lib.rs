//! Python bindings exposing the main types and operations: poses and
//! exposure trajectories, Gaussian scenes and rendering, the CRF, event
//! accumulation, metrics, dataset synthesis, and full SLAM runs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3, Vector6};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use evsplat_core::config::{Profile, RunConfig};
use evsplat_core::crf::CrfNodes;
use evsplat_core::dataset::Dataset;
use evsplat_core::events::{accumulate_events, Event};
use evsplat_core::metrics::{compute_ate, compute_psnr, compute_ssim};
use evsplat_core::oracle::{
    emit_dataset, ColorScheme, CrfProfile, Layout, OracleOptions, SceneSpec, TrajectorySpec,
};
use evsplat_core::render::{render as core_render, RasterSettings};
use evsplat_core::scene::{Gaussian, GaussianScene};
use evsplat_core::se3::{assign_sub_times, Pose as CorePose};
use evsplat_core::slam::{emit_outputs, run_sequence};
use evsplat_core::{CameraIntrinsics, ColorImage};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn val_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// World-to-camera rigid transform.
#[pyclass(name = "Pose", skip_from_py_object)]
#[derive(Clone)]
struct PyPose {
    inner: CorePose,
}

#[pymethods]
impl PyPose {
    #[staticmethod]
    fn identity() -> Self {
        Self {
            inner: CorePose::identity(),
        }
    }

    /// Build from translation (tx, ty, tz) and quaternion (qw, qx, qy, qz).
    #[new]
    fn new(t: (f64, f64, f64), q: (f64, f64, f64, f64)) -> Self {
        Self {
            inner: CorePose::new(
                UnitQuaternion::new_normalize(Quaternion::new(q.0, q.1, q.2, q.3)),
                Vector3::new(t.0, t.1, t.2),
            ),
        }
    }

    fn translation(&self) -> (f64, f64, f64) {
        let t = self.inner.translation();
        (t.x, t.y, t.z)
    }

    fn quaternion_wxyz(&self) -> (f64, f64, f64, f64) {
        let q = self.inner.rotation().quaternion();
        (q.w, q.i, q.j, q.k)
    }

    fn camera_center(&self) -> (f64, f64, f64) {
        let c = self.inner.camera_center();
        (c.x, c.y, c.z)
    }

    fn compose(&self, other: &PyPose) -> PyPose {
        PyPose {
            inner: self.inner.compose(&other.inner),
        }
    }

    fn inverse(&self) -> PyPose {
        PyPose {
            inner: self.inner.inverse(),
        }
    }

    /// Left retraction with a 6-vector tangent [vx vy vz wx wy wz].
    fn retract(&self, delta: [f64; 6]) -> PyPose {
        PyPose {
            inner: self.inner.retract(&Vector6::from_column_slice(&delta)),
        }
    }

    fn rotation_distance(&self, other: &PyPose) -> f64 {
        self.inner.rotation_distance(&other.inner)
    }

    fn __repr__(&self) -> String {
        let t = self.inner.translation();
        let q = self.inner.rotation().quaternion();
        format!(
            "Pose(t=({:.4}, {:.4}, {:.4}), q_wxyz=({:.4}, {:.4}, {:.4}, {:.4}))",
            t.x, t.y, t.z, q.w, q.i, q.j, q.k
        )
    }
}

#[pyclass(name = "Intrinsics", skip_from_py_object)]
#[derive(Clone)]
struct PyIntrinsics {
    inner: CameraIntrinsics,
}

#[pymethods]
impl PyIntrinsics {
    #[new]
    fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> PyResult<Self> {
        Ok(Self {
            inner: CameraIntrinsics::new(fx, fy, cx, cy, width, height).map_err(val_err)?,
        })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }
}

/// The 3D Gaussian scene map.
#[pyclass(name = "Scene")]
struct PyScene {
    inner: GaussianScene,
}

#[pymethods]
impl PyScene {
    #[new]
    fn new() -> Self {
        Self {
            inner: GaussianScene::new(),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: GaussianScene::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Append one Gaussian from natural parameters.
    #[pyo3(signature = (mean, scale, opacity, color, quat_wxyz=None))]
    fn add_gaussian(
        &mut self,
        mean: (f64, f64, f64),
        scale: (f64, f64, f64),
        opacity: f64,
        color: (f64, f64, f64),
        quat_wxyz: Option<(f64, f64, f64, f64)>,
    ) {
        let q = quat_wxyz
            .map(|q| UnitQuaternion::new_normalize(Quaternion::new(q.0, q.1, q.2, q.3)))
            .unwrap_or_else(UnitQuaternion::identity);
        self.inner.push(
            Gaussian::from_natural(
                Vector3::new(mean.0, mean.1, mean.2),
                q,
                Vector3::new(scale.0, scale.1, scale.2),
                opacity,
                Vector3::new(color.0, color.1, color.2),
            ),
            0,
        );
    }
}

/// Trainable camera response function.
#[pyclass(name = "Crf")]
struct PyCrf {
    inner: CrfNodes,
}

#[pymethods]
impl PyCrf {
    #[staticmethod]
    fn identity(n: usize) -> Self {
        Self {
            inner: CrfNodes::identity(n),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CrfNodes::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn apply(&self, x: f64) -> f64 {
        self.inner.apply(x)
    }

    fn apply_curve(&self, xs: Vec<f64>) -> Vec<f64> {
        xs.iter().map(|&x| self.inner.apply(x)).collect()
    }

    fn node_hdr(&self) -> Vec<f64> {
        self.inner.node_hdr.clone()
    }

    fn levels(&self) -> Vec<f64> {
        self.inner.levels.clone()
    }
}

fn flat_to_image(flat: &[f64], width: usize, height: usize) -> PyResult<ColorImage> {
    if flat.len() != width * height * 3 {
        return Err(val_err(format!(
            "expected {} values for {}x{}x3, got {}",
            width * height * 3,
            width,
            height,
            flat.len()
        )));
    }
    let mut img = ColorImage::new(width, height);
    for px in 0..width * height {
        img.data[px] = [flat[px * 3], flat[px * 3 + 1], flat[px * 3 + 2]];
    }
    Ok(img)
}

/// Renders a scene from a pose. Returns a dict with flat row-major
/// `color` (H*W*3), `depth` and `alpha` (H*W), plus dimensions.
#[pyfunction]
fn render<'py>(
    py: Python<'py>,
    scene: &PyScene,
    pose: &PyPose,
    intrinsics: &PyIntrinsics,
) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let out = core_render(
        &scene.inner,
        &pose.inner,
        &intrinsics.inner,
        &RasterSettings::default(),
    )
    .map_err(err)?;
    let dict = pyo3::types::PyDict::new(py);
    let mut color = Vec::with_capacity(out.color.len() * 3);
    for px in &out.color.data {
        color.extend_from_slice(px);
    }
    dict.set_item("color", color)?;
    dict.set_item("depth", out.depth.data.clone())?;
    dict.set_item("alpha", out.alpha.data.clone())?;
    dict.set_item("width", out.color.width)?;
    dict.set_item("height", out.color.height)?;
    Ok(dict)
}

/// PSNR between two flat H*W*3 images in [0, 1]; 99 dB cap on exact
/// matches.
#[pyfunction]
fn psnr(a: Vec<f64>, b: Vec<f64>, width: usize, height: usize) -> PyResult<f64> {
    let ia = flat_to_image(&a, width, height)?;
    let ib = flat_to_image(&b, width, height)?;
    compute_psnr(&ia, &ib).map_err(val_err)
}

/// Mean windowed SSIM on luma between two flat H*W*3 images.
#[pyfunction]
fn ssim(a: Vec<f64>, b: Vec<f64>, width: usize, height: usize) -> PyResult<f64> {
    let ia = flat_to_image(&a, width, height)?;
    let ib = flat_to_image(&b, width, height)?;
    compute_ssim(&ia, &ib).map_err(val_err)
}

/// ATE RMSE after rigid alignment of two equal-length position lists.
#[pyfunction]
fn ate(est: Vec<(f64, f64, f64)>, gt: Vec<(f64, f64, f64)>) -> PyResult<f64> {
    let to_vec = |pts: &[(f64, f64, f64)]| -> Vec<Vector3<f64>> {
        pts.iter().map(|p| Vector3::new(p.0, p.1, p.2)).collect()
    };
    compute_ate(&to_vec(&est), &to_vec(&gt)).map_err(val_err)
}

/// Event-quantile exposure split: returns the K+1 sub-times.
#[pyfunction]
fn sub_times(exposure: f64, k: usize, event_times: Vec<f64>) -> PyResult<Vec<f64>> {
    assign_sub_times(exposure, k, &event_times).map_err(val_err)
}

/// Bins events `(t, x, y, polarity)` into per-interval signed count
/// maps. Returns (list of flat H*W count maps, dropped count).
#[pyfunction]
fn event_maps(
    events: Vec<(f64, u16, u16, i8)>,
    sub_times: Vec<f64>,
    width: usize,
    height: usize,
) -> PyResult<(Vec<Vec<i32>>, usize)> {
    let events: Vec<Event> = events
        .iter()
        .map(|&(t, x, y, polarity)| Event { t, x, y, polarity })
        .collect();
    let (maps, dropped) = accumulate_events(&events, &sub_times, width, height);
    Ok((maps.into_iter().map(|m| m.counts).collect(), dropped))
}

/// Generates a synthetic ground-truthed dataset.
#[pyfunction]
#[pyo3(signature = (out_dir, frames=30, gaussians=200, width=64, height=64, motion=1.0,
                    layout="textured-planes", exposure=0.04, supersample=16, theta=0.25,
                    crf_profile="identity", seed=7, extent=1.5))]
#[allow(clippy::too_many_arguments)]
fn synth_dataset(
    out_dir: PathBuf,
    frames: usize,
    gaussians: usize,
    width: usize,
    height: usize,
    motion: f64,
    layout: &str,
    exposure: f64,
    supersample: usize,
    theta: f64,
    crf_profile: &str,
    seed: u64,
    extent: f64,
) -> PyResult<usize> {
    let f = 1.25 * width as f64;
    let intr =
        CameraIntrinsics::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
            .map_err(val_err)?;
    let scene_spec = SceneSpec {
        layout: Layout::parse(layout).map_err(val_err)?,
        gaussian_count: gaussians,
        color_scheme: ColorScheme::Vivid,
        extent,
        seed,
    };
    let traj_spec = TrajectorySpec::sweep(frames, exposure, motion, extent);
    let opts = OracleOptions {
        supersample,
        theta,
        log_eps: 1e-3,
        crf_profile: CrfProfile::parse(crf_profile).map_err(val_err)?,
    };
    emit_dataset(&scene_spec, &traj_spec, &opts, &intr, &out_dir).map_err(err)
}

/// Default run configuration for a profile, as a TOML string.
#[pyfunction]
fn default_config(profile: &str) -> PyResult<String> {
    let profile: Profile = profile.parse().map_err(val_err)?;
    RunConfig::from_profile(profile).to_toml().map_err(err)
}

/// Runs the full SLAM pipeline from a TOML config string. Returns the
/// metrics report as a dict of strings.
#[pyfunction]
fn run_slam(config_toml: &str) -> PyResult<HashMap<String, String>> {
    let config = RunConfig::from_toml(config_toml).map_err(val_err)?;
    let dataset = Dataset::load(Path::new(&config.dataset)).map_err(err)?;
    let out_dir = PathBuf::from(&config.out_dir);
    let (state, report) = run_sequence(&dataset, config).map_err(err)?;
    emit_outputs(&state, &report, &out_dir).map_err(err)?;
    let mut map = HashMap::new();
    for line in report.to_text().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            map.insert(k.to_string(), v.to_string());
        }
    }
    Ok(map)
}

#[pymodule]
fn evsplat(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPose>()?;
    m.add_class::<PyIntrinsics>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyCrf>()?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(ate, m)?)?;
    m.add_function(wrap_pyfunction!(sub_times, m)?)?;
    m.add_function(wrap_pyfunction!(event_maps, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_slam, m)?)?;
    Ok(())
}
