//! Event-aided, blur-aware RGB-D Gaussian splatting SLAM at desk scale.
//!
//! The crate tracks a continuously moving camera through each frame's
//! exposure window and incrementally fits a 3D Gaussian scene to blurred
//! images, depth maps, and accumulated event maps. A built-in synthetic
//! oracle generates fully ground-truthed datasets for end-to-end
//! validation.

pub mod camera;
pub mod error;
pub mod img;
pub mod render;
pub mod scene;
pub mod se3;

pub use camera::CameraIntrinsics;
pub use error::{EvsplatError, Result};
pub use img::{ColorImage, ScalarImage};
pub use render::{render, render_backward, RasterSettings, RenderGrads, RenderOutput, SceneGrads};
pub use scene::{Gaussian, GaussianScene};
pub use se3::{ExposureTrajectory, Pose};

pub mod crf;
pub mod events;
pub mod imaging;
pub mod objective;

pub use crf::CrfNodes;
pub use events::{Event, EventMap, EventParams};
pub use imaging::FrameBundle;
pub use objective::{FrameObservation, LossWeights};

pub mod config;
pub mod dataset;
pub mod metrics;
pub mod optim;
pub mod oracle;

pub use config::{Profile, RunConfig};
pub use dataset::Dataset;
pub use metrics::MetricsReport;

pub mod slam;

pub use slam::{run_sequence, SlamState};
