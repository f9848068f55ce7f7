//! Run configuration: weights, thresholds, budgets, and ablation
//! toggles, serialized as TOML. Unknown keys are rejected; writing then
//! reading a config yields an equal value.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EvsplatError, Result};
use crate::events::EventParams;
use crate::objective::LossWeights;
use crate::optim::LearningRates;
use crate::render::RasterSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Synthetic,
    Real,
}

impl std::str::FromStr for Profile {
    type Err = EvsplatError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Profile::Synthetic),
            "real" => Ok(Profile::Real),
            other => Err(EvsplatError::Config(format!(
                "unknown profile {other:?}, expected synthetic or real"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventConfig {
    pub theta: f64,
    pub log_eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeThresholds {
    /// Insert a keyframe when visible-set IoU drops below this.
    pub tau_iou: f64,
    /// Drop window keyframes whose IoU with the new one is below this.
    pub tau_drop: f64,
    /// Insert when translation exceeds tau_move times the mean depth.
    pub tau_move: f64,
}

impl Default for KeyframeThresholds {
    fn default() -> Self {
        Self {
            tau_iou: 0.9,
            tau_drop: 0.3,
            tau_move: 0.08,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationBudgets {
    pub tracking: usize,
    pub mapping: usize,
    /// Mapping burst after the first frame.
    pub init: usize,
    /// Early-stop threshold on the pose update norm during tracking.
    pub tracking_min_update: f64,
}

impl Default for IterationBudgets {
    fn default() -> Self {
        Self {
            tracking: 100,
            mapping: 60,
            init: 300,
            tracking_min_update: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InsertionConfig {
    /// Pixel stride for depth back-projection.
    pub stride: usize,
    /// Skip pixels whose rendered alpha exceeds this.
    pub coverage_alpha: f64,
    /// Pruning: drop Gaussians below this opacity.
    pub min_opacity: f64,
    /// Pruning: required observations once old enough.
    pub min_observations: u32,
    /// Pruning: age (in keyframes) after which observations are required.
    pub prune_age: u64,
}

impl Default for InsertionConfig {
    fn default() -> Self {
        Self {
            stride: 4,
            coverage_alpha: 0.7,
            min_opacity: 0.05,
            min_observations: 3,
            prune_age: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterConfig {
    pub near: f64,
    pub alpha_min: f64,
    pub alpha_clamp: f64,
    pub transmittance_min: f64,
    pub cov_lowpass: f64,
    pub background: [f64; 3],
}

impl Default for RasterConfig {
    fn default() -> Self {
        let s = RasterSettings::default();
        Self {
            near: s.near,
            alpha_min: s.alpha_min,
            alpha_clamp: s.alpha_clamp,
            transmittance_min: s.transmittance_min,
            cov_lowpass: s.cov_lowpass,
            background: s.background,
        }
    }
}

impl RasterConfig {
    pub fn settings(&self) -> RasterSettings {
        RasterSettings {
            near: self.near,
            alpha_min: self.alpha_min,
            alpha_clamp: self.alpha_clamp,
            transmittance_min: self.transmittance_min,
            cov_lowpass: self.cov_lowpass,
            background: self.background,
        }
    }
}

/// Ablation switches mirroring the four-way event grid plus the
/// no-event-loss and CRF toggles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub event_tracking: bool,
    pub event_mapping: bool,
    pub no_event_loss: bool,
    pub crf: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            event_tracking: true,
            event_mapping: true,
            no_event_loss: true,
            crf: true,
        }
    }
}

/// Full run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: String,
    pub out_dir: String,
    pub profile: Profile,
    pub seed: u64,
    /// Exposure sub-intervals per frame.
    pub k_intervals: usize,
    /// Sliding window capacity.
    pub window_max: usize,
    /// Mapping finetunes the poses of this many latest keyframes.
    pub pose_finetune_count: usize,
    /// Number of CRF control nodes.
    pub crf_nodes: usize,
    pub weights: LossWeights,
    pub events: EventConfig,
    pub keyframe: KeyframeThresholds,
    pub lr: LearningRates,
    pub iters: IterationBudgets,
    pub insert: InsertionConfig,
    pub raster: RasterConfig,
    pub toggles: Toggles,
}

impl RunConfig {
    /// Profile presets; synthetic uses theta 0.25 / lambda_E 0.05 /
    /// lambda_ID 0.95, real uses theta 0.3 / lambda_E 0.15 / lambda_ID
    /// 0.85.
    pub fn from_profile(profile: Profile) -> Self {
        let (weights, theta) = match profile {
            Profile::Synthetic => (LossWeights::synthetic(), 0.25),
            Profile::Real => (LossWeights::real(), 0.3),
        };
        Self {
            dataset: String::new(),
            out_dir: String::new(),
            profile,
            seed: 7,
            k_intervals: 4,
            window_max: 10,
            pose_finetune_count: 5,
            crf_nodes: 32,
            weights,
            events: EventConfig {
                theta,
                log_eps: 1e-3,
            },
            keyframe: KeyframeThresholds::default(),
            lr: LearningRates::default(),
            iters: IterationBudgets::default(),
            insert: InsertionConfig::default(),
            raster: RasterConfig::default(),
            toggles: Toggles::default(),
        }
    }

    pub fn event_params(&self) -> EventParams {
        EventParams {
            theta: self.events.theta,
            lambda_ne: if self.toggles.no_event_loss {
                self.weights.lambda_ne
            } else {
                0.0
            },
            log_eps: self.events.log_eps,
        }
    }

    /// Loss weights as seen by the tracker (event term obeys the
    /// event-tracking toggle, no-event term its own toggle).
    pub fn tracking_weights(&self) -> LossWeights {
        LossWeights {
            lambda_e: if self.toggles.event_tracking {
                self.weights.lambda_e
            } else {
                0.0
            },
            lambda_ne: if self.toggles.no_event_loss {
                self.weights.lambda_ne
            } else {
                0.0
            },
            ..self.weights
        }
    }

    /// Loss weights as seen by the mapper.
    pub fn mapping_weights(&self) -> LossWeights {
        LossWeights {
            lambda_e: if self.toggles.event_mapping {
                self.weights.lambda_e
            } else {
                0.0
            },
            lambda_ne: if self.toggles.no_event_loss {
                self.weights.lambda_ne
            } else {
                0.0
            },
            ..self.weights
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| EvsplatError::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| EvsplatError::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)
            .map_err(|e| EvsplatError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EvsplatError::io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    /// Applies a `--toggle name=on|off` style override.
    pub fn apply_toggle(&mut self, spec: &str) -> Result<()> {
        let (name, value) = spec.split_once('=').ok_or_else(|| {
            EvsplatError::Config(format!("toggle {spec:?} must look like name=on|off"))
        })?;
        let on = match value {
            "on" | "true" | "1" => true,
            "off" | "false" | "0" => false,
            other => {
                return Err(EvsplatError::Config(format!(
                    "toggle value {other:?} must be on or off"
                )))
            }
        };
        match name {
            "event_tracking" => self.toggles.event_tracking = on,
            "event_mapping" => self.toggles.event_mapping = on,
            "no_event_loss" => self.toggles.no_event_loss = on,
            "crf" => self.toggles.crf = on,
            other => {
                return Err(EvsplatError::Config(format!("unknown toggle {other:?}")))
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_identity() {
        let mut config = RunConfig::from_profile(Profile::Synthetic);
        config.dataset = "data/blurry".into();
        config.out_dir = "out/run1".into();
        config.seed = 42;
        config.toggles.event_mapping = false;
        let text = config.to_toml().unwrap();
        let parsed = RunConfig::from_toml(&text).unwrap();
        assert_eq!(parsed, config);
    }

    #[test]
    fn rejects_unknown_keys() {
        let mut text = RunConfig::from_profile(Profile::Synthetic)
            .to_toml()
            .unwrap();
        text.push_str("\nmystery_knob = 3\n");
        assert!(RunConfig::from_toml(&text).is_err());

        let nested = text.replace("[weights]", "[weights]\nbogus = 1.0");
        assert!(RunConfig::from_toml(&nested).is_err());
    }

    #[test]
    fn profiles_preload_reference_values() {
        let synth = RunConfig::from_profile(Profile::Synthetic);
        assert_eq!(synth.events.theta, 0.25);
        assert_eq!(synth.weights.lambda_e, 0.05);
        assert_eq!(synth.weights.lambda_id, 0.95);
        assert_eq!(synth.weights.lambda_i, 0.9);
        assert_eq!(synth.weights.lambda_d, 0.1);
        assert_eq!(synth.weights.lambda_ne, 0.4);
        assert_eq!(synth.weights.lambda_iso, 10.0);
        assert_eq!(synth.window_max, 10);
        assert_eq!(synth.pose_finetune_count, 5);

        let real = RunConfig::from_profile(Profile::Real);
        assert_eq!(real.events.theta, 0.3);
        assert_eq!(real.weights.lambda_e, 0.15);
        assert_eq!(real.weights.lambda_id, 0.85);
    }

    #[test]
    fn toggles_gate_weights() {
        let mut config = RunConfig::from_profile(Profile::Synthetic);
        config.apply_toggle("event_tracking=off").unwrap();
        assert_eq!(config.tracking_weights().lambda_e, 0.0);
        assert_eq!(config.mapping_weights().lambda_e, 0.05);
        config.apply_toggle("no_event_loss=off").unwrap();
        assert_eq!(config.mapping_weights().lambda_ne, 0.0);
        assert!(config.apply_toggle("bogus=on").is_err());
        assert!(config.apply_toggle("crf").is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let config = RunConfig::from_profile(Profile::Real);
        config.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), config);
    }
}
