use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Knobs for the whole preprocessing pipeline.
///
/// `alpha`, `beta`, `gamma` and `t_prime` shape the temporal saliency kernel;
/// the rest steer detection, tracking and the key-object filter. `t_prime = 0`
/// turns off history and yields the non-temporal variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Temporal decay applied per step of history, in [0, 1].
    pub alpha: f64,
    /// Variance broadening base, in [0, 1]; older frames get kernels widened
    /// by beta^-k.
    pub beta: f64,
    /// Gaussian kernel scale in pixels, > 0.
    pub gamma: f64,
    /// History horizon in frames; 0 means current frame only.
    pub t_prime: usize,
    /// Number of frames sampled for the global context query, >= 1.
    pub num_context_frames: usize,
    /// Minimum IoU for a detection to continue a track, in [0, 1].
    pub iou_gate: f64,
    /// Minimum detector confidence kept after filtering, in [0, 1].
    pub detector_confidence: f64,
    /// Maximum missing-object re-detection rounds per sub-sequence.
    pub retry_cap: usize,
    /// Regularization weight for the reference penalty, >= 0.
    pub lambda: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            alpha: 0.7,
            beta: 0.8,
            gamma: 15.0,
            t_prime: 4,
            num_context_frames: 25,
            iou_gate: 0.1,
            detector_confidence: 0.3,
            retry_cap: 3,
            lambda: 10.0,
        }
    }
}

impl PipelineConfig {
    /// Named hyperparameter sets for the two evaluation domains.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "carla" => Ok(PipelineConfig::default()),
            "robot" => Ok(PipelineConfig {
                gamma: 30.0,
                lambda: 5.0,
                ..PipelineConfig::default()
            }),
            _ => Err(Error::UnknownPreset { name: name.to_owned() }),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::json(format!("parsing config {}", path.display()), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every field against its documented range; the error names the
    /// offending field.
    pub fn validate(&self) -> Result<()> {
        fn unit_range(name: &str, v: f64) -> Result<()> {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1], got {v}")));
            }
            Ok(())
        }
        unit_range("alpha", self.alpha)?;
        unit_range("beta", self.beta)?;
        if !self.gamma.is_finite() || self.gamma <= 0.0 {
            return Err(Error::InvalidConfig(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.num_context_frames == 0 {
            return Err(Error::InvalidConfig("num_context_frames must be >= 1".into()));
        }
        unit_range("iou_gate", self.iou_gate)?;
        unit_range("detector_confidence", self.detector_confidence)?;
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}
