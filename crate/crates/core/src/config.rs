//! The single JSON run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimize::FitConfig;
use crate::render::RenderConfig;
use crate::sis::SisConfig;
use crate::synth::SynthConfig;
use crate::tensorio::{read_file, write_text, Area};
use crate::volume::GridSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub voxel_size: f64,
    /// Vertical extent above the ground plane, meters.
    pub height: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.25,
            height: 2.0,
        }
    }
}

impl GridConfig {
    pub fn grid_for(&self, area: &Area) -> Result<GridSpec> {
        GridSpec::covering(area, self.voxel_size, self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub score_thr: f64,
    pub nms_radius: f64,
    pub match_radius: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            score_thr: 0.4,
            nms_radius: 0.5,
            match_radius: 0.5,
        }
    }
}

/// Where `fit` takes its pseudo-label masks from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// `masks/` written by `segment`.
    #[default]
    Segmented,
    /// `gt_masks/` written by `synth`.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub sis: SisConfig,
    pub grid: GridConfig,
    pub render: RenderConfig,
    pub fit: FitConfig,
    pub detect: DetectConfig,
    pub masks: MaskSource,
}


impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = read_file(path.as_ref())?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.to_json())
    }

    /// Sets every seed (generator, PCA, fitting) at once.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.sis.seed = seed;
        self.fit.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.fit.validate()?;
        self.render.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.sis.t_pca == 0 || self.sis.power_iters == 0 || !(self.sis.power_tol > 0.0) {
            return Err(Error::Config("sis needs t_pca >= 1, power_iters >= 1 and power_tol > 0".into()));
        }
        if !(self.grid.voxel_size > 0.0 && self.grid.height > 0.0) {
            return Err(Error::Config("grid voxel_size and height must be positive".into()));
        }
        let d = &self.detect;
        if !(d.score_thr > 0.0 && d.score_thr < 1.0 && d.nms_radius > 0.0 && d.match_radius > 0.0) {
            return Err(Error::Config("detect needs score_thr in (0, 1) and positive radii".into()));
        }
        Ok(())
    }
}
