//! Per-tile segmentation backends.
//!
//! Two kinds are supported: a builtin per-pixel threshold segmenter, and an
//! external process speaking the framed stdio protocol in [`protocol`]. A
//! real network plugs in as an external backend; the workbench never trains
//! anything itself.

mod builtin;
mod external;
pub mod protocol;
pub mod reference;

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use builtin::{segment_builtin, ThresholdRule};
pub use external::ExternalBackend;

/// Per-pixel class indices, optionally with per-pixel confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub width: u32,
    pub height: u32,
    /// Class count including background (class 0).
    pub classes: u8,
    pub labels: Vec<u8>,
    pub confidence: Option<Vec<f32>>,
}

impl LabelMask {
    pub fn background(width: u32, height: u32, classes: u8) -> Self {
        LabelMask {
            width,
            height,
            classes,
            labels: vec![0; width as usize * height as usize],
            confidence: None,
        }
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.labels[y as usize * self.width as usize + x as usize]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.width as usize * self.height as usize;
        if self.classes < 2 {
            return Err(Error::Protocol(format!("class count {} < 2", self.classes)));
        }
        if self.labels.len() != n {
            return Err(Error::Protocol(format!(
                "{} labels for {}x{}",
                self.labels.len(),
                self.width,
                self.height
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Protocol(format!(
                "label {bad} >= class count {}",
                self.classes
            )));
        }
        if let Some(c) = &self.confidence {
            if c.len() != n {
                return Err(Error::Protocol("confidence raster has wrong size".into()));
            }
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Protocol("confidence outside [0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn count(&self, class_id: u8) -> u64 {
        self.labels.iter().filter(|&&l| l == class_id).count() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendKind {
    Builtin {
        rules: Vec<ThresholdRule>,
    },
    External {
        command: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        working_dir: Option<PathBuf>,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: f64,
        #[serde(default = "default_retries")]
        retries: u32,
    },
}

fn default_timeout_secs() -> f64 {
    120.0
}

fn default_retries() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Index is the class id; entry 0 must be "background".
    pub class_names: Vec<String>,
    #[serde(flatten)]
    pub kind: BackendKind,
}

impl Default for BackendConfig {
    /// Builtin segmenter tuned to dark stained objects on a lighter stroma:
    /// class 1 = luma <= 130 and G - B <= -50.
    fn default() -> Self {
        BackendConfig {
            class_names: vec!["background".into(), "glomerulus".into()],
            kind: BackendKind::Builtin {
                rules: vec![ThresholdRule {
                    class_id: 1,
                    luma: [0, 130],
                    r_minus_b: [-255, 255],
                    g_minus_b: [-255, -50],
                }],
            },
        }
    }
}

impl BackendConfig {
    pub fn classes(&self) -> u8 {
        self.class_names.len() as u8
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() < 2 || self.class_names.len() > 255 {
            return Err(Error::BackendConfig(
                "need between 2 and 255 class names".into(),
            ));
        }
        if self.class_names[0] != "background" {
            return Err(Error::BackendConfig(
                "class_names[0] must be \"background\"".into(),
            ));
        }
        match &self.kind {
            BackendKind::Builtin { rules } => {
                for r in rules {
                    r.validate(self.classes())?;
                }
            }
            BackendKind::External {
                command,
                timeout_secs,
                ..
            } => {
                if command.is_empty() {
                    return Err(Error::BackendConfig("external command is empty".into()));
                }
                if !(*timeout_secs > 0.0) {
                    return Err(Error::BackendConfig("timeout_secs must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: BackendConfig =
            serde_json::from_slice(bytes).map_err(|e| Error::BackendConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&bytes)
    }
}

/// Training hyperparameters forwarded verbatim to an external trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHyperparams {
    pub steps: u64,
    pub patch_size: u32,
    pub batch_size: u32,
    pub learning_rate: f64,
    pub output_stride: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_model: Option<PathBuf>,
}

impl Default for TrainingHyperparams {
    fn default() -> Self {
        TrainingHyperparams {
            steps: 400_000,
            patch_size: 512,
            batch_size: 12,
            learning_rate: 1e-3,
            output_stride: 16,
            init_model: None,
        }
    }
}

impl TrainingHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0
            || self.patch_size == 0
            || self.batch_size == 0
            || self.output_stride == 0
        {
            return Err(Error::InvalidParam(
                "hyperparameters must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParam("learning_rate must be positive".into()));
        }
        if self.patch_size % 16 != 0 {
            return Err(Error::InvalidParam(format!(
                "patch_size {} is not a multiple of 16",
                self.patch_size
            )));
        }
        Ok(())
    }
}

/// A configured backend ready to segment tiles from many threads.
pub enum Backend {
    Builtin {
        classes: u8,
        rules: Vec<ThresholdRule>,
    },
    External(ExternalBackend),
}

impl std::fmt::Debug for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Backend::Builtin { classes, .. } => write!(f, "Backend::Builtin({classes} classes)"),
            Backend::External(e) => write!(f, "Backend::External({:?})", e.command()),
        }
    }
}

impl Backend {
    pub fn from_config(cfg: &BackendConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(match &cfg.kind {
            BackendKind::Builtin { rules } => Backend::Builtin {
                classes: cfg.classes(),
                rules: rules.clone(),
            },
            BackendKind::External { .. } => Backend::External(ExternalBackend::new(cfg.clone())?),
        })
    }

    pub fn classes(&self) -> u8 {
        match self {
            Backend::Builtin { classes, .. } => *classes,
            Backend::External(e) => e.classes(),
        }
    }

    /// Segments one tile whose top-left corner sits at `origin` (level 0);
    /// the origin is only used for error reporting.
    pub fn infer_tile(&self, tile: &RgbImage, origin: (u32, u32)) -> Result<LabelMask> {
        match self {
            Backend::Builtin { classes, rules } => Ok(segment_builtin(tile, rules, *classes)),
            Backend::External(e) => e.infer(tile, origin),
        }
    }

    /// Runs the external trainer; returns the model path it reports.
    pub fn train(&self, manifest: &Path, hp: &TrainingHyperparams) -> Result<PathBuf> {
        hp.validate()?;
        match self {
            Backend::Builtin { .. } => Err(Error::NotTrainable),
            Backend::External(e) => e.train(manifest, hp),
        }
    }
}
