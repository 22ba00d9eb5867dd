//! Scenes and datasets: deterministic synthetic shapes, a small COCO-format
//! reader/writer and the dataset manifest.

mod coco;
mod synthetic;

pub use coco::{load_coco_subset, to_coco, CocoAnnotation, CocoCategory, CocoDocument, CocoImage, CocoSubset};
pub use synthetic::{generate_scene, SyntheticSpec, CLASS_NAMES};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxSet;

/// Single-channel image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }
}

/// An image with its corner-format annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub boxes: BoxSet,
    pub labels: Vec<usize>,
    /// Where the scene came from, e.g. `synthetic:<seed>:<index>`.
    pub source: String,
}

/// Dataset description as stored in configs and manifest files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Coco(CocoSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CocoSpec {
    pub annotations: PathBuf,
    pub max_images: usize,
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Vec<Scene>> {
        match self {
            DatasetSpec::Synthetic(s) => s.generate(),
            DatasetSpec::Coco(c) => Ok(load_coco_subset(&c.annotations, c.max_images)?.scenes),
        }
    }

    pub fn n_classes(&self) -> Option<usize> {
        match self {
            DatasetSpec::Synthetic(_) => Some(CLASS_NAMES.len()),
            DatasetSpec::Coco(_) => None,
        }
    }

    /// Reads a manifest file (TOML).
    pub fn read_manifest(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
