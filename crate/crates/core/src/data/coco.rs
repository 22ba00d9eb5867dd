use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Image, Scene};
use crate::error::{Error, Result};
use crate::geometry::BoxSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    #[serde(default)]
    pub id: u64,
    pub image_id: u64,
    /// `x, y, w, h` in pixels.
    pub bbox: [f64; 4],
    pub category_id: u64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CocoDocument {
    #[serde(default)]
    pub images: Vec<CocoImage>,
    #[serde(default)]
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
}

/// Loaded scenes plus the dense-label to category mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct CocoSubset {
    pub scenes: Vec<Scene>,
    /// `categories[label]` is the original category.
    pub categories: Vec<CocoCategory>,
    /// Image id of each scene.
    pub image_ids: Vec<u64>,
}

fn image_path(dir: &Path, file: &str) -> Option<PathBuf> {
    [dir.join(file), dir.join("images").join(file)]
        .into_iter()
        .find(|p| p.is_file())
}

fn read_gray(path: &Path) -> Option<Image> {
    let img = image::open(path).ok()?.to_luma8();
    let (w, h) = img.dimensions();
    let pixels = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Image::new(h as usize, w as usize, pixels).ok()
}

/// Reads up to `max_images` annotated images from a COCO annotation file.
/// Images are looked up next to the file (or in an `images/` subdirectory);
/// missing or unreadable images and crowd boxes are skipped.
pub fn load_coco_subset(path: &Path, max_images: usize) -> Result<CocoSubset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: CocoDocument =
        serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));

    let mut categories = doc.categories.clone();
    categories.sort_by_key(|c| c.id);
    let dense: BTreeMap<u64, usize> = categories.iter().enumerate().map(|(i, c)| (c.id, i)).collect();

    let mut per_image: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
    for a in doc.annotations.iter().filter(|a| a.iscrowd == 0) {
        if !dense.contains_key(&a.category_id) {
            return Err(Error::Malformed(format!("annotation with unknown category {}", a.category_id)));
        }
        per_image.entry(a.image_id).or_default().push(a);
    }

    let mut scenes = Vec::new();
    let mut image_ids = Vec::new();
    for info in &doc.images {
        if scenes.len() >= max_images {
            break;
        }
        let Some(anns) = per_image.get(&info.id) else {
            continue;
        };
        let Some(image) = image_path(dir, &info.file_name).and_then(|p| read_gray(&p)) else {
            log::warn!("skipping image {} ({}): not found or unreadable", info.id, info.file_name);
            continue;
        };
        let (w, h) = (info.width as f64, info.height as f64);
        let mut boxes = Vec::with_capacity(anns.len());
        let mut labels = Vec::with_capacity(anns.len());
        for a in anns {
            let [x, y, bw, bh] = a.bbox;
            boxes.push([x / w, y / h, (x + bw) / w, (y + bh) / h]);
            labels.push(dense[&a.category_id]);
        }
        scenes.push(Scene {
            image,
            boxes: BoxSet::corner(boxes)?,
            labels,
            source: format!("coco:{}", info.id),
        });
        image_ids.push(info.id);
    }
    Ok(CocoSubset {
        scenes,
        categories,
        image_ids,
    })
}

/// Serializes scenes as a COCO document; image `i` is named `{i}.png`.
pub fn to_coco(scenes: &[Scene], categories: &[CocoCategory]) -> CocoDocument {
    let mut doc = CocoDocument {
        categories: categories.to_vec(),
        ..Default::default()
    };
    for (i, s) in scenes.iter().enumerate() {
        let (w, h) = (s.image.width as f64, s.image.height as f64);
        doc.images.push(CocoImage {
            id: i as u64,
            file_name: format!("{i}.png"),
            width: s.image.width,
            height: s.image.height,
        });
        let corner = s.boxes.convert(crate::geometry::BoxFormat::Corner);
        for (b, &label) in corner.coords().iter().zip(&s.labels) {
            doc.annotations.push(CocoAnnotation {
                id: doc.annotations.len() as u64 + 1,
                image_id: i as u64,
                bbox: [b[0] * w, b[1] * h, (b[2] - b[0]) * w, (b[3] - b[1]) * h],
                category_id: categories[label].id,
                iscrowd: 0,
            });
        }
    }
    doc
}
