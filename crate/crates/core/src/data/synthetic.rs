use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Image, Scene};
use crate::error::{Error, Result};
use crate::geometry::BoxSet;

pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
    /// Half-width of the uniform pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Object size range in pixels.
    #[serde(default = "default_size")]
    pub size: [usize; 2],
}

fn default_max_objects() -> usize {
    8
}

fn default_noise() -> f64 {
    0.05
}

fn default_size() -> [usize; 2] {
    [10, 22]
}

impl SyntheticSpec {
    pub fn new(seed: u64, count: usize, height: usize, width: usize) -> Self {
        Self {
            seed,
            count,
            height,
            width,
            max_objects: default_max_objects(),
            noise: default_noise(),
            size: default_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(32) || !self.width.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "scene size {}x{} must be a positive multiple of 32",
                self.height, self.width
            )));
        }
        if !(1..=8).contains(&self.max_objects) {
            return Err(Error::Config("max_objects must lie in 1..=8".into()));
        }
        let [lo, hi] = self.size;
        if lo < 4 || lo > hi || hi > self.height.min(self.width) / 2 {
            return Err(Error::Config(format!("object size range {:?} does not fit", self.size)));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::Config("noise must lie in [0, 0.5)".into()));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Vec<Scene>> {
        self.validate()?;
        Ok((0..self.count).map(|i| generate_scene(self, i as u64)).collect())
    }
}

fn covers(class: usize, x: f64, y: f64, x0: f64, y0: f64, s: f64) -> bool {
    // (x, y) is a pixel center; the shape lives in the s x s cell at (x0, y0).
    let (u, v) = (x - x0, y - y0);
    match class {
        0 => {
            let r = s / 2.0;
            (u - r).powi(2) + (v - r).powi(2) <= r * r
        }
        1 => (0.0..s).contains(&u) && (0.0..s).contains(&v),
        _ => {
            // Upward isosceles triangle with apex at the top center.
            (0.0..s).contains(&v) && (u - s / 2.0).abs() <= v / 2.0
        }
    }
}

/// Renders scene `index` of the dataset described by `spec`.
pub fn generate_scene(spec: &SyntheticSpec, index: u64) -> Scene {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let wanted = rng.gen_range(1..=spec.max_objects);
    let mut occupied: Vec<[usize; 4]> = Vec::new();
    let mut pixels = vec![0.0; h * w];
    let mut boxes = Vec::new();
    let mut labels = Vec::new();
    let mut intensities: Vec<f64> = Vec::new();
    for _ in 0..wanted * 50 {
        if labels.len() == wanted {
            break;
        }
        let s = rng.gen_range(spec.size[0]..=spec.size[1]);
        let x0 = rng.gen_range(0..=w - s);
        let y0 = rng.gen_range(0..=h - s);
        let class = rng.gen_range(0..CLASS_NAMES.len());
        let value = 0.35 + 0.05 * rng.gen_range(0..13) as f64;
        // One pixel of clearance between objects keeps boxes disjoint.
        let cell = [x0.saturating_sub(1), y0.saturating_sub(1), x0 + s + 1, y0 + s + 1];
        let clash = occupied
            .iter()
            .any(|o| cell[0] < o[2] && o[0] < cell[2] && cell[1] < o[3] && o[1] < cell[3]);
        if clash || intensities.contains(&value) {
            continue;
        }
        let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
        for py in y0..y0 + s {
            for px in x0..x0 + s {
                if covers(class, px as f64 + 0.5, py as f64 + 0.5, x0 as f64, y0 as f64, s as f64) {
                    pixels[py * w + px] = value;
                    bx0 = bx0.min(px);
                    by0 = by0.min(py);
                    bx1 = bx1.max(px + 1);
                    by1 = by1.max(py + 1);
                }
            }
        }
        occupied.push([x0, y0, x0 + s, y0 + s]);
        intensities.push(value);
        labels.push(class);
        boxes.push([
            bx0 as f64 / w as f64,
            by0 as f64 / h as f64,
            bx1 as f64 / w as f64,
            by1 as f64 / h as f64,
        ]);
    }
    if spec.noise > 0.0 {
        for p in &mut pixels {
            *p += rng.gen_range(-spec.noise..spec.noise);
        }
    }
    Scene {
        image: Image {
            height: h,
            width: w,
            pixels,
        },
        boxes: BoxSet::corner(boxes).expect("rendered boxes are ordered"),
        labels,
        source: format!("synthetic:{}:{index}", spec.seed),
    }
}
