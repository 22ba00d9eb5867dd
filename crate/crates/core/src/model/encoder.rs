//! Three-level patch encoder: an 8x8 patch stem, 3x3 neighbourhood mixing on
//! each level and 2x2 merges between levels (strides 8, 16, 32).

use densup_tensor::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::layers::{Linear, ParamStore};
use crate::data::Image;
use crate::error::{Error, Result};

pub const PATCH: usize = 8;
pub const STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Debug, Clone, Copy)]
pub struct LevelInfo {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    /// First row of this level in the flattened token list.
    pub offset: usize,
}

/// Encoder output: per-level token features and their concatenation.
#[derive(Debug, Clone)]
pub struct Features {
    pub levels: Vec<Var>,
    pub info: Vec<LevelInfo>,
    /// All tokens, level by level, row-major within a level.
    pub memory: Var,
    /// Normalized token centers `(x, y)`.
    pub centers: Vec<[f64; 2]>,
    pub level_of: Vec<usize>,
    pub image_size: (usize, usize),
}

impl Features {
    pub fn n_tokens(&self) -> usize {
        self.centers.len()
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    stem: Linear,
    mix: [Linear; 3],
    merge: [Linear; 2],
    proj: [Linear; 3],
    d: usize,
}

fn neighbourhood(h: usize, w: usize) -> Vec<usize> {
    let pad = h * w;
    let mut idx = Vec::with_capacity(h * w * 9);
    for i in 0..h as isize {
        for j in 0..w as isize {
            for di in -1..=1 {
                for dj in -1..=1 {
                    let (y, x) = (i + di, j + dj);
                    let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
                    idx.push(if inside { y as usize * w + x as usize } else { pad });
                }
            }
        }
    }
    idx
}

fn children(h: usize, w: usize) -> Vec<usize> {
    let fine_w = 2 * w;
    let mut idx = Vec::with_capacity(h * w * 4);
    for i in 0..h {
        for j in 0..w {
            for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                idx.push((2 * i + a) * fine_w + 2 * j + b);
            }
        }
    }
    idx
}

/// Non-overlapping `PATCH x PATCH` patches as rows.
fn patches(image: &Image) -> Result<Tensor> {
    let (gh, gw) = (image.height / PATCH, image.width / PATCH);
    let mut data = Vec::with_capacity(image.height * image.width);
    for i in 0..gh {
        for j in 0..gw {
            for y in 0..PATCH {
                let row = (i * PATCH + y) * image.width + j * PATCH;
                data.extend_from_slice(&image.pixels[row..row + PATCH]);
            }
        }
    }
    Ok(Tensor::new(vec![gh * gw, PATCH * PATCH], data)?)
}

/// Sinusoidal embedding of normalized token centers, `n x d`.
pub fn position_embedding(centers: &[[f64; 2]], d: usize) -> Result<Tensor> {
    let f = (d / 4).max(1);
    let mut data = Vec::with_capacity(centers.len() * d);
    for c in centers {
        let mut row = Vec::with_capacity(d);
        for coord in [c[0], c[1]] {
            for k in 0..f {
                let omega = 1.0 / 10000f64.powf(k as f64 / f as f64);
                let t = coord * 64.0 * omega;
                row.push(t.sin());
                row.push(t.cos());
            }
        }
        row.resize(d, 0.0);
        data.extend(row);
    }
    Ok(Tensor::new(vec![centers.len(), d], data)?)
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize) -> Self {
        let stem = Linear::new(store, rng, "enc.stem", PATCH * PATCH, d);
        let mix = [0, 1, 2].map(|l| Linear::new(store, rng, &format!("enc.mix{l}"), 9 * d, d));
        let merge = [0, 1].map(|l| Linear::new(store, rng, &format!("enc.merge{l}"), 4 * d, d));
        let proj = [0, 1, 2].map(|l| Linear::new(store, rng, &format!("enc.proj{l}"), d, d));
        Self {
            stem,
            mix,
            merge,
            proj,
            d,
        }
    }

    /// Parameter names of the per-level output projections.
    pub fn projection_names() -> Vec<String> {
        (0..3)
            .flat_map(|l| [format!("enc.proj{l}.w"), format!("enc.proj{l}.b")])
            .collect()
    }

    fn mix(&self, tape: &mut Tape, p: &[Var], level: usize, x: Var, h: usize, w: usize) -> Result<Var> {
        let pad = tape.constant(Tensor::zeros(vec![1, self.d]))?;
        let padded = tape.concat(&[x, pad], 0)?;
        let g = tape.gather_rows(padded, &neighbourhood(h, w))?;
        let g = tape.reshape(g, vec![h * w, 9 * self.d])?;
        let y = self.mix[level].forward(tape, p, g)?;
        let y = tape.relu(y)?;
        Ok(tape.add(x, y)?)
    }

    fn merge(&self, tape: &mut Tape, p: &[Var], level: usize, x: Var, h: usize, w: usize) -> Result<Var> {
        let g = tape.gather_rows(x, &children(h, w))?;
        let g = tape.reshape(g, vec![h * w, 4 * self.d])?;
        let y = self.merge[level].forward(tape, p, g)?;
        Ok(tape.relu(y)?)
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], image: &Image) -> Result<Features> {
        let (hh, ww) = (image.height, image.width);
        if hh == 0 || ww == 0 || hh % 32 != 0 || ww % 32 != 0 {
            return Err(Error::Shape(format!("image {hh}x{ww} is not a multiple of 32")));
        }
        let x = tape.constant(patches(image)?)?;
        let x = self.stem.forward(tape, p, x)?;
        let mut x = tape.relu(x)?;
        let mut levels = Vec::with_capacity(3);
        let mut info = Vec::with_capacity(3);
        let mut centers = Vec::new();
        let mut level_of = Vec::new();
        for (l, &stride) in STRIDES.iter().enumerate() {
            let (h, w) = (hh / stride, ww / stride);
            if l > 0 {
                x = self.merge(tape, p, l - 1, x, h, w)?;
            }
            x = self.mix(tape, p, l, x, h, w)?;
            levels.push(self.proj[l].forward(tape, p, x)?);
            info.push(LevelInfo {
                height: h,
                width: w,
                stride,
                offset: centers.len(),
            });
            for i in 0..h {
                for j in 0..w {
                    centers.push([
                        (j as f64 + 0.5) * stride as f64 / ww as f64,
                        (i as f64 + 0.5) * stride as f64 / hh as f64,
                    ]);
                    level_of.push(l);
                }
            }
        }
        let memory = tape.concat(&levels, 0)?;
        Ok(Features {
            levels,
            info,
            memory,
            centers,
            level_of,
            image_size: (hh, ww),
        })
    }
}
