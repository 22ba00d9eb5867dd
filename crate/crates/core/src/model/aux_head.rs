//! Dense per-location head on the encoder levels: class logits plus four
//! side-distance distributions decoded by their expectation.

use densup_tensor::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::decoder::PRIOR_BIAS;
use super::encoder::Features;
use super::layers::{Linear, ParamStore};
use crate::assign::AnchorPoint;
use crate::error::Result;
use crate::geometry::BoxSet;
use crate::losses::decode_distribution;

#[derive(Debug, Clone)]
pub struct AuxHead {
    stem: Linear,
    cls: Linear,
    reg: Linear,
    bins: usize,
}

/// Dense predictions for every encoder token.
#[derive(Debug, Clone)]
pub struct AuxOutput {
    /// `T x C`.
    pub logits: Var,
    /// `(T * 4) x (R + 1)`: sides left, top, right, bottom per token.
    pub sides: Var,
    pub centers: Vec<[f64; 2]>,
    /// Normalized `(x, y)` stride of each token.
    pub strides: Vec<[f64; 2]>,
    pub levels: Vec<usize>,
    pub bins: usize,
}

impl AuxHead {
    /// `bins` is the number of distribution bins `R + 1`.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, classes: usize, bins: usize) -> Self {
        Self {
            stem: Linear::new(store, rng, "aux.stem", d, d),
            cls: Linear::with_bias(store, rng, "aux.cls", d, classes, PRIOR_BIAS),
            reg: Linear::constant(store, "aux.reg", d, 4 * bins, 0.0),
            bins,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], f: &Features) -> Result<AuxOutput> {
        let x = self.stem.forward(tape, p, f.memory)?;
        let x = tape.relu(x)?;
        let logits = self.cls.forward(tape, p, x)?;
        let reg = self.reg.forward(tape, p, x)?;
        let t = f.n_tokens();
        let sides = tape.reshape(reg, vec![t * 4, self.bins])?;
        let (h, w) = f.image_size;
        let strides = f
            .level_of
            .iter()
            .map(|&l| {
                let s = f.info[l].stride as f64;
                [s / w as f64, s / h as f64]
            })
            .collect();
        Ok(AuxOutput {
            logits,
            sides,
            centers: f.centers.clone(),
            strides,
            levels: f.level_of.clone(),
            bins: self.bins,
        })
    }
}

impl AuxOutput {
    pub fn n_tokens(&self) -> usize {
        self.centers.len()
    }

    /// Square anchors of `scale` strides around each token center.
    pub fn anchors(&self, scale: f64) -> Vec<AnchorPoint> {
        self.centers
            .iter()
            .zip(&self.strides)
            .zip(&self.levels)
            .map(|((&center, s), &level)| AnchorPoint {
                center,
                half_extent: [0.5 * scale * s[0], 0.5 * scale * s[1]],
                level,
            })
            .collect()
    }

    fn sign_scale(&self, token: usize) -> [f64; 4] {
        let s = self.strides[token];
        [-s[0], -s[1], s[0], s[1]]
    }

    fn anchor_row(&self, token: usize) -> [f64; 4] {
        let c = self.centers[token];
        [c[0], c[1], c[0], c[1]]
    }

    /// Decoded corner boxes of every token, outside the tape's gradient.
    pub fn decoded(&self, tape: &Tape) -> Result<BoxSet> {
        let v = tape.value(self.sides)?;
        let mut boxes = Vec::with_capacity(self.n_tokens());
        for t in 0..self.n_tokens() {
            let mut b = self.anchor_row(t);
            let s = self.sign_scale(t);
            for side in 0..4 {
                let row = v.row(t * 4 + side);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let expect: f64 = e.iter().enumerate().map(|(j, x)| j as f64 * x).sum::<f64>() / z;
                b[side] += s[side] * expect;
            }
            boxes.push(b);
        }
        BoxSet::corner(boxes)
    }

    /// Differentiable corner boxes of the given tokens, `k x 4`.
    pub fn decode_tokens(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        let rows: Vec<usize> = tokens.iter().flat_map(|&t| (0..4).map(move |s| t * 4 + s)).collect();
        let k = tokens.len();
        let g = tape.gather_rows(self.sides, &rows)?;
        let d = decode_distribution(tape, g)?;
        let d = tape.reshape(d, vec![k, 4])?;
        let scale: Vec<f64> = tokens.iter().flat_map(|&t| self.sign_scale(t)).collect();
        let base: Vec<f64> = tokens.iter().flat_map(|&t| self.anchor_row(t)).collect();
        let scale = tape.constant(Tensor::new(vec![k, 4], scale)?)?;
        let base = tape.constant(Tensor::new(vec![k, 4], base)?)?;
        let d = tape.mul(d, scale)?;
        Ok(tape.add(d, base)?)
    }

    /// Side distances from a token center to a corner box, in strides.
    pub fn side_targets(&self, token: usize, gt: &[f64; 4]) -> [f64; 4] {
        let c = self.centers[token];
        let s = self.strides[token];
        [
            (c[0] - gt[0]) / s[0],
            (c[1] - gt[1]) / s[1],
            (gt[2] - c[0]) / s[0],
            (gt[3] - c[1]) / s[1],
        ]
    }
}
