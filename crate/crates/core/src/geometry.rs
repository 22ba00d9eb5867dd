//! Axis-aligned boxes in normalized image coordinates and their overlap
//! metrics.
//!
//! L1 distances are taken in center-size form; IoU and GIoU in corner form.
//! Union and enclosing areas are floored at [`AREA_EPS`] so degenerate boxes
//! produce 0 instead of NaN.

use densup_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const AREA_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoxFormat {
    /// (cx, cy, w, h)
    CenterSize,
    /// (x1, y1, x2, y2)
    Corner,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    coords: Vec<[f64; 4]>,
    format: BoxFormat,
}

impl BoxSet {
    pub fn new(coords: Vec<[f64; 4]>, format: BoxFormat) -> Result<Self> {
        for (i, c) in coords.iter().enumerate() {
            let ok = c.iter().all(|v| v.is_finite())
                && match format {
                    BoxFormat::Corner => c[0] <= c[2] && c[1] <= c[3],
                    BoxFormat::CenterSize => c[2] >= 0.0 && c[3] >= 0.0,
                };
            if !ok {
                return Err(Error::InvalidBox {
                    index: i,
                    coords: *c,
                    format,
                });
            }
        }
        Ok(Self { coords, format })
    }

    pub fn corner(coords: Vec<[f64; 4]>) -> Result<Self> {
        Self::new(coords, BoxFormat::Corner)
    }

    pub fn center_size(coords: Vec<[f64; 4]>) -> Result<Self> {
        Self::new(coords, BoxFormat::CenterSize)
    }

    pub fn empty(format: BoxFormat) -> Self {
        Self {
            coords: Vec::new(),
            format,
        }
    }

    pub fn format(&self) -> BoxFormat {
        self.format
    }

    pub fn coords(&self) -> &[[f64; 4]] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn get(&self, i: usize) -> [f64; 4] {
        self.coords[i]
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            format: self.format,
        }
    }

    pub fn convert(&self, target: BoxFormat) -> Self {
        if target == self.format {
            return self.clone();
        }
        let f = match target {
            BoxFormat::Corner => center_to_corner,
            BoxFormat::CenterSize => corner_to_center,
        };
        Self {
            coords: self.coords.iter().map(|&c| f(c)).collect(),
            format: target,
        }
    }

    /// Rows as an `n x 4` tensor in the current format.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.len(), 4],
            self.coords.iter().flatten().copied().collect(),
        )
        .expect("n x 4")
    }

    pub fn from_tensor(t: &Tensor, format: BoxFormat) -> Result<Self> {
        if t.rank() != 2 || t.shape()[1] != 4 {
            return Err(Error::Shape(format!("expected n x 4 boxes, got {:?}", t.shape())));
        }
        let coords = t
            .data()
            .chunks_exact(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        Self::new(coords, format)
    }
}

pub fn center_to_corner([cx, cy, w, h]: [f64; 4]) -> [f64; 4] {
    [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
}

pub fn corner_to_center([x1, y1, x2, y2]: [f64; 4]) -> [f64; 4] {
    [0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1]
}

fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// IoU of two corner boxes.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    inter / union.max(AREA_EPS)
}

/// Generalized IoU of two corner boxes.
pub fn giou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let ew = a[2].max(b[2]) - a[0].min(b[0]);
    let eh = a[3].max(b[3]) - a[1].min(b[1]);
    let enclose = ew * eh;
    inter / union.max(AREA_EPS) - (enclose - union) / enclose.max(AREA_EPS)
}

fn pairwise(a: &BoxSet, b: &BoxSet, f: fn(&[f64; 4], &[f64; 4]) -> f64) -> Tensor {
    let a = a.convert(BoxFormat::Corner);
    let b = b.convert(BoxFormat::Corner);
    let mut data = Vec::with_capacity(a.len() * b.len());
    for x in a.coords() {
        for y in b.coords() {
            data.push(f(x, y));
        }
    }
    Tensor::new(vec![a.len(), b.len()], data).expect("|a| x |b|")
}

/// `|a| x |b|` IoU matrix. Inputs in center-size form are converted first.
pub fn pairwise_iou(a: &BoxSet, b: &BoxSet) -> Tensor {
    pairwise(a, b, iou)
}

pub fn pairwise_giou(a: &BoxSet, b: &BoxSet) -> Tensor {
    pairwise(a, b, giou)
}

/// Sum of absolute coordinate differences; both sides must share a format.
pub fn l1_distance(a: &BoxSet, b: &BoxSet) -> Result<Tensor> {
    if a.format() != b.format() {
        return Err(Error::FormatMismatch(a.format(), b.format()));
    }
    let mut data = Vec::with_capacity(a.len() * b.len());
    for x in a.coords() {
        for y in b.coords() {
            data.push(x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum());
        }
    }
    Ok(Tensor::new(vec![a.len(), b.len()], data)?)
}

/// Differentiable counterparts operating on `n x 4` tape values.
pub mod diff {
    use super::*;

    fn columns(tape: &mut Tape, v: Var) -> Result<[Var; 4]> {
        Ok([
            tape.narrow(v, 1, 0, 1)?,
            tape.narrow(v, 1, 1, 1)?,
            tape.narrow(v, 1, 2, 1)?,
            tape.narrow(v, 1, 3, 1)?,
        ])
    }

    pub fn center_to_corner(tape: &mut Tape, v: Var) -> Result<Var> {
        let [cx, cy, w, h] = columns(tape, v)?;
        let hw = tape.scale(w, 0.5)?;
        let hh = tape.scale(h, 0.5)?;
        let x1 = tape.sub(cx, hw)?;
        let y1 = tape.sub(cy, hh)?;
        let x2 = tape.add(cx, hw)?;
        let y2 = tape.add(cy, hh)?;
        Ok(tape.concat(&[x1, y1, x2, y2], 1)?)
    }

    /// Row-wise GIoU of matched corner boxes, shape `[n, 1]`.
    pub fn giou_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let [ax1, ay1, ax2, ay2] = columns(tape, a)?;
        let [bx1, by1, bx2, by2] = columns(tape, b)?;
        let n = tape.shape(a)?[0];
        let eps = tape.constant(Tensor::full(vec![n, 1], AREA_EPS))?;

        let area = |tape: &mut Tape, x1, y1, x2, y2| -> Result<Var> {
            let w = tape.sub(x2, x1)?;
            let h = tape.sub(y2, y1)?;
            let w = tape.relu(w)?;
            let h = tape.relu(h)?;
            Ok(tape.mul(w, h)?)
        };
        let area_a = area(tape, ax1, ay1, ax2, ay2)?;
        let area_b = area(tape, bx1, by1, bx2, by2)?;

        let ix1 = tape.maximum(ax1, bx1)?;
        let iy1 = tape.maximum(ay1, by1)?;
        let ix2 = tape.minimum(ax2, bx2)?;
        let iy2 = tape.minimum(ay2, by2)?;
        let inter = area(tape, ix1, iy1, ix2, iy2)?;

        let sum = tape.add(area_a, area_b)?;
        let union = tape.sub(sum, inter)?;
        let union_safe = tape.maximum(union, eps)?;
        let iou = tape.div(inter, union_safe)?;

        let ex1 = tape.minimum(ax1, bx1)?;
        let ey1 = tape.minimum(ay1, by1)?;
        let ex2 = tape.maximum(ax2, bx2)?;
        let ey2 = tape.maximum(ay2, by2)?;
        let ew = tape.sub(ex2, ex1)?;
        let eh = tape.sub(ey2, ey1)?;
        let enclose = tape.mul(ew, eh)?;
        let enclose_safe = tape.maximum(enclose, eps)?;
        let gap = tape.sub(enclose, union)?;
        let penalty = tape.div(gap, enclose_safe)?;
        Ok(tape.sub(iou, penalty)?)
    }
}
