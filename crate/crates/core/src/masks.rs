//! Random self-attention perturbation masks for concatenated query groups,
//! and the block-diagonal structure that keeps the groups independent.

use densup_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Additive logit offset for a blocked attention entry.
pub const BLOCKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// The 0/1 mask multiplies the attention logits.
    Multiply,
    /// Dropped entries receive a large negative logit offset.
    #[default]
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupLayout {
    pub n_groups: usize,
    pub queries_per_group: usize,
}

impl GroupLayout {
    pub fn new(n_groups: usize, queries_per_group: usize) -> Result<Self> {
        if n_groups == 0 || queries_per_group == 0 {
            return Err(Error::Invalid(format!(
                "group layout needs >= 1 group and query, got {n_groups} x {queries_per_group}"
            )));
        }
        Ok(Self {
            n_groups,
            queries_per_group,
        })
    }

    pub fn total(&self) -> usize {
        self.n_groups * self.queries_per_group
    }

    pub fn group_of(&self, row: usize) -> usize {
        row / self.queries_per_group
    }
}

/// One group's `q x q` mask. In multiply mode entries are 1 (keep) or 0;
/// in additive mode they are 0 (keep) or [`BLOCKED`].
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationMask {
    pub group: usize,
    pub matrix: Tensor,
    pub mode: MaskMode,
    pub keep_probability: f64,
}

impl PerturbationMask {
    pub fn identity(group: usize, q: usize, mode: MaskMode) -> Self {
        let keep = keep_value(mode);
        Self {
            group,
            matrix: Tensor::full(vec![q, q], keep),
            mode,
            keep_probability: 1.0,
        }
    }

    pub fn is_kept(&self, i: usize, j: usize) -> bool {
        self.matrix.at(i, j) == keep_value(self.mode)
    }
}

fn keep_value(mode: MaskMode) -> f64 {
    match mode {
        MaskMode::Multiply => 1.0,
        MaskMode::Additive => 0.0,
    }
}

fn drop_value(mode: MaskMode) -> f64 {
    match mode {
        MaskMode::Multiply => 0.0,
        MaskMode::Additive => BLOCKED,
    }
}

/// Stream seed for one `(seed, step, group)` triple.
fn stream(seed: u64, step: u64, group: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(1 << 20).wrapping_add(group));
    rng
}

/// One mask per group; off-diagonal entries are kept independently with
/// probability `keep_probability`, the diagonal always.
pub fn generate_masks(
    layout: GroupLayout,
    keep_probability: f64,
    mode: MaskMode,
    seed: u64,
    step: u64,
) -> Result<Vec<PerturbationMask>> {
    if !(keep_probability > 0.0 && keep_probability <= 1.0) {
        return Err(Error::Invalid(format!(
            "keep probability must lie in (0, 1], got {keep_probability}"
        )));
    }
    let q = layout.queries_per_group;
    let (keep, drop) = (keep_value(mode), drop_value(mode));
    Ok((0..layout.n_groups)
        .map(|g| {
            let mut rng = stream(seed, step, g as u64);
            let mut data = vec![keep; q * q];
            if keep_probability < 1.0 {
                for i in 0..q {
                    for j in 0..q {
                        let u: f64 = rng.gen();
                        if i != j && u >= keep_probability {
                            data[i * q + j] = drop;
                        }
                    }
                }
            }
            PerturbationMask {
                group: g,
                matrix: Tensor::new(vec![q, q], data).expect("q*q entries"),
                mode,
                keep_probability,
            }
        })
        .collect())
}

/// Full `(N q) x (N q)` attention mask for the concatenated groups.
///
/// `bias` is added to the logits and blocks every cross-group pair (plus the
/// dropped in-group pairs in additive mode). `multiplier`, present in
/// multiply mode, scales the logits elementwise before the bias is added.
#[derive(Debug, Clone, PartialEq)]
pub struct FullMask {
    pub bias: Tensor,
    pub multiplier: Option<Tensor>,
}

pub fn compose_full_mask(masks: &[PerturbationMask], layout: GroupLayout) -> Result<FullMask> {
    let q = layout.queries_per_group;
    if masks.len() != layout.n_groups {
        return Err(Error::Shape(format!(
            "{} masks for {} groups",
            masks.len(),
            layout.n_groups
        )));
    }
    let mode = masks[0].mode;
    for m in masks {
        if m.matrix.shape() != [q, q] || m.mode != mode {
            return Err(Error::Shape(format!(
                "mask {:?} ({:?}) does not fit {q} queries in {mode:?} mode",
                m.matrix.shape(),
                m.mode
            )));
        }
    }
    let n = layout.total();
    let mut bias = vec![BLOCKED; n * n];
    let mut mult = vec![1.0; n * n];
    for (g, m) in masks.iter().enumerate() {
        for i in 0..q {
            for j in 0..q {
                let at = (g * q + i) * n + g * q + j;
                match mode {
                    MaskMode::Additive => bias[at] = m.matrix.at(i, j),
                    MaskMode::Multiply => {
                        bias[at] = 0.0;
                        mult[at] = m.matrix.at(i, j);
                    }
                }
            }
        }
    }
    Ok(FullMask {
        bias: Tensor::new(vec![n, n], bias)?,
        multiplier: match mode {
            MaskMode::Multiply => Some(Tensor::new(vec![n, n], mult)?),
            MaskMode::Additive => None,
        },
    })
}
