//! Query selection and the post-norm decoder with iterative box refinement.

use densup_tensor::{inverse_sigmoid, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::encoder::Features;
use super::layers::{Attention, Linear, MaskVars, Mlp, ParamStore};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
/// Logit bias giving an initial foreground probability of 0.01.
pub const PRIOR_BIAS: f64 = -4.59511985013459;
const REF_EPS: f64 = 1e-5;

/// Scores every encoder token and proposes a box for it.
#[derive(Debug, Clone)]
pub struct Selector {
    proj: Linear,
    score: Linear,
    boxes: Mlp,
}

#[derive(Debug, Clone)]
pub struct TokenPredictions {
    /// Layer-normed projected token features, `T x d`.
    pub content: Var,
    pub logits: Var,
    /// Center-size boxes after the sigmoid, `T x 4`.
    pub boxes: Var,
    /// Token indices by descending max class logit (ties: lower index).
    pub order: Vec<usize>,
}

impl Selector {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, classes: usize) -> Self {
        let proj = Linear::new(store, rng, "sel.proj", d, d);
        let score = Linear::with_bias(store, rng, "sel.score", d, classes, PRIOR_BIAS);
        let boxes = Mlp::new(store, rng, "sel.box", [d, d, 4], true);
        Self { proj, score, boxes }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], f: &Features) -> Result<TokenPredictions> {
        let x = self.proj.forward(tape, p, f.memory)?;
        let content = tape.layer_norm(x, LN_EPS)?;
        let logits = self.score.forward(tape, p, content)?;
        let delta = self.boxes.forward(tape, p, content)?;
        let anchors: Vec<f64> = f
            .centers
            .iter()
            .zip(&f.level_of)
            .flat_map(|(c, &l)| {
                let s = 0.05 * (1 << l) as f64;
                [c[0], c[1], s, s].map(|v| inverse_sigmoid(v, REF_EPS))
            })
            .collect();
        let anchors = tape.constant(Tensor::new(vec![f.n_tokens(), 4], anchors)?)?;
        let b = tape.add(delta, anchors)?;
        let boxes = tape.sigmoid(b)?;

        let lv = tape.value(logits)?;
        let best: Vec<f64> = (0..lv.rows())
            .map(|i| lv.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut order: Vec<usize> = (0..best.len()).collect();
        order.sort_by(|&a, &b| best[b].total_cmp(&best[a]).then(a.cmp(&b)));
        Ok(TokenPredictions {
            content,
            logits,
            boxes,
            order,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    self_attn: Attention,
    cross_attn: Attention,
    ff1: Linear,
    ff2: Linear,
    cls: Linear,
    bbox: Mlp,
}

/// One decoder layer's predictions for every query row.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    pub logits: Var,
    /// Center-size boxes in `[0, 1]`.
    pub boxes: Var,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    layers: Vec<DecoderLayer>,
    query_pos: Mlp,
}

/// Decoder sizes.
#[derive(Debug, Clone, Copy)]
pub struct DecoderDims {
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    pub layers: usize,
    pub classes: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, dims: DecoderDims) -> Result<Self> {
        if dims.layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        let d = dims.d;
        let query_pos = Mlp::new(store, rng, "dec.query_pos", [4, 2 * d, d], false);
        let layers = (0..dims.layers)
            .map(|l| {
                let name = |s: &str| format!("dec.{l}.{s}");
                DecoderLayer {
                    self_attn: Attention::new(store, rng, &name("self"), d, dims.heads),
                    cross_attn: Attention::new(store, rng, &name("cross"), d, dims.heads),
                    ff1: Linear::new(store, rng, &name("ff1"), d, dims.ffn),
                    ff2: Linear::new(store, rng, &name("ff2"), dims.ffn, d),
                    cls: Linear::with_bias(store, rng, &name("cls"), d, dims.classes, PRIOR_BIAS),
                    bbox: Mlp::new(store, rng, &name("box"), [d, d, 4], true),
                }
            })
            .collect();
        Ok(Self { layers, query_pos })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Runs every layer. `refs` are the initial center-size reference boxes;
    /// each layer predicts a delta in inverse-sigmoid space and the refined
    /// (detached) boxes feed the next layer.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        content: Var,
        refs: Tensor,
        memory: Var,
        memory_key: Var,
        mask: Option<MaskVars>,
    ) -> Result<Vec<LayerOutput>> {
        let mut tgt = content;
        let mut refs = refs;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let ref_var = tape.constant(refs.clone())?;
            let qpos = self.query_pos.forward(tape, p, ref_var)?;

            let qk = tape.add(tgt, qpos)?;
            let sa = layer.self_attn.forward(tape, p, qk, qk, tgt, mask)?;
            let x = tape.add(tgt, sa)?;
            tgt = tape.layer_norm(x, LN_EPS)?;

            let q = tape.add(tgt, qpos)?;
            let ca = layer.cross_attn.forward(tape, p, q, memory_key, memory, None)?;
            let x = tape.add(tgt, ca)?;
            tgt = tape.layer_norm(x, LN_EPS)?;

            let h = layer.ff1.forward(tape, p, tgt)?;
            let h = tape.relu(h)?;
            let h = layer.ff2.forward(tape, p, h)?;
            let x = tape.add(tgt, h)?;
            tgt = tape.layer_norm(x, LN_EPS)?;

            let logits = layer.cls.forward(tape, p, tgt)?;
            let delta = layer.bbox.forward(tape, p, tgt)?;
            let base = tape.constant(refs.map(|v| inverse_sigmoid(v, REF_EPS)))?;
            let b = tape.add(delta, base)?;
            let boxes = tape.sigmoid(b)?;
            refs = tape.value(boxes)?.clone();
            out.push(LayerOutput { logits, boxes });
        }
        Ok(out)
    }
}
