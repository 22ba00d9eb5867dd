//! The toy detection transformer: patch encoder, query selection, decoder
//! over concatenated query groups, and the training-only dense head.

mod aux_head;
mod decoder;
mod encoder;
mod layers;

pub use aux_head::{AuxHead, AuxOutput};
pub use decoder::{Decoder, DecoderDims, LayerOutput, Selector, TokenPredictions, LN_EPS, PRIOR_BIAS};
pub use encoder::{position_embedding, Encoder, Features, LevelInfo, PATCH, STRIDES};
pub use layers::{Attention, Linear, MaskVars, Mlp, ParamStore};

use densup_tensor::{sigmoid, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::geometry::center_to_corner;
use crate::masks::{compose_full_mask, generate_masks, GroupLayout, MaskMode, PerturbationMask};

/// Tape scope of the dense auxiliary head.
pub const AUX_SCOPE: &str = "aux";
/// Prefix of every auxiliary-head parameter name.
pub const AUX_PREFIX: &str = "aux.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuerySelection {
    /// Every group starts from the same top-k tokens.
    #[default]
    Shared,
    /// Groups take interleaved ranks of the top `N k` tokens.
    Disjoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_layers: usize,
    pub n_classes: usize,
    pub queries_per_group: usize,
    /// Distribution bins per side minus one (`R`).
    pub dfl_bins: usize,
    /// Anchor box side in strides used by ATSS.
    pub anchor_scale: f64,
    pub query_selection: QuerySelection,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            ffn_dim: 128,
            n_layers: 2,
            n_classes: 3,
            queries_per_group: 60,
            dfl_bins: 8,
            anchor_scale: 5.0,
            query_selection: QuerySelection::Shared,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_layers == 0 || self.n_classes == 0 || self.queries_per_group == 0 || self.ffn_dim == 0 {
            return bad("n_layers, n_classes, queries_per_group and ffn_dim must be >= 1".into());
        }
        if self.dfl_bins == 0 {
            return bad("dfl_bins must be >= 1".into());
        }
        if !(self.anchor_scale > 0.0) {
            return bad("anchor_scale must be positive".into());
        }
        Ok(())
    }
}

/// Which training-time branches a forward pass runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    /// One-to-one query groups `N`.
    pub n_groups: usize,
    pub keep_probability: f64,
    pub mask_mode: MaskMode,
    /// Append the one-to-many query group.
    pub o2m: bool,
    /// Run the dense auxiliary head.
    pub aux: bool,
    pub mask_seed: u64,
    pub step: u64,
}

impl ForwardOptions {
    /// The inference path: one group, no masks, no auxiliary branches.
    pub fn inference() -> Self {
        Self {
            n_groups: 1,
            keep_probability: 1.0,
            mask_mode: MaskMode::Additive,
            o2m: false,
            aux: false,
            mask_seed: 0,
            step: 0,
        }
    }
}

/// Everything a training or inference forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub features: Features,
    pub tokens: TokenPredictions,
    /// Token rows chosen for each query group, o2m group last.
    pub group_tokens: Vec<Vec<usize>>,
    /// Union of selected tokens (selection-loss rows).
    pub selected: Vec<usize>,
    /// Per decoder layer, rows of all groups concatenated.
    pub layers: Vec<LayerOutput>,
    pub layout: GroupLayout,
    pub n_o2o_groups: usize,
    pub has_o2m: bool,
    pub masks: Vec<PerturbationMask>,
    pub aux: Option<AuxOutput>,
}

impl ForwardOutput {
    /// Rows `[start, start + q)` of group `g`.
    pub fn group_rows(&self, g: usize) -> (usize, usize) {
        let q = self.layout.queries_per_group;
        (g * q, q)
    }

    pub fn o2m_group(&self) -> Option<usize> {
        self.has_o2m.then_some(self.n_o2o_groups)
    }
}

/// Encoder, query selection and decoder: the part kept at inference.
#[derive(Debug, Clone)]
struct Core {
    encoder: Encoder,
    selector: Selector,
    decoder: Decoder,
}

impl Core {
    fn forward(
        &self,
        cfg: &ModelConfig,
        tape: &mut Tape,
        p: &[Var],
        image: &Image,
        opts: &ForwardOptions,
        aux: Option<&AuxHead>,
    ) -> Result<ForwardOutput> {
        if opts.n_groups == 0 {
            return Err(Error::Invalid("at least one query group is required".into()));
        }
        let features = self.encoder.forward(tape, p, image)?;
        let tokens = self.selector.forward(tape, p, &features)?;
        let q = cfg.queries_per_group;
        let n = opts.n_groups;
        let t = features.n_tokens();
        let mut group_tokens: Vec<Vec<usize>> = match cfg.query_selection {
            QuerySelection::Shared => {
                if q > t {
                    return Err(Error::Invalid(format!("{q} queries from {t} tokens")));
                }
                vec![tokens.order[..q].to_vec(); n]
            }
            QuerySelection::Disjoint => {
                if n * q > t {
                    return Err(Error::Invalid(format!("{n} x {q} disjoint queries from {t} tokens")));
                }
                (0..n)
                    .map(|g| (0..q).map(|r| tokens.order[g + n * r]).collect())
                    .collect()
            }
        };
        if opts.o2m {
            group_tokens.push(tokens.order[..q].to_vec());
        }
        let mut selected: Vec<usize> = group_tokens.iter().flatten().copied().collect();
        selected.sort_unstable();
        selected.dedup();

        let layout = GroupLayout::new(group_tokens.len(), q)?;
        let rows: Vec<usize> = group_tokens.iter().flatten().copied().collect();
        let content = tape.gather_rows(tokens.content, &rows)?;
        let content = tape.detach(content)?;
        let refs = tape.value(tokens.boxes)?.clone();
        let refs = {
            let cols = refs.cols();
            let data = rows
                .iter()
                .flat_map(|&r| refs.data()[r * cols..(r + 1) * cols].to_vec())
                .collect();
            densup_tensor::Tensor::new(vec![rows.len(), cols], data)?
        };

        let mut masks = generate_masks(
            GroupLayout::new(n, q)?,
            opts.keep_probability,
            opts.mask_mode,
            opts.mask_seed,
            opts.step,
        )?;
        if opts.o2m {
            masks.push(PerturbationMask::identity(n, q, opts.mask_mode));
        }
        let identity = masks.len() == 1 && opts.keep_probability >= 1.0;
        let mask = if identity {
            None
        } else {
            Some(MaskVars::new(tape, &compose_full_mask(&masks, layout)?)?)
        };

        let pos = tape.constant(position_embedding(&features.centers, cfg.d_model)?)?;
        let memory_key = tape.add(features.memory, pos)?;
        let layers = self
            .decoder
            .forward(tape, p, content, refs, features.memory, memory_key, mask)?;

        let aux = match (opts.aux, aux) {
            (true, Some(head)) => {
                let prev = tape.set_scope(AUX_SCOPE);
                let out = head.forward(tape, p, &features);
                tape.set_scope(prev);
                Some(out?)
            }
            (true, None) => return Err(Error::Invalid("auxiliary head was stripped".into())),
            (false, _) => None,
        };
        Ok(ForwardOutput {
            features,
            tokens,
            group_tokens,
            selected,
            layers,
            layout,
            n_o2o_groups: n,
            has_o2m: opts.o2m,
            masks,
            aux,
        })
    }
}

/// The training model: every branch, all parameters.
#[derive(Debug, Clone)]
pub struct Detector {
    cfg: ModelConfig,
    store: ParamStore,
    core: Core,
    aux: AuxHead,
    /// Number of leading parameters kept at inference.
    core_params: usize,
}

impl Detector {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &mut rng, cfg.d_model);
        let selector = Selector::new(&mut store, &mut rng, cfg.d_model, cfg.n_classes);
        let decoder = Decoder::new(
            &mut store,
            &mut rng,
            DecoderDims {
                d: cfg.d_model,
                heads: cfg.n_heads,
                ffn: cfg.ffn_dim,
                layers: cfg.n_layers,
                classes: cfg.n_classes,
            },
        )?;
        let core_params = store.len();
        let aux = AuxHead::new(&mut store, &mut rng, cfg.d_model, cfg.n_classes, cfg.dfl_bins + 1);
        Ok(Self {
            cfg,
            store,
            core: Core {
                encoder,
                selector,
                decoder,
            },
            aux,
            core_params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Names of the auxiliary-head parameters.
    pub fn aux_param_names(&self) -> &[String] {
        &self.store.names()[self.core_params..]
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], image: &Image, opts: &ForwardOptions) -> Result<ForwardOutput> {
        self.core.forward(&self.cfg, tape, p, image, opts, Some(&self.aux))
    }

    /// Drops the auxiliary head, the extra query groups and the one-to-many
    /// group, leaving the single-group unmasked inference path.
    pub fn strip_training_branches(&self) -> InferenceDetector {
        let mut store = self.store.clone();
        store.truncate(self.core_params);
        InferenceDetector {
            cfg: self.cfg,
            store,
            core: self.core.clone(),
        }
    }
}

/// One scored detection in normalized corner coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: [f64; 4],
    pub score: f64,
    pub label: usize,
}

/// Top `max_det` (query, class) pairs of group 0 in the last decoder layer.
pub fn detections(tape: &Tape, out: &ForwardOutput, max_det: usize) -> Result<Vec<Detection>> {
    let last = out.layers.last().expect("at least one layer");
    let (start, q) = out.group_rows(0);
    let logits = tape.value(last.logits)?;
    let boxes = tape.value(last.boxes)?;
    let c = logits.cols();
    let mut cands: Vec<(f64, usize)> = (start * c..(start + q) * c)
        .map(|k| (sigmoid(logits.data()[k]), k))
        .collect();
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(cands
        .into_iter()
        .take(max_det)
        .map(|(score, k)| {
            let row = boxes.row(k / c);
            Detection {
                bbox: center_to_corner([row[0], row[1], row[2], row[3]]),
                score,
                label: k % c,
            }
        })
        .collect())
}

/// The stripped model used for evaluation and export.
#[derive(Debug, Clone)]
pub struct InferenceDetector {
    cfg: ModelConfig,
    store: ParamStore,
    core: Core,
}

impl InferenceDetector {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Replaces the parameters; names and shapes must match.
    pub fn set_params(&mut self, store: ParamStore) {
        assert_eq!(store.names(), self.store.names(), "parameter layout");
        self.store = store;
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], image: &Image) -> Result<ForwardOutput> {
        self.core
            .forward(&self.cfg, tape, p, image, &ForwardOptions::inference(), None)
    }

    pub fn predict(&self, image: &Image, max_det: usize) -> Result<Vec<Detection>> {
        let mut tape = Tape::new();
        let p = self.bind_constants(&mut tape)?;
        let out = self.forward(&mut tape, &p, image)?;
        detections(&tape, &out, max_det)
    }

    /// Parameters as constants (no gradient bookkeeping).
    pub fn bind_constants(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.store
            .tensors()
            .iter()
            .map(|t| Ok(tape.constant(t.clone())?))
            .collect()
    }
}
