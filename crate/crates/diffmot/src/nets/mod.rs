//! The learned components: a latent box encoder (3-layer MLP), a
//! patch-attention feature extractor, the track-conditioned transformer
//! decoder, and the two prediction heads.
//!
//! Every forward path is expressed as a computation graph so the trainer
//! gets exact gradients and the finite-difference suite can audit them.
//! Parameters are named arrays; the names double as checkpoint keys and
//! learning-rate group selectors.

mod build;
mod checkpoint;

pub use build::{
    append_heads, append_itrn, append_lfen, append_ref_logits, append_sfen, patchify,
    sinusoidal_positions,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::assign::{Prediction, PredictionSet};
use crate::geom::BBox;
use crate::ndgrad::{Array, Bindings, GradError, GraphBuilder, Rng};
use crate::synthworld::Frame;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected} for {what}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Model hyperparameters. The reference configuration uses a much larger
/// latent dimension; the desk defaults keep CPU training tractable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub n_ns: usize,
    pub patch_size: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attention_heads: usize,
    pub ffn_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 32,
            n_ns: 64,
            patch_size: 8,
            image_h: 64,
            image_w: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            attention_heads: 4,
            ffn_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.patch_size == 0
            || !self.image_h.is_multiple_of(self.patch_size)
            || !self.image_w.is_multiple_of(self.patch_size)
        {
            return Err(NetError::Config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_h, self.image_w, self.patch_size
            )));
        }
        if self.attention_heads == 0 || !self.latent_dim.is_multiple_of(self.attention_heads) {
            return Err(NetError::Config(format!(
                "latent dim {} not divisible by {} heads",
                self.latent_dim, self.attention_heads
            )));
        }
        if self.latent_dim == 0 || self.n_ns == 0 || self.ffn_hidden == 0 {
            return Err(NetError::Config("zero-sized dimension".into()));
        }
        Ok(())
    }

    /// Number of feature tokens the patch grid produces.
    pub fn tokens(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Origin of an embedding row or prediction: a noised latent proposal or a
/// carried track query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowTag {
    Noised,
    Track,
}

/// Ordered set of D-dimensional latent vectors with per-row provenance.
///
/// `anchors` is a decode-time side channel: the decoder attaches each
/// row's reference-point logits (derived from its own input content) so
/// the heads regress box centers relative to the same anchor the
/// cross-attention used.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub data: Array,
    pub tags: Vec<RowTag>,
    pub anchors: Option<Array>,
}

impl EmbeddingSet {
    pub fn new(data: Array, tags: Vec<RowTag>) -> Self {
        assert_eq!(data.rows(), tags.len(), "one tag per row");
        EmbeddingSet {
            data,
            tags,
            anchors: None,
        }
    }

    pub fn empty(dim: usize) -> Self {
        EmbeddingSet {
            data: Array::zeros(vec![0, dim]),
            tags: Vec::new(),
            anchors: None,
        }
    }

    pub fn count(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    /// Stack two sets vertically, keeping tags aligned with rows.
    pub fn vstack(&self, other: &EmbeddingSet) -> EmbeddingSet {
        assert_eq!(self.dim(), other.dim());
        let mut data = Vec::with_capacity((self.count() + other.count()) * self.dim());
        data.extend_from_slice(self.data.data());
        data.extend_from_slice(other.data.data());
        let mut tags = self.tags.clone();
        tags.extend_from_slice(&other.tags);
        EmbeddingSet {
            data: Array::matrix(self.count() + other.count(), self.dim(), data),
            tags,
            anchors: None,
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, tag: RowTag) -> Self {
        let count = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        EmbeddingSet {
            data: Array::matrix(count, dim, data),
            tags: vec![tag; count],
            anchors: None,
        }
    }
}

/// Image feature tokens produced by the extractor: one row per patch.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub tokens: Array,
}

/// Learning-rate group for a parameter, mirroring the backbone/transformer
/// split of the training recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Transformer,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Xavier,
    Zero,
    One,
    SinusoidalPos,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    init: Init,
}

/// Enumerate every parameter of the model in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.latent_dim;
    let f = cfg.ffn_hidden;
    let mut specs: Vec<ParamSpec> = Vec::new();
    fn entry(name: String, shape: Vec<usize>, group: ParamGroup, init: Init) -> ParamSpec {
        ParamSpec {
            name,
            shape,
            group,
            init,
        }
    }
    let push = |specs: &mut Vec<ParamSpec>, name: &str, shape: Vec<usize>, group, init| {
        specs.push(entry(name.to_string(), shape, group, init));
    };

    // latent box encoder: three fully connected layers, hidden width D
    push(&mut specs, "lfen.w1", vec![4, d], ParamGroup::Transformer, Init::Xavier);
    push(&mut specs, "lfen.b1", vec![1, d], ParamGroup::Transformer, Init::Zero);
    push(&mut specs, "lfen.w2", vec![d, d], ParamGroup::Transformer, Init::Xavier);
    push(&mut specs, "lfen.b2", vec![1, d], ParamGroup::Transformer, Init::Zero);
    push(&mut specs, "lfen.w3", vec![d, d], ParamGroup::Transformer, Init::Xavier);
    push(&mut specs, "lfen.b3", vec![1, d], ParamGroup::Transformer, Init::Zero);

    // patch projection and positional table stand in for the CNN backbone
    push(
        &mut specs,
        "patch.w",
        vec![cfg.patch_dim(), d],
        ParamGroup::Backbone,
        Init::Xavier,
    );
    push(&mut specs, "patch.b", vec![1, d], ParamGroup::Backbone, Init::Zero);
    push(
        &mut specs,
        "pos.enc",
        vec![cfg.tokens(), d],
        ParamGroup::Backbone,
        Init::SinusoidalPos,
    );

    let attn = |specs: &mut Vec<ParamSpec>, prefix: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push(ParamSpec {
                name: format!("{prefix}.{w}"),
                shape: vec![d, d],
                group: ParamGroup::Transformer,
                init: Init::Xavier,
            });
        }
        for b in ["bq", "bk", "bv", "bo"] {
            specs.push(ParamSpec {
                name: format!("{prefix}.{b}"),
                shape: vec![1, d],
                group: ParamGroup::Transformer,
                init: Init::Zero,
            });
        }
    };
    let norm = |specs: &mut Vec<ParamSpec>, prefix: &str| {
        specs.push(ParamSpec {
            name: format!("{prefix}.g"),
            shape: vec![1, d],
            group: ParamGroup::Transformer,
            init: Init::One,
        });
        specs.push(ParamSpec {
            name: format!("{prefix}.b"),
            shape: vec![1, d],
            group: ParamGroup::Transformer,
            init: Init::Zero,
        });
    };
    let ffn = |specs: &mut Vec<ParamSpec>, prefix: &str| {
        for (name, shape, init) in [
            ("w1", vec![d, f], Init::Xavier),
            ("b1", vec![1, f], Init::Zero),
            ("w2", vec![f, d], Init::Xavier),
            ("b2", vec![1, d], Init::Zero),
        ] {
            specs.push(ParamSpec {
                name: format!("{prefix}.{name}"),
                shape,
                group: ParamGroup::Transformer,
                init,
            });
        }
    };

    for i in 0..cfg.encoder_layers {
        attn(&mut specs, &format!("enc{i}.attn"));
        norm(&mut specs, &format!("enc{i}.ln1"));
        ffn(&mut specs, &format!("enc{i}.ffn"));
        norm(&mut specs, &format!("enc{i}.ln2"));
    }
    // shared reference-point projection for the decoder anchor bias
    push(&mut specs, "dec.ref.w", vec![d, 2], ParamGroup::Transformer, Init::Xavier);
    push(&mut specs, "dec.ref.b", vec![1, 2], ParamGroup::Transformer, Init::Zero);
    for i in 0..cfg.decoder_layers {
        attn(&mut specs, &format!("dec{i}.self"));
        norm(&mut specs, &format!("dec{i}.ln1"));
        attn(&mut specs, &format!("dec{i}.cross"));
        norm(&mut specs, &format!("dec{i}.ln2"));
        ffn(&mut specs, &format!("dec{i}.ffn"));
        norm(&mut specs, &format!("dec{i}.ln3"));
    }

    push(&mut specs, "head.cls.w1", vec![d, d], ParamGroup::Transformer, Init::Xavier);
    push(&mut specs, "head.cls.b1", vec![1, d], ParamGroup::Transformer, Init::Zero);
    push(&mut specs, "head.cls.w2", vec![d, 2], ParamGroup::Transformer, Init::Xavier);
    push(&mut specs, "head.cls.b2", vec![1, 2], ParamGroup::Transformer, Init::Zero);
    push(&mut specs, "head.box.w1", vec![d, d], ParamGroup::Transformer, Init::Xavier);
    push(&mut specs, "head.box.b1", vec![1, d], ParamGroup::Transformer, Init::Zero);
    push(&mut specs, "head.box.w2", vec![d, d], ParamGroup::Transformer, Init::Xavier);
    push(&mut specs, "head.box.b2", vec![1, d], ParamGroup::Transformer, Init::Zero);
    push(&mut specs, "head.box.w3", vec![d, 4], ParamGroup::Transformer, Init::Xavier);
    push(&mut specs, "head.box.b3", vec![1, 4], ParamGroup::Transformer, Init::Zero);

    specs
}

/// Learning-rate group by parameter name. Patch projection and positional
/// table follow the backbone rate; everything else is transformer-side.
pub fn group_of(name: &str) -> ParamGroup {
    if name.starts_with("patch.") || name.starts_with("pos.") {
        ParamGroup::Backbone
    } else {
        ParamGroup::Transformer
    }
}

/// All model parameters as named arrays, tied to their configuration.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    values: BTreeMap<String, Array>,
}

impl ModelParams {
    /// Xavier-uniform weights, zero biases, unit layer-norm gains,
    /// sinusoidal positional table. Consumes the rng deterministically in
    /// spec order.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self, NetError> {
        config.validate()?;
        let mut values = BTreeMap::new();
        for spec in param_specs(&config) {
            let n: usize = spec.shape.iter().product();
            let arr = match spec.init {
                Init::Zero => Array::zeros(spec.shape.clone()),
                Init::One => Array::from_vec(spec.shape.clone(), vec![1.0; n]),
                Init::Xavier => {
                    let (fan_in, fan_out) = (spec.shape[0], spec.shape[1]);
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Array::fill_uniform(spec.shape.clone(), -a, a, rng)
                }
                Init::SinusoidalPos => sinusoidal_positions(&config),
            };
            values.insert(spec.name, arr);
        }
        Ok(ModelParams { config, values })
    }

    /// Rebuild from loaded values, checking names and shapes against the
    /// configuration's parameter table.
    pub fn from_values(
        config: ModelConfig,
        values: BTreeMap<String, Array>,
    ) -> Result<Self, NetError> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != values.len() {
            return Err(NetError::Checkpoint(format!(
                "expected {} parameters, found {}",
                specs.len(),
                values.len()
            )));
        }
        for spec in &specs {
            let arr = values.get(&spec.name).ok_or_else(|| {
                NetError::Checkpoint(format!("missing parameter '{}'", spec.name))
            })?;
            if arr.shape() != spec.shape.as_slice() {
                return Err(NetError::Checkpoint(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    spec.name,
                    arr.shape(),
                    spec.shape
                )));
            }
        }
        Ok(ModelParams { config, values })
    }

    pub fn get(&self, name: &str) -> &Array {
        &self.values[name]
    }

    pub fn values(&self) -> &BTreeMap<String, Array> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut BTreeMap<String, Array> {
        &mut self.values
    }

    pub fn bindings(&self) -> Bindings<'_> {
        let mut b = Bindings::new();
        b.bind_all(self.values.iter());
        b
    }
}

/// Encode boxes into D-dimensional latent embeddings (tagged as noised
/// proposals, the training-side use).
pub fn lfen_encode(boxes: &[BBox], params: &ModelParams) -> Result<EmbeddingSet, NetError> {
    assert!(!boxes.is_empty(), "lfen_encode requires at least one box");
    let n = boxes.len();
    let mut gb = GraphBuilder::new();
    let input = gb.input("boxes", &[n, 4]);
    let out = append_lfen(&mut gb, &params.config, input)?;
    gb.output("z", out);
    let graph = gb.finish();

    let data: Vec<f64> = boxes
        .iter()
        .flat_map(|b| [b.cx, b.cy, b.w, b.h])
        .collect();
    let arr = Array::matrix(n, 4, data);
    let mut bindings = params.bindings();
    bindings.bind("boxes", &arr);
    let eval = graph.forward(&bindings)?;
    Ok(EmbeddingSet::new(
        eval.output("z")?.clone(),
        vec![RowTag::Noised; n],
    ))
}

/// Extract feature tokens from a frame: patch projection, positional table,
/// then the self-attention encoder stack.
pub fn sfen_extract(frame: &Frame, params: &ModelParams) -> Result<FeatureMap, NetError> {
    let cfg = &params.config;
    let patches = patchify(frame, cfg)?;
    let mut gb = GraphBuilder::new();
    let input = gb.input("patches", patches.shape());
    let out = append_sfen(&mut gb, cfg, input)?;
    gb.output("h", out);
    let graph = gb.finish();

    let mut bindings = params.bindings();
    bindings.bind("patches", &patches);
    let eval = graph.forward(&bindings)?;
    Ok(FeatureMap {
        tokens: eval.output("h")?.clone(),
    })
}

/// One reverse-refinement pass: decode the concatenation of noised
/// proposals and track queries (noised rows first) against the feature
/// tokens. Tags are preserved positionally.
pub fn itrn_decode(
    noised: &EmbeddingSet,
    tracks: &EmbeddingSet,
    features: &FeatureMap,
    params: &ModelParams,
) -> Result<EmbeddingSet, NetError> {
    let cfg = &params.config;
    let d = cfg.latent_dim;
    if noised.dim() != d {
        return Err(NetError::DimMismatch {
            what: "noised embedding dim",
            expected: d,
            got: noised.dim(),
        });
    }
    if tracks.count() > 0 && tracks.dim() != d {
        return Err(NetError::DimMismatch {
            what: "track embedding dim",
            expected: d,
            got: tracks.dim(),
        });
    }
    if features.tokens.cols() != d {
        return Err(NetError::DimMismatch {
            what: "feature token dim",
            expected: d,
            got: features.tokens.cols(),
        });
    }

    let queries = if tracks.count() > 0 {
        noised.vstack(tracks)
    } else {
        noised.clone()
    };
    let n_q = queries.count();

    let mut gb = GraphBuilder::new();
    let q = gb.input("queries", &[n_q, d]);
    let mem = gb.input("memory", features.tokens.shape());
    let (out, refs) = append_itrn(&mut gb, cfg, q, mem)?;
    gb.output("z", out);
    gb.output("refs", refs);
    let graph = gb.finish();

    let mut bindings = params.bindings();
    bindings.bind("queries", &queries.data);
    bindings.bind("memory", &features.tokens);
    let eval = graph.forward(&bindings)?;
    let mut decoded = EmbeddingSet::new(eval.output("z")?.clone(), queries.tags);
    decoded.anchors = Some(eval.output("refs")?.clone());
    Ok(decoded)
}

/// Run both heads on an embedding set: 2-way class softmax and a sigmoid
/// box from a 3-layer MLP.
pub fn ffn_heads(embeddings: &EmbeddingSet, params: &ModelParams) -> Result<PredictionSet, NetError> {
    let cfg = &params.config;
    let n = embeddings.count();
    let mut gb = GraphBuilder::new();
    let x = gb.input("embeddings", &[n, cfg.latent_dim]);
    let carried_refs = embeddings
        .anchors
        .as_ref()
        .map(|a| gb.input("anchors", a.shape()));
    let (probs, boxes) = append_heads(&mut gb, cfg, x, carried_refs)?;
    gb.output("probs", probs);
    gb.output("boxes", boxes);
    let graph = gb.finish();

    let mut bindings = params.bindings();
    bindings.bind("embeddings", &embeddings.data);
    if let Some(anchors) = &embeddings.anchors {
        bindings.bind("anchors", anchors);
    }
    let eval = graph.forward(&bindings)?;
    let probs = eval.output("probs")?;
    let boxes = eval.output("boxes")?;

    let entries = (0..n)
        .map(|i| Prediction {
            probs: [probs.at(i, 0), probs.at(i, 1)],
            bbox: BBox::new(boxes.at(i, 0), boxes.at(i, 1), boxes.at(i, 2), boxes.at(i, 3)),
            source: embeddings.tags[i],
            track_id: None,
        })
        .collect();
    Ok(PredictionSet { entries })
}
