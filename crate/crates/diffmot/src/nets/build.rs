//! Graph builders for the learned components.
//!
//! Parameters enter the graph as named inputs, so the same builder serves
//! inference (bind and run forward) and training (backward returns
//! gradients keyed by parameter name). Names are deduplicated by the
//! builder, which is what ties the two decode passes of a training step to
//! one shared parameter set.

use super::{ModelConfig, NetError};
use crate::ndgrad::{Array, GraphBuilder, NodeId};
use crate::synthworld::Frame;

fn param(gb: &mut GraphBuilder, name: &str, shape: &[usize]) -> NodeId {
    gb.input(name, shape)
}

fn linear(
    gb: &mut GraphBuilder,
    x: NodeId,
    w_name: &str,
    b_name: &str,
    in_dim: usize,
    out_dim: usize,
) -> Result<NodeId, NetError> {
    let w = param(gb, w_name, &[in_dim, out_dim]);
    let b = param(gb, b_name, &[1, out_dim]);
    let y = gb.matmul(x, w)?;
    Ok(gb.add_row(y, b)?)
}

fn layer_norm_affine(
    gb: &mut GraphBuilder,
    x: NodeId,
    prefix: &str,
    d: usize,
) -> Result<NodeId, NetError> {
    let g = param(gb, &format!("{prefix}.g"), &[1, d]);
    let b = param(gb, &format!("{prefix}.b"), &[1, d]);
    let normed = gb.layer_norm(x);
    let scaled = gb.mul_row(normed, g)?;
    Ok(gb.add_row(scaled, b)?)
}

/// Multi-head attention: queries from `q_src`, keys and values from
/// `kv_src`. Positional codes, when given, are added to the query/key
/// streams before projection (per attention layer, values stay
/// content-only). Heads are column slices of the shared projections.
#[allow(clippy::too_many_arguments)]
fn attention(
    gb: &mut GraphBuilder,
    cfg: &ModelConfig,
    prefix: &str,
    q_src: NodeId,
    q_pos: Option<NodeId>,
    kv_src: NodeId,
    kv_pos: Option<NodeId>,
    score_bias: Option<NodeId>,
) -> Result<NodeId, NetError> {
    let d = cfg.latent_dim;
    let heads = cfg.attention_heads;
    let dk = d / heads;

    let q_in = match q_pos {
        Some(p) => gb.add(q_src, p)?,
        None => q_src,
    };
    let k_in = match kv_pos {
        Some(p) => gb.add(kv_src, p)?,
        None => kv_src,
    };
    let q = linear(gb, q_in, &format!("{prefix}.wq"), &format!("{prefix}.bq"), d, d)?;
    let k = linear(gb, k_in, &format!("{prefix}.wk"), &format!("{prefix}.bk"), d, d)?;
    let v = linear(gb, kv_src, &format!("{prefix}.wv"), &format!("{prefix}.bv"), d, d)?;

    let mut head_outputs = Vec::with_capacity(heads);
    let scale = 1.0 / (dk as f64).sqrt();
    for h in 0..heads {
        let qh = gb.slice_cols(q, h * dk, dk)?;
        let kh = gb.slice_cols(k, h * dk, dk)?;
        let vh = gb.slice_cols(v, h * dk, dk)?;
        let kt = gb.transpose(kh);
        let scores = gb.matmul(qh, kt)?;
        let mut scaled = gb.scale(scores, scale);
        if let Some(bias) = score_bias {
            scaled = gb.add(scaled, bias)?;
        }
        let weights = gb.softmax(scaled);
        head_outputs.push(gb.matmul(weights, vh)?);
    }
    let merged = if heads == 1 {
        head_outputs[0]
    } else {
        gb.concat_cols(head_outputs)?
    };
    linear(gb, merged, &format!("{prefix}.wo"), &format!("{prefix}.bo"), d, d)
}

fn feed_forward(
    gb: &mut GraphBuilder,
    cfg: &ModelConfig,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId, NetError> {
    let hidden = linear(
        gb,
        x,
        &format!("{prefix}.w1"),
        &format!("{prefix}.b1"),
        cfg.latent_dim,
        cfg.ffn_hidden,
    )?;
    let act = gb.relu(hidden);
    linear(
        gb,
        act,
        &format!("{prefix}.w2"),
        &format!("{prefix}.b2"),
        cfg.ffn_hidden,
        cfg.latent_dim,
    )
}

fn encoder_layer(
    gb: &mut GraphBuilder,
    cfg: &ModelConfig,
    index: usize,
    x: NodeId,
    pos: NodeId,
) -> Result<NodeId, NetError> {
    let d = cfg.latent_dim;
    let attn = attention(
        gb,
        cfg,
        &format!("enc{index}.attn"),
        x,
        Some(pos),
        x,
        Some(pos),
        None,
    )?;
    let res = gb.add(x, attn)?;
    let x = layer_norm_affine(gb, res, &format!("enc{index}.ln1"), d)?;
    let ff = feed_forward(gb, cfg, &format!("enc{index}.ffn"), x)?;
    let res = gb.add(x, ff)?;
    layer_norm_affine(gb, res, &format!("enc{index}.ln2"), d)
}

fn decoder_layer(
    gb: &mut GraphBuilder,
    cfg: &ModelConfig,
    index: usize,
    x: NodeId,
    memory: NodeId,
    mem_pos: NodeId,
    anchor_bias: NodeId,
) -> Result<NodeId, NetError> {
    let d = cfg.latent_dim;
    let self_attn = attention(gb, cfg, &format!("dec{index}.self"), x, None, x, None, None)?;
    let res = gb.add(x, self_attn)?;
    let x = layer_norm_affine(gb, res, &format!("dec{index}.ln1"), d)?;
    let cross = attention(
        gb,
        cfg,
        &format!("dec{index}.cross"),
        x,
        None,
        memory,
        Some(mem_pos),
        Some(anchor_bias),
    )?;
    let res = gb.add(x, cross)?;
    let x = layer_norm_affine(gb, res, &format!("dec{index}.ln2"), d)?;
    let ff = feed_forward(gb, cfg, &format!("dec{index}.ffn"), x)?;
    let res = gb.add(x, ff)?;
    layer_norm_affine(gb, res, &format!("dec{index}.ln3"), d)
}

/// Reference-point logits: each row derives a spatial anchor
/// `sigmoid(linear(z))` from its own content (shared projection).
pub fn append_ref_logits(
    gb: &mut GraphBuilder,
    cfg: &ModelConfig,
    queries: NodeId,
) -> Result<NodeId, NetError> {
    linear(gb, queries, "dec.ref.w", "dec.ref.b", cfg.latent_dim, 2)
}

/// Reference-point anchor bias: every cross-attention logit is penalized
/// by the squared distance between the row's anchor and the key's patch
/// center. This is the softmax-attention analog of the reference points
/// in the deformable decoder the architecture extends; it gives noise
/// proposals a stable spatial identity without any index positional
/// encoding (the bias is a pure function of row content, so permutation
/// equivariance over queries is preserved).
fn anchor_bias(
    gb: &mut GraphBuilder,
    cfg: &ModelConfig,
    ref_logits: NodeId,
    n: usize,
) -> Result<NodeId, NetError> {
    const ANCHOR_SHARPNESS: f64 = 40.0;
    let m = cfg.tokens();
    let grid_w = cfg.image_w / cfg.patch_size;
    let grid_h = cfg.image_h / cfg.patch_size;

    let anchors = gb.sigmoid(ref_logits);
    let ax = gb.slice_cols(anchors, 0, 1)?;
    let ay = gb.slice_cols(anchors, 1, 1)?;

    let mut px = Vec::with_capacity(m);
    let mut py = Vec::with_capacity(m);
    for row in 0..grid_h {
        for col in 0..grid_w {
            px.push((col as f64 + 0.5) / grid_w as f64);
            py.push((row as f64 + 0.5) / grid_h as f64);
        }
    }
    let ones_row = gb.constant(Array::matrix(1, m, vec![1.0; m]));
    let ones_col = gb.constant(Array::matrix(n, 1, vec![1.0; n]));

    let mut axis_terms = Vec::new();
    for (a, centers) in [(ax, px), (ay, py)] {
        let c2: Vec<f64> = centers.iter().map(|v| v * v).collect();
        let c_node = gb.constant(Array::matrix(m, 1, centers));
        let c2_node = gb.constant(Array::matrix(m, 1, c2));
        let a2 = gb.mul(a, a)?;
        let a2_grid = gb.matmul(a2, ones_row)?;
        let ct = gb.transpose(c_node);
        let cross = gb.matmul(a, ct)?;
        let cross2 = gb.scale(cross, -2.0);
        let c2t = gb.transpose(c2_node);
        let c2_grid = gb.matmul(ones_col, c2t)?;
        let partial = gb.add(a2_grid, cross2)?;
        axis_terms.push(gb.add(partial, c2_grid)?);
    }
    let dist2 = gb.add(axis_terms[0], axis_terms[1])?;
    Ok(gb.scale(dist2, -ANCHOR_SHARPNESS))
}

/// Latent box encoder: three fully connected layers lifting 4-d boxes to
/// the latent dimension, relu between layers.
pub fn append_lfen(
    gb: &mut GraphBuilder,
    cfg: &ModelConfig,
    boxes: NodeId,
) -> Result<NodeId, NetError> {
    let d = cfg.latent_dim;
    let h1 = linear(gb, boxes, "lfen.w1", "lfen.b1", 4, d)?;
    let h1 = gb.relu(h1);
    let h2 = linear(gb, h1, "lfen.w2", "lfen.b2", d, d)?;
    let h2 = gb.relu(h2);
    linear(gb, h2, "lfen.w3", "lfen.b3", d, d)
}

/// Feature extractor: project flattened patches, add the positional table,
/// then run the self-attention encoder stack. The positional table is also
/// injected into every attention layer's query/key streams so position
/// stays directly addressable at depth.
pub fn append_sfen(
    gb: &mut GraphBuilder,
    cfg: &ModelConfig,
    patches: NodeId,
) -> Result<NodeId, NetError> {
    let mut x = linear(gb, patches, "patch.w", "patch.b", cfg.patch_dim(), cfg.latent_dim)?;
    let pos = param(gb, "pos.enc", &[cfg.tokens(), cfg.latent_dim]);
    x = gb.add(x, pos)?;
    for i in 0..cfg.encoder_layers {
        x = encoder_layer(gb, cfg, i, x, pos)?;
    }
    Ok(x)
}

/// Decoder stack: query self-attention, cross-attention to the feature
/// tokens, feed-forward, each with residual and layer norm. Queries carry
/// no positional encoding (the stack is permutation-equivariant over
/// rows); the memory keys carry the positional table in every
/// cross-attention.
pub fn append_itrn(
    gb: &mut GraphBuilder,
    cfg: &ModelConfig,
    queries: NodeId,
    memory: NodeId,
) -> Result<(NodeId, NodeId), NetError> {
    let mem_pos = param(gb, "pos.enc", &[cfg.tokens(), cfg.latent_dim]);
    let n = gb.node_shape(queries)[0];
    let ref_logits = append_ref_logits(gb, cfg, queries)?;
    let bias = anchor_bias(gb, cfg, ref_logits, n)?;
    let mut x = queries;
    for i in 0..cfg.decoder_layers {
        x = decoder_layer(gb, cfg, i, x, memory, mem_pos, bias)?;
    }
    Ok((x, ref_logits))
}

/// Prediction heads: per row a 2-way class softmax from a small MLP and a
/// center-form box through a 3-layer MLP with sigmoid on all four outputs.
/// The box center is regressed relative to the row's reference point
/// (shared `dec.ref` projection), mirroring the deformable decoder the
/// architecture extends: the MLP predicts a pre-sigmoid delta on (cx, cy).
pub fn append_heads(
    gb: &mut GraphBuilder,
    cfg: &ModelConfig,
    x: NodeId,
    ref_logits: Option<NodeId>,
) -> Result<(NodeId, NodeId), NetError> {
    let d = cfg.latent_dim;
    let n = gb.node_shape(x)[0];
    let c1 = linear(gb, x, "head.cls.w1", "head.cls.b1", d, d)?;
    let c1 = gb.relu(c1);
    let logits = linear(gb, c1, "head.cls.w2", "head.cls.b2", d, 2)?;
    let probs = gb.softmax(logits);

    let b1 = linear(gb, x, "head.box.w1", "head.box.b1", d, d)?;
    let b1 = gb.relu(b1);
    let b2 = linear(gb, b1, "head.box.w2", "head.box.b2", d, d)?;
    let b2 = gb.relu(b2);
    let b3 = linear(gb, b2, "head.box.w3", "head.box.b3", d, 4)?;
    let refs = match ref_logits {
        Some(node) => node,
        None => append_ref_logits(gb, cfg, x)?,
    };
    let zero_wh = gb.constant(Array::zeros(vec![n, 2]));
    let ref_padded = gb.concat_cols(vec![refs, zero_wh])?;
    let anchored = gb.add(b3, ref_padded)?;
    let boxes = gb.sigmoid(anchored);
    Ok((probs, boxes))
}

/// Flatten a frame into per-patch rows: patches in row-major grid order,
/// pixels row-major within the patch, channels interleaved rgb.
pub fn patchify(frame: &Frame, cfg: &ModelConfig) -> Result<Array, NetError> {
    if frame.height != cfg.image_h || frame.width != cfg.image_w {
        return Err(NetError::DimMismatch {
            what: "frame size",
            expected: cfg.image_h * cfg.image_w,
            got: frame.height * frame.width,
        });
    }
    let p = cfg.patch_size;
    let grid_w = cfg.image_w / p;
    let grid_h = cfg.image_h / p;
    let mut data = Vec::with_capacity(cfg.tokens() * cfg.patch_dim());
    for py in 0..grid_h {
        for px in 0..grid_w {
            for dy in 0..p {
                for dx in 0..p {
                    let (r, g, b) = frame.pixel(px * p + dx, py * p + dy);
                    data.extend_from_slice(&[r, g, b]);
                }
            }
        }
    }
    Ok(Array::matrix(cfg.tokens(), cfg.patch_dim(), data))
}

/// Two-dimensional sinusoidal positional table: the first half of the
/// latent dimension encodes the patch row, the second half the column.
pub fn sinusoidal_positions(cfg: &ModelConfig) -> Array {
    let d = cfg.latent_dim;
    let half = d / 2;
    let grid_w = cfg.image_w / cfg.patch_size;
    let grid_h = cfg.image_h / cfg.patch_size;
    let mut data = Vec::with_capacity(cfg.tokens() * d);
    let component = |pos: f64, i: usize, span: usize| -> f64 {
        let exponent = 2.0 * (i / 2) as f64 / span as f64;
        let freq = 10000f64.powf(exponent);
        let angle = pos / freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    };
    for py in 0..grid_h {
        for px in 0..grid_w {
            for i in 0..half {
                data.push(component(py as f64, i, half));
            }
            for i in 0..(d - half) {
                data.push(component(px as f64, i, d - half));
            }
        }
    }
    Array::matrix(cfg.tokens(), d, data)
}
