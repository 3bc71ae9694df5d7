//! The training subsystem: two-frame training steps, Adam with separate
//! backbone/transformer learning rates, early stopping, and checkpoints.
//!
//! Each step decodes frame T-1 from noised ground-truth embeddings,
//! retains the matched embeddings that pass the lifecycle thresholds as
//! track queries, decodes frame T conditioned on them, and minimizes the
//! set-prediction loss over both frames' predictions. Matching is
//! recomputed from forward values every step and frozen into the graph;
//! gradients flow from the frame-T loss back through the carried rows into
//! the first decode, and both passes share one parameter set.

use crate::assign::{
    append_set_loss, match_predictions, Assignment, LossWeights, Prediction, PredictionSet,
    TargetSet,
};
use crate::diffusion::{mixing_coefficients, pad_boxes, NoiseSchedule, PadConfig};
use crate::geom::{iou, BBox};
use crate::ndgrad::{Array, Bindings, Evaluation, GradError, Gradients, Graph, GraphBuilder, Rng};
use crate::nets::{
    append_heads, append_itrn, append_lfen, append_sfen, group_of, patchify, save_checkpoint,
    ModelConfig, ModelParams, ParamGroup, RowTag,
};
use crate::synthworld::Frame;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("non-finite loss at iteration {iter}; offending arrays: {arrays}")]
    NonFiniteLoss { iter: usize, arrays: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Assign(#[from] crate::assign::AssignError),
    #[error(transparent)]
    Net(#[from] crate::nets::NetError),
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Optimization hyperparameters. The backbone rate covers the patch
/// projection and positional table; everything else uses the transformer
/// rate.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub lr_backbone: f64,
    pub lr_transformer: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub max_iters: usize,
    /// Validation rounds without improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub val_interval: usize,
    pub weight_decay: f64,
    /// Linear learning-rate warmup over this many optimizer steps
    /// (0 disables).
    pub lr_warmup_iters: usize,
    /// Cosine-decay the learning rate to 10% between this step and
    /// `max_iters` (0 disables).
    pub lr_decay_from: usize,
    /// Lifecycle thresholds used for training-time track retention.
    pub sigma_cls: f64,
    pub sigma_iou: f64,
    /// Gaussian jitter added to carried track rows during training,
    /// relative to each row's standard deviation. Trains the decoder to
    /// contract perturbed track queries back onto their person, which is
    /// what keeps the inference-time embedding recursion stable.
    pub track_jitter: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_backbone: 1e-5,
            lr_transformer: 1e-4,
            batch_size: 1,
            weights: LossWeights::default(),
            max_iters: 2000,
            early_stop_patience: 0,
            val_interval: 100,
            weight_decay: 0.0,
            lr_warmup_iters: 0,
            lr_decay_from: 0,
            sigma_cls: 0.4,
            sigma_iou: 0.9,
            track_jitter: 0.3,
            seed: 0,
        }
    }
}

/// Learning-rate multiplier at optimizer step `t` (1-based): linear warmup
/// then optional cosine decay to a 10% floor.
fn lr_multiplier(cfg: &TrainConfig, t: u64) -> f64 {
    let mut scale = 1.0;
    if cfg.lr_warmup_iters > 0 && (t as usize) < cfg.lr_warmup_iters {
        scale *= t as f64 / cfg.lr_warmup_iters as f64;
    }
    if cfg.lr_decay_from > 0 && (t as usize) > cfg.lr_decay_from && cfg.max_iters > cfg.lr_decay_from
    {
        let span = (cfg.max_iters - cfg.lr_decay_from) as f64;
        let progress = ((t as usize - cfg.lr_decay_from) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        scale *= 0.1 + 0.9 * cosine;
    }
    scale
}

/// A pair of consecutive frames with identity-consistent ground truth.
#[derive(Debug, Clone)]
pub struct FramePairSample {
    pub frames: (Frame, Frame),
    pub targets: (TargetSet, TargetSet),
}

/// Train/validation split of frame-pair samples.
#[derive(Debug, Clone, Default)]
pub struct TrainDataset {
    pub train: Vec<FramePairSample>,
    pub val: Vec<FramePairSample>,
}

/// Adam with decoupled weight decay (off by default). Records the
/// learning rate applied to every parameter so tests can audit group
/// discipline.
#[derive(Debug)]
pub struct Adam {
    m: BTreeMap<String, Array>,
    v: BTreeMap<String, Array>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub last_applied: Vec<(String, f64)>,
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            last_applied: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients, cfg: &TrainConfig) {
        self.t += 1;
        let t = self.t as i32;
        let multiplier = lr_multiplier(cfg, self.t);
        self.last_applied.clear();
        for (name, grad) in grads.iter() {
            let Some(value) = params.values_mut().get_mut(name) else {
                continue;
            };
            let lr = multiplier
                * match group_of(name) {
                    ParamGroup::Backbone => cfg.lr_backbone,
                    ParamGroup::Transformer => cfg.lr_transformer,
                };
            self.last_applied.push((name.clone(), lr));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(grad.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(grad.shape().to_vec()));
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            for ((p, g), (mi, vi)) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + self.eps) + cfg.weight_decay * *p);
            }
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

/// The fully built differentiable two-frame graph for one sample, with its
/// data bindings and the frozen assignments. Exposed so gradient audits
/// can run finite differences over the exact training graph.
pub struct TrainGraph {
    pub graph: Graph,
    pub data: BTreeMap<String, Array>,
    pub assignment_prev: Assignment,
    pub assignment_cur: Assignment,
    /// Decoder output rows of frame T-1 carried into frame T, with the
    /// ground-truth identity each row adopted.
    pub retained: Vec<(usize, u64)>,
}

fn heads_to_predictions(
    probs: &Array,
    boxes: &Array,
    tags: &[RowTag],
    track_ids: &[Option<u64>],
) -> PredictionSet {
    let entries = (0..probs.rows())
        .map(|i| Prediction {
            probs: [probs.at(i, 0), probs.at(i, 1)],
            bbox: BBox::new(boxes.at(i, 0), boxes.at(i, 1), boxes.at(i, 2), boxes.at(i, 3)),
            source: tags[i],
            track_id: track_ids[i],
        })
        .collect();
    PredictionSet { entries }
}

/// Append one frame's pipeline: encode padded boxes, mix in the scheduled
/// noise, decode against the frame's features, and run the heads.
/// Returns (decoder output, probs, boxes).
#[allow(clippy::too_many_arguments)]
fn append_frame_pass(
    gb: &mut GraphBuilder,
    model: &ModelConfig,
    boxes_input: &str,
    eps_input: &str,
    patches_input: &str,
    signal: f64,
    noise: f64,
    track_rows: Option<crate::ndgrad::NodeId>,
) -> Result<(crate::ndgrad::NodeId, crate::ndgrad::NodeId, crate::ndgrad::NodeId), TrainerError> {
    let n_ns = model.n_ns;
    let boxes = gb.input(boxes_input, &[n_ns, 4]);
    let z0 = append_lfen(gb, model, boxes)?;
    let scaled = gb.scale(z0, signal);
    let eps = gb.input(eps_input, &[n_ns, model.latent_dim]);
    let eps_scaled = gb.scale(eps, noise);
    let z_noised = gb.add(scaled, eps_scaled)?;

    let queries = match track_rows {
        Some(tracks) => gb.concat_rows(vec![z_noised, tracks])?,
        None => z_noised,
    };

    let patches = gb.input(patches_input, &[model.tokens(), model.patch_dim()]);
    let memory = append_sfen(gb, model, patches)?;
    let (decoded, refs) = append_itrn(gb, model, queries, memory)?;
    let (probs, boxes_out) = append_heads(gb, model, decoded, Some(refs))?;
    Ok((decoded, probs, boxes_out))
}

/// Training-time retention: matched rows that survive the overlap
/// suppression carry forward as track queries, adopting their target's
/// identity. The classification gate applies only once scores can clear
/// it (`min(sigma_cls, best matched score)`), so a cold-start model still
/// trains the carryover pathway from the first iterations; the inference
/// lifecycle applies both thresholds unconditionally.
fn retain_rows(
    preds: &PredictionSet,
    targets: &TargetSet,
    assignment: &Assignment,
    cfg: &TrainConfig,
) -> Vec<(usize, u64)> {
    let best_matched = assignment
        .pairs
        .iter()
        .map(|&(_, p)| preds.entries[p].person_prob())
        .fold(0.0f64, f64::max);
    let gate = if best_matched >= cfg.sigma_cls {
        cfg.sigma_cls
    } else {
        0.0
    };
    let mut candidates: Vec<(usize, u64, f64, BBox)> = assignment
        .pairs
        .iter()
        .filter_map(|&(t, p)| {
            let pred = &preds.entries[p];
            let target = &targets.entries()[t];
            (pred.person_prob() >= gate).then(|| (p, target.id, pred.person_prob(), pred.bbox))
        })
        .collect();
    candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    let mut kept: Vec<(usize, u64, f64, BBox)> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| iou(&c.3, &k.3) <= cfg.sigma_iou) {
            kept.push(c);
        }
    }
    kept.sort_by_key(|k| k.0);
    let mut rows: Vec<(usize, u64)> = kept.into_iter().map(|(p, id, _, _)| (p, id)).collect();

    // False-positive track augmentation: carry the highest-scoring
    // unmatched row under a synthetic identity so the next frame's loss
    // charges it as background. This trains the lifecycle's deactivation
    // path; without it, carried junk queries are out-of-distribution at
    // inference and survive as false positives.
    let matched_rows: std::collections::BTreeSet<usize> =
        rows.iter().map(|&(p, _)| p).collect();
    let negative = preds
        .entries
        .iter()
        .enumerate()
        .filter(|(p, _)| !matched_rows.contains(p))
        .max_by(|(_, a), (_, b)| a.person_prob().partial_cmp(&b.person_prob()).unwrap());
    if let Some((p, _)) = negative {
        rows.push((p, NEGATIVE_TRACK_BASE + p as u64));
    }
    rows
}

/// Synthetic identity range for augmented negative track queries; never
/// collides with generated ground-truth identities.
const NEGATIVE_TRACK_BASE: u64 = 1 << 62;

/// Build the full two-frame training graph for one sample.
///
/// Runs the forward passes needed to compute the (non-differentiable)
/// assignments and the retention choice, then freezes both into a single
/// graph whose `loss` output differentiates through every parameter and
/// through the carried rows.
pub fn build_train_graph(
    sample: &FramePairSample,
    params: &ModelParams,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<TrainGraph, TrainerError> {
    let model = params.config;
    let pad_cfg = PadConfig::new(model.n_ns);
    let s = schedule.steps();
    let (signal, noise) = mixing_coefficients(schedule, s)?;

    // All stochastic data is drawn once, up front, and bound as graph
    // inputs so every rebuild below is bit-identical.
    let padded_prev = pad_boxes(sample.targets.0.entries().iter().map(|t| t.bbox).collect::<Vec<_>>().as_slice(), &pad_cfg, rng)?;
    let eps_prev = Array::fill_normal(vec![model.n_ns, model.latent_dim], rng);
    let padded_cur = pad_boxes(sample.targets.1.entries().iter().map(|t| t.bbox).collect::<Vec<_>>().as_slice(), &pad_cfg, rng)?;
    let eps_cur = Array::fill_normal(vec![model.n_ns, model.latent_dim], rng);

    let boxes_arr = |padded: &[BBox]| {
        Array::matrix(
            model.n_ns,
            4,
            padded.iter().flat_map(|b| [b.cx, b.cy, b.w, b.h]).collect(),
        )
    };
    let mut data: BTreeMap<String, Array> = BTreeMap::new();
    data.insert("boxes_prev".into(), boxes_arr(&padded_prev));
    data.insert("eps_prev".into(), eps_prev);
    data.insert("patches_prev".into(), patchify(&sample.frames.0, &model)?);
    data.insert("boxes_cur".into(), boxes_arr(&padded_cur));
    data.insert("eps_cur".into(), eps_cur);
    data.insert("patches_cur".into(), patchify(&sample.frames.1, &model)?);

    // Pass 1: frame T-1 alone, to fix its assignment and the retention.
    let (assignment_prev, retained) = {
        let mut gb = GraphBuilder::new();
        let (_, probs, boxes) = append_frame_pass(
            &mut gb, &model, "boxes_prev", "eps_prev", "patches_prev", signal, noise, None,
        )?;
        gb.output("probs_prev", probs);
        gb.output("boxes_prev_out", boxes);
        let graph = gb.finish();
        let eval = eval_with(&graph, params, &data)?;
        let tags = vec![RowTag::Noised; model.n_ns];
        let ids = vec![None; model.n_ns];
        let preds = heads_to_predictions(
            eval.output("probs_prev")?,
            eval.output("boxes_prev_out")?,
            &tags,
            &ids,
        );
        let assignment =
            match_predictions(&sample.targets.0, &preds, &BTreeSet::new(), &cfg.weights)?;
        let retained = retain_rows(&preds, &sample.targets.0, &assignment, cfg);
        (assignment, retained)
    };

    let retained_ids: BTreeSet<u64> = retained.iter().map(|&(_, id)| id).collect();
    let n_tk = retained.len();
    let jitter = if n_tk > 0 && cfg.track_jitter > 0.0 {
        Some(Array::fill_normal(vec![n_tk, model.latent_dim], rng))
    } else {
        None
    };

    let mut scaled_jitter: Option<Array> = None;

    // Pass 2: frame T with the retained embedding values bound as data, to
    // fix its assignment.
    let assignment_cur = {
        let mut gb = GraphBuilder::new();
        let track_rows = if n_tk > 0 {
            Some(gb.input("track_rows", &[n_tk, model.latent_dim]))
        } else {
            None
        };
        let (_, probs, boxes) = append_frame_pass(
            &mut gb, &model, "boxes_cur", "eps_cur", "patches_cur", signal, noise, track_rows,
        )?;
        gb.output("probs_cur", probs);
        gb.output("boxes_cur_out", boxes);
        let graph = gb.finish();

        // retained rows' values come from pass 1's decoder output; rebuild
        // that tiny view by evaluating the prev pass again
        let mut data2 = data.clone();
        if n_tk > 0 {
            let mut gb_prev = GraphBuilder::new();
            let (decoded, _, _) = append_frame_pass(
                &mut gb_prev, &model, "boxes_prev", "eps_prev", "patches_prev", signal, noise,
                None,
            )?;
            let sel = gb_prev.select_rows(decoded, retained.iter().map(|&(p, _)| p).collect())?;
            gb_prev.output("tracks", sel);
            let prev_graph = gb_prev.finish();
            let eval = eval_with(&prev_graph, params, &data)?;
            let rows = eval.output("tracks")?.clone();
            if let Some(unit) = &jitter {
                scaled_jitter = Some(scale_jitter(unit, &rows, cfg.track_jitter));
            }
            let mut jittered = rows;
            if let Some(noise_arr) = &scaled_jitter {
                for (v, e) in jittered.data_mut().iter_mut().zip(noise_arr.data()) {
                    *v += e;
                }
            }
            data2.insert("track_rows".into(), jittered);
        }

        let eval = eval_with(&graph, params, &data2)?;
        let mut tags = vec![RowTag::Noised; model.n_ns];
        tags.extend(vec![RowTag::Track; n_tk]);
        let mut ids: Vec<Option<u64>> = vec![None; model.n_ns];
        ids.extend(retained.iter().map(|&(_, id)| Some(id)));
        let preds = heads_to_predictions(
            eval.output("probs_cur")?,
            eval.output("boxes_cur_out")?,
            &tags,
            &ids,
        );
        match_predictions(&sample.targets.1, &preds, &retained_ids, &cfg.weights)?
    };

    // Final build: both frames, both losses, gradients flowing through the
    // carried rows. Parameter inputs dedupe by name, so the two passes
    // share one weight set.
    let mut gb = GraphBuilder::new();
    let (decoded_prev, probs_prev, boxes_prev) = append_frame_pass(
        &mut gb, &model, "boxes_prev", "eps_prev", "patches_prev", signal, noise, None,
    )?;
    let loss_prev = append_set_loss(
        &mut gb,
        probs_prev,
        boxes_prev,
        &sample.targets.0,
        &assignment_prev,
        &cfg.weights,
    )?;
    let track_rows = if n_tk > 0 {
        let sel = gb.select_rows(decoded_prev, retained.iter().map(|&(p, _)| p).collect())?;
        let perturbed = match &scaled_jitter {
            Some(noise_arr) => {
                let noise_node = gb.constant(noise_arr.clone());
                gb.add(sel, noise_node)?
            }
            None => sel,
        };
        Some(perturbed)
    } else {
        None
    };
    let (_, probs_cur, boxes_cur) = append_frame_pass(
        &mut gb, &model, "boxes_cur", "eps_cur", "patches_cur", signal, noise, track_rows,
    )?;
    let loss_cur = append_set_loss(
        &mut gb,
        probs_cur,
        boxes_cur,
        &sample.targets.1,
        &assignment_cur,
        &cfg.weights,
    )?;
    let loss = gb.add(loss_prev, loss_cur)?;
    gb.output("loss", loss);

    Ok(TrainGraph {
        graph: gb.finish(),
        data,
        assignment_prev,
        assignment_cur,
        retained,
    })
}

/// Scale unit Gaussian jitter per carried row, relative to the row's own
/// standard deviation, so the perturbation strength follows the embedding
/// scale.
fn scale_jitter(unit: &Array, rows: &Array, amount: f64) -> Array {
    let d = rows.cols();
    let stds: Vec<f64> = (0..rows.rows())
        .map(|r| {
            let row = rows.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            var.sqrt().max(1e-6)
        })
        .collect();
    let data: Vec<f64> = unit
        .data()
        .iter()
        .enumerate()
        .map(|(i, &e)| e * amount * stds[i / d])
        .collect();
    Array::matrix(rows.rows(), d, data)
}

fn eval_with<'g>(
    graph: &'g Graph,
    params: &ModelParams,
    data: &BTreeMap<String, Array>,
) -> Result<Evaluation<'g>, TrainerError> {
    let mut bindings = Bindings::new();
    bindings.bind_all(params.values().iter());
    bindings.bind_all(data.iter());
    Ok(graph.forward(&bindings)?)
}

/// One optimization step over one sample. Returns the loss before the
/// update.
pub fn train_step(
    sample: &FramePairSample,
    params: &mut ModelParams,
    opt: &mut Adam,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64, TrainerError> {
    let built = build_train_graph(sample, params, cfg, schedule, rng)?;
    let eval = eval_with(&built.graph, params, &built.data)?;
    let loss = eval.output("loss")?.scalar_value();
    if !loss.is_finite() {
        return Err(non_finite_report(opt.t as usize + 1, &eval, &built));
    }
    let grads = eval.backward("loss")?;
    opt.step(params, &grads, cfg);
    Ok(loss)
}

/// One optimization step over a mini-batch: gradients are averaged across
/// the samples and applied as a single update, so the iteration count is
/// the optimizer step count regardless of batch size.
pub fn train_batch_step(
    samples: &[&FramePairSample],
    params: &mut ModelParams,
    opt: &mut Adam,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64, TrainerError> {
    assert!(!samples.is_empty());
    let mut total_loss = 0.0;
    let mut accum: BTreeMap<String, Array> = BTreeMap::new();
    for sample in samples {
        let built = build_train_graph(sample, params, cfg, schedule, rng)?;
        let eval = eval_with(&built.graph, params, &built.data)?;
        let loss = eval.output("loss")?.scalar_value();
        if !loss.is_finite() {
            return Err(non_finite_report(opt.t as usize + 1, &eval, &built));
        }
        total_loss += loss;
        let grads = eval.backward("loss")?;
        for (name, grad) in grads.iter() {
            if !params.values().contains_key(name) {
                continue;
            }
            match accum.get_mut(name) {
                Some(acc) => {
                    for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                        *a += g;
                    }
                }
                None => {
                    accum.insert(name.clone(), grad.clone());
                }
            }
        }
    }
    let scale = 1.0 / samples.len() as f64;
    let mut averaged = Gradients::default();
    for (name, mut grad) in accum {
        for v in grad.data_mut() {
            *v *= scale;
        }
        averaged.insert(name, grad);
    }
    opt.step(params, &averaged, cfg);
    Ok(total_loss * scale)
}

fn non_finite_report(iter: usize, eval: &Evaluation, built: &TrainGraph) -> TrainerError {
    let mut bad: Vec<String> = Vec::new();
    for name in built.graph.output_names() {
        if let Ok(arr) = eval.output(name) {
            if !arr.all_finite() {
                bad.push(name.to_string());
            }
        }
    }
    for (name, arr) in &built.data {
        if !arr.all_finite() {
            bad.push(format!("input {name}"));
        }
    }
    TrainerError::NonFiniteLoss {
        iter,
        arrays: if bad.is_empty() {
            "loss only".to_string()
        } else {
            bad.join(", ")
        },
    }
}

/// Forward-only loss of one sample (no update), used for validation.
pub fn sample_loss(
    sample: &FramePairSample,
    params: &ModelParams,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64, TrainerError> {
    let built = build_train_graph(sample, params, cfg, schedule, rng)?;
    let eval = eval_with(&built.graph, params, &built.data)?;
    Ok(eval.output("loss")?.scalar_value())
}

#[derive(Debug)]
pub struct TrainReport {
    pub best_val_loss: f64,
    pub iterations: usize,
    pub params: ModelParams,
}

/// Full training loop: cycles the training samples, validates every
/// `val_interval` iterations on a fixed validation noise stream, keeps the
/// best-validation parameters, and writes the checkpoint plus a
/// `iter,loss,val_loss` CSV log. Deterministic for a given seed and data.
pub fn train(
    dataset: &TrainDataset,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    checkpoint_path: &Path,
    log_path: &Path,
) -> Result<TrainReport, TrainerError> {
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(TrainerError::EmptyDataset);
    }
    let mut init_rng = Rng::derive(cfg.seed, 0x1417);
    let mut params = ModelParams::init(model_cfg, &mut init_rng)?;
    let mut opt = Adam::new();
    let mut train_rng = Rng::derive(cfg.seed, 0x7a41);

    let validate = |params: &ModelParams| -> Result<f64, TrainerError> {
        // fresh stream per round: identical draws make rounds comparable
        let mut val_rng = Rng::derive(cfg.seed, 0x0a11);
        let mut total = 0.0;
        for sample in &dataset.val {
            total += sample_loss(sample, params, cfg, schedule, &mut val_rng)?;
        }
        Ok(total / dataset.val.len() as f64)
    };

    let mut best_val = validate(&params)?;
    let mut best_params = params.clone();
    let mut best_iter = 0usize;
    let mut rounds_since_best = 0usize;
    let mut log = String::from("iter,loss,val_loss\n");
    let mut last_val = best_val;
    use std::fmt::Write as _;
    let _ = writeln!(log, "0,,{last_val:.6}");

    let mut completed = 0usize;
    'outer: for it in 1..=cfg.max_iters {
        let batch = cfg.batch_size.max(1);
        let samples: Vec<&FramePairSample> = (0..batch)
            .map(|b| &dataset.train[((it - 1) * batch + b) % dataset.train.len()])
            .collect();
        let loss = train_batch_step(&samples, &mut params, &mut opt, cfg, schedule, &mut train_rng)?;
        completed = it;

        if it % cfg.val_interval.max(1) == 0 || it == cfg.max_iters {
            last_val = validate(&params)?;
            if last_val < best_val {
                best_val = last_val;
                best_params = params.clone();
                best_iter = it;
                rounds_since_best = 0;
            } else {
                rounds_since_best += 1;
            }
            let _ = writeln!(log, "{it},{loss:.6},{last_val:.6}");
            if cfg.early_stop_patience > 0 && rounds_since_best >= cfg.early_stop_patience {
                break 'outer;
            }
        } else {
            let _ = writeln!(log, "{it},{loss:.6},");
        }
    }

    let _ = best_iter;
    save_checkpoint(best_params.values(), checkpoint_path)?;
    std::fs::write(log_path, log)?;
    Ok(TrainReport {
        best_val_loss: best_val,
        iterations: completed,
        params: best_params,
    })
}
