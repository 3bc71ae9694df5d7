// hypothesis test: scale decoder attention projections at init to break
// the uniform-attention collapse basin
use diffmot::assign::{match_predictions, LossWeights};
use diffmot::diffusion::{build_schedule, sample_latent_proposals, ScheduleKind};
use diffmot::ndgrad::Rng;
use diffmot::nets::{ffn_heads, sfen_extract, EmbeddingSet, ModelConfig, ModelParams};
use diffmot::synthworld::{generate, gt_to_targets, PresetKind, ScenarioPreset};
use diffmot::tracker::refine;
use diffmot::trainer::{train_step, Adam, FramePairSample, TrainConfig};
use std::collections::BTreeSet;

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let gain: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(4.0);
    let lr: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let model = ModelConfig::default();
    let schedule = build_schedule(10, 0.1, 0.9, ScheduleKind::Linear).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.lr_transformer = lr;
    cfg.lr_backbone = lr / 10.0;

    let mut samples: Vec<FramePairSample> = Vec::new();
    let mut probe_frames = Vec::new();
    let mut probe_gt = Vec::new();
    for seed in 100..108u64 {
        let preset = ScenarioPreset::new(PresetKind::Easy, seed);
        let seq = generate(&preset).unwrap();
        if seed == 100 {
            probe_frames = seq.frames.clone();
            probe_gt = seq.gt.clone();
        }
        for i in 1..seq.frames.len() {
            samples.push(FramePairSample {
                frames: (seq.frames[i - 1].clone(), seq.frames[i].clone()),
                targets: (gt_to_targets(&seq.gt[i - 1]), gt_to_targets(&seq.gt[i])),
            });
        }
    }

    let mut rng = Rng::from_seed(0);
    let mut params = ModelParams::init(model, &mut rng).unwrap();
    for (name, arr) in params.values_mut().iter_mut() {
        if (name.contains(".cross.") || name.contains(".self."))
            && (name.ends_with("wq") || name.ends_with("wk"))
        {
            for v in arr.data_mut() {
                *v *= gain;
            }
        }
    }
    let mut opt = Adam::new();
    let mut step_rng = Rng::from_seed(1);
    for it in 0..iters {
        let mut lsum = 0.0;
        for b in 0..8 {
            let s = &samples[(it * 8 + b) % samples.len()];
            lsum += train_step(s, &mut params, &mut opt, &cfg, &schedule, &mut step_rng).unwrap();
        }
        if (it + 1) % 250 == 0 {
            let feats = sfen_extract(&probe_frames[0], &params).unwrap();
            let mut prng = Rng::from_seed(9);
            let noised = sample_latent_proposals(model.n_ns, model.latent_dim, &mut prng);
            let refined =
                refine(&noised, &EmbeddingSet::empty(model.latent_dim), &feats, 1, &params)
                    .unwrap();
            let preds = ffn_heads(&refined, &params).unwrap();
            let targets = gt_to_targets(&probe_gt[0]);
            let a = match_predictions(&targets, &preds, &BTreeSet::new(), &LossWeights::default())
                .unwrap();
            let matched: Vec<f64> = a
                .pairs
                .iter()
                .map(|&(_, p)| preds.entries[p].person_prob())
                .collect();
            let max_any = preds
                .entries
                .iter()
                .map(|p| p.person_prob())
                .fold(0.0, f64::max);
            let mean_cx: f64 =
                preds.entries.iter().map(|p| p.bbox.cx).sum::<f64>() / preds.entries.len() as f64;
            let var_cx: f64 = preds
                .entries
                .iter()
                .map(|p| (p.bbox.cx - mean_cx).powi(2))
                .sum::<f64>()
                / preds.entries.len() as f64;
            println!(
                "it {:>5} loss {:7.2} matched {:?} max {:.3} box_std_cx {:.3}",
                it + 1,
                lsum / 8.0,
                matched
                    .iter()
                    .map(|v| (v * 100.0).round() / 100.0)
                    .collect::<Vec<_>>(),
                max_any,
                var_cx.sqrt(),
            );
        }
    }
}
