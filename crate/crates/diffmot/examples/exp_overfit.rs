// decisive probe: overfit one frame pair; track matched-score trajectory
// under inference-style (pure noise) queries and report score ranks
use diffmot::assign::{match_predictions, LossWeights};
use diffmot::diffusion::{build_schedule, sample_latent_proposals, ScheduleKind};
use diffmot::geom::iou;
use diffmot::ndgrad::Rng;
use diffmot::nets::{ffn_heads, sfen_extract, EmbeddingSet, ModelConfig, ModelParams};
use diffmot::synthworld::{generate, gt_to_targets, PresetKind, ScenarioPreset};
use diffmot::tracker::refine;
use diffmot::trainer::{train_step, Adam, FramePairSample, TrainConfig};
use std::collections::BTreeSet;

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let model = ModelConfig::default();
    let schedule = build_schedule(10, 0.1, 0.9, ScheduleKind::Linear).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.lr_transformer = lr;
    cfg.lr_backbone = lr / 10.0;

    let preset = ScenarioPreset::new(PresetKind::Easy, 100);
    let seq = generate(&preset).unwrap();
    let sample = FramePairSample {
        frames: (seq.frames[0].clone(), seq.frames[1].clone()),
        targets: (gt_to_targets(&seq.gt[0]), gt_to_targets(&seq.gt[1])),
    };

    let mut rng = Rng::from_seed(0);
    let mut params = ModelParams::init(model, &mut rng).unwrap();
    let mut opt = Adam::new();
    let mut step_rng = Rng::from_seed(1);
    for it in 0..iters {
        let loss =
            train_step(&sample, &mut params, &mut opt, &cfg, &schedule, &mut step_rng).unwrap();
        if (it + 1) % 500 == 0 {
            let feats = sfen_extract(&seq.frames[0], &params).unwrap();
            let mut prng = Rng::from_seed(9);
            let noised = sample_latent_proposals(model.n_ns, model.latent_dim, &mut prng);
            let refined =
                refine(&noised, &EmbeddingSet::empty(model.latent_dim), &feats, 1, &params)
                    .unwrap();
            let preds = ffn_heads(&refined, &params).unwrap();
            let targets = gt_to_targets(&seq.gt[0]);
            let assignment =
                match_predictions(&targets, &preds, &BTreeSet::new(), &LossWeights::default())
                    .unwrap();
            // rank of matched queries among all by score
            let mut scores: Vec<f64> = preds.entries.iter().map(|p| p.person_prob()).collect();
            let matched: Vec<(usize, f64)> = assignment
                .pairs
                .iter()
                .map(|&(_, p)| (p, scores[p]))
                .collect();
            scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let ranks: Vec<usize> = matched
                .iter()
                .map(|&(_, s)| scores.iter().position(|&x| x == s).unwrap())
                .collect();
            // best achievable IoU per target from any query box
            let best_iou: Vec<f64> = targets
                .entries()
                .iter()
                .map(|t| {
                    preds
                        .entries
                        .iter()
                        .map(|p| iou(&t.bbox, &p.bbox))
                        .fold(0.0, f64::max)
                })
                .collect();
            println!(
                "it {:>5} loss {:7.3} matched_scores {:?} ranks {:?} best_iou {:?}",
                it + 1,
                loss,
                matched.iter().map(|&(_, s)| (s * 100.0).round() / 100.0).collect::<Vec<_>>(),
                ranks,
                best_iou.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
            );
        }
    }
}
