// schedule sweep: how much surviving signal at step S stabilizes matching,
// and whether the result transfers to pure-noise inference
use diffmot::assign::{match_predictions, LossWeights};
use diffmot::clearmot::{evaluate_sequence, mota, motp, EvalConfig};
use diffmot::diffusion::{build_schedule, sample_latent_proposals, ScheduleKind};
use diffmot::geom::BBox;
use diffmot::ndgrad::Rng;
use diffmot::nets::{ffn_heads, sfen_extract, EmbeddingSet, ModelConfig, ModelParams};
use diffmot::synthworld::{generate, gt_to_targets, PresetKind, ScenarioPreset};
use diffmot::tracker::{refine, DiffusionNet, Tracker, TrackerConfig};
use diffmot::trainer::{train_batch_step, Adam, FramePairSample, TrainConfig};
use std::collections::BTreeSet;

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let b0: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let b1: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let lr: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let batch: usize = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(8);
    let model = ModelConfig::default();
    let schedule = build_schedule(10, b0, b1, ScheduleKind::Linear).unwrap();
    println!("alpha_bar_S = {:.5}", schedule.alpha_bar[10]);
    let mut cfg = TrainConfig::default();
    cfg.lr_transformer = lr;
    cfg.lr_backbone = std::env::args()
        .nth(6)
        .and_then(|s| s.parse().ok())
        .unwrap_or(lr / 10.0);
    cfg.lr_warmup_iters = 100;
    cfg.lr_decay_from = iters * 7 / 10;
    cfg.max_iters = iters;

    let mut samples: Vec<FramePairSample> = Vec::new();
    let mut probe_frames = Vec::new();
    let mut probe_gt = Vec::new();
    for seed in 100..132u64 {
        let mut preset = ScenarioPreset::new(PresetKind::Easy, seed);
        preset.person_min = 4;
        preset.person_max = 4;
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
    let mut opt = Adam::new();
    let mut step_rng = Rng::from_seed(1);
    for it in 0..iters {
        let chosen: Vec<&FramePairSample> = (0..batch)
            .map(|b| &samples[(it * batch + b) % samples.len()])
            .collect();
        let lsum = batch as f64
            * train_batch_step(&chosen, &mut params, &mut opt, &cfg, &schedule, &mut step_rng)
                .unwrap();
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
            println!(
                "it {:>5} loss {:7.2} matched(noise-inference) {:?} max {:.3}",
                it + 1,
                lsum / batch as f64,
                matched
                    .iter()
                    .map(|v| (v * 100.0).round() / 100.0)
                    .collect::<Vec<_>>(),
                max_any,
            );
        }
    }

    // end-to-end on a held-out sequence with pure-noise proposals
    let preset = ScenarioPreset::new(PresetKind::Easy, 200);
    let seq = generate(&preset).unwrap();
    let gt: Vec<Vec<(i64, BBox)>> = seq
        .gt
        .iter()
        .map(|e| e.iter().map(|x| (x.id as i64, x.bbox)).collect())
        .collect();
    for steps in 1..=3usize {
        let mut cfg_t = TrackerConfig::default();
        cfg_t.refine_steps = steps;
        let mut tracker = Tracker::new(DiffusionNet { params: params.clone() }, cfg_t);
        let mut trk_rng = Rng::from_seed(7);
        let mut hyp: Vec<Vec<(i64, BBox)>> = Vec::new();
        for frame in &seq.frames {
            let r = tracker.step(frame, &mut trk_rng).unwrap();
            hyp.push(r.detections.iter().map(|&(id, b, _)| (id as i64, b)).collect());
        }
        let counts = evaluate_sequence(&gt, &hyp, &EvalConfig::default()).unwrap();
        println!("steps {steps}: counts: {counts:?}");
        println!("steps {steps}: MOTA {:?}  MOTP {:?}", mota(&counts), motp(&counts));
    }
}
