// long-run diagnostic: score trajectory of matched noised queries
use diffmot::assign::{match_predictions, LossWeights};
use diffmot::diffusion::{build_schedule, sample_latent_proposals, ScheduleKind};
use diffmot::geom::BBox;
use diffmot::clearmot::{evaluate_sequence, mota, motp, EvalConfig};
use diffmot::ndgrad::Rng;
use diffmot::nets::{ffn_heads, sfen_extract, EmbeddingSet, ModelConfig, ModelParams};
use diffmot::synthworld::{generate, gt_to_targets, PresetKind, ScenarioPreset};
use diffmot::tracker::{refine, DiffusionNet, Tracker, TrackerConfig};
use diffmot::trainer::{train_step, Adam, FramePairSample, TrainConfig};
use std::collections::BTreeSet;

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let batch: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(2);
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
        if seed == 100 { probe_frames = seq.frames.clone(); probe_gt = seq.gt.clone(); }
        for i in 1..seq.frames.len() {
            samples.push(FramePairSample {
                frames: (seq.frames[i - 1].clone(), seq.frames[i].clone()),
                targets: (gt_to_targets(&seq.gt[i - 1]), gt_to_targets(&seq.gt[i])),
            });
        }
    }
    eprintln!("samples: {}", samples.len());

    let mut rng = Rng::from_seed(0);
    let mut params = ModelParams::init(model, &mut rng).unwrap();
    let mut opt = Adam::new();
    let mut step_rng = Rng::from_seed(1);
    let t0 = std::time::Instant::now();
    for it in 0..iters {
        let mut loss_sum = 0.0;
        for b in 0..batch {
            let s = &samples[(it * batch + b) % samples.len()];
            loss_sum += train_step(s, &mut params, &mut opt, &cfg, &schedule, &mut step_rng).unwrap();
        }
        if (it + 1) % 250 == 0 {
            // probe: matched scores on a fixed frame
            let feats = sfen_extract(&probe_frames[0], &params).unwrap();
            let mut prng = Rng::from_seed(9);
            let noised = sample_latent_proposals(model.n_ns, model.latent_dim, &mut prng);
            let refined = refine(&noised, &EmbeddingSet::empty(model.latent_dim), &feats, 1, &params).unwrap();
            let preds = ffn_heads(&refined, &params).unwrap();
            let targets = gt_to_targets(&probe_gt[0]);
            let a = match_predictions(&targets, &preds, &BTreeSet::new(), &LossWeights::default()).unwrap();
            let matched: Vec<f64> = a.pairs.iter().map(|&(_, p)| preds.entries[p].person_prob()).collect();
            let max_any = preds.entries.iter().map(|p| p.person_prob()).fold(0.0, f64::max);
            eprintln!(
                "it {:>5} loss {:8.3} matched {:?} max {:.3} ({:.0}ms/it)",
                it + 1, loss_sum / batch as f64,
                matched.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
                max_any, t0.elapsed().as_millis() as f64 / (it + 1) as f64,
            );
        }
    }

    // end-to-end MOTA on held-out sequence
    let preset = ScenarioPreset::new(PresetKind::Easy, 200);
    let seq = generate(&preset).unwrap();
    let mut tracker = Tracker::new(DiffusionNet { params }, TrackerConfig::default());
    let mut trk_rng = Rng::from_seed(7);
    let mut hyp: Vec<Vec<(i64, BBox)>> = Vec::new();
    for frame in &seq.frames {
        let r = tracker.step(frame, &mut trk_rng).unwrap();
        hyp.push(r.detections.iter().map(|&(id, b, _)| (id as i64, b)).collect());
    }
    let gt: Vec<Vec<(i64, BBox)>> = seq.gt.iter().map(|e| e.iter().map(|x| (x.id as i64, x.bbox)).collect()).collect();
    let counts = evaluate_sequence(&gt, &hyp, &EvalConfig::default()).unwrap();
    eprintln!("counts: {counts:?}");
    eprintln!("MOTA {:?}  MOTP {:?}", mota(&counts), motp(&counts));
}
