// probe: after N iters, inspect raw head outputs on a training frame
use diffmot::diffusion::{build_schedule, sample_latent_proposals, ScheduleKind};
use diffmot::ndgrad::Rng;
use diffmot::nets::{ffn_heads, sfen_extract, EmbeddingSet, ModelConfig, ModelParams};
use diffmot::synthworld::{generate, gt_to_targets, PresetKind, ScenarioPreset};
use diffmot::tracker::refine;
use diffmot::trainer::{train_step, Adam, FramePairSample, TrainConfig};

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let model = ModelConfig::default();
    let schedule = build_schedule(10, 0.1, 0.9, ScheduleKind::Linear).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.lr_transformer = lr;
    cfg.lr_backbone = lr / 10.0;

    let preset = ScenarioPreset::new(PresetKind::Easy, 100);
    let seq = generate(&preset).unwrap();
    let mut samples: Vec<FramePairSample> = Vec::new();
    for i in 1..seq.frames.len() {
        samples.push(FramePairSample {
            frames: (seq.frames[i - 1].clone(), seq.frames[i].clone()),
            targets: (gt_to_targets(&seq.gt[i - 1]), gt_to_targets(&seq.gt[i])),
        });
    }

    let mut rng = Rng::from_seed(0);
    let mut params = ModelParams::init(model, &mut rng).unwrap();
    let mut opt = Adam::new();
    let mut step_rng = Rng::from_seed(1);
    for it in 0..iters {
        let s = &samples[it % samples.len()];
        let loss = train_step(s, &mut params, &mut opt, &cfg, &schedule, &mut step_rng).unwrap();
        if (it + 1) % 200 == 0 { println!("iter {:>5} loss {:8.3}", it + 1, loss); }
    }

    // inference-style pass on frame 0
    let feats = sfen_extract(&seq.frames[0], &params).unwrap();
    let mut prop_rng = Rng::from_seed(9);
    let noised = sample_latent_proposals(model.n_ns, model.latent_dim, &mut prop_rng);
    let refined = refine(&noised, &EmbeddingSet::empty(model.latent_dim), &feats, 1, &params).unwrap();
    let preds = ffn_heads(&refined, &params).unwrap();
    let mut scored: Vec<(f64, usize)> = preds.entries.iter().enumerate().map(|(i, p)| (p.person_prob(), i)).collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    println!("GT frame 0:");
    for e in &seq.gt[0] {
        println!("  id {} box ({:.3},{:.3},{:.3},{:.3})", e.id, e.bbox.cx, e.bbox.cy, e.bbox.w, e.bbox.h);
    }
    println!("top-8 of {} proposals:", preds.entries.len());
    for &(score, i) in scored.iter().take(8) {
        let b = preds.entries[i].bbox;
        println!("  q{i:02} p={score:.3} box ({:.3},{:.3},{:.3},{:.3})", b.cx, b.cy, b.w, b.h);
    }
    let mean: f64 = scored.iter().map(|s| s.0).sum::<f64>() / scored.len() as f64;
    println!("mean score {mean:.4}");
}
