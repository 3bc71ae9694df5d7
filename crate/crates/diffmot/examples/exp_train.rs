// scratch experiment: measure step time + convergence on the easy preset
use diffmot::clearmot::{evaluate_sequence, mota, motp, EvalConfig};
use diffmot::diffusion::{build_schedule, ScheduleKind};
use diffmot::geom::BBox;
use diffmot::ndgrad::Rng;
use diffmot::nets::ModelConfig;
use diffmot::synthworld::{generate, gt_to_targets, PresetKind, ScenarioPreset};
use diffmot::tracker::{DiffusionNet, Tracker, TrackerConfig};
use diffmot::trainer::{train_step, Adam, FramePairSample, TrainConfig};
use std::time::Instant;

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let model = ModelConfig::default();
    let schedule = build_schedule(10, 0.1, 0.9, ScheduleKind::Linear).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.lr_transformer = lr;
    cfg.lr_backbone = lr / 10.0;

    // training data: 4 easy sequences
    let mut samples: Vec<FramePairSample> = Vec::new();
    for seed in 100..104u64 {
        let preset = ScenarioPreset::new(PresetKind::Easy, seed);
        let seq = generate(&preset).unwrap();
        for i in 1..seq.frames.len() {
            samples.push(FramePairSample {
                frames: (seq.frames[i - 1].clone(), seq.frames[i].clone()),
                targets: (gt_to_targets(&seq.gt[i - 1]), gt_to_targets(&seq.gt[i])),
            });
        }
    }
    println!("samples: {}", samples.len());

    let mut rng = Rng::from_seed(0);
    let mut params = diffmot::nets::ModelParams::init(model, &mut rng).unwrap();
    let mut opt = Adam::new();
    let mut step_rng = Rng::from_seed(1);

    let t0 = Instant::now();
    let mut window = Vec::new();
    for it in 0..iters {
        let s = &samples[it % samples.len()];
        let loss = train_step(s, &mut params, &mut opt, &cfg, &schedule, &mut step_rng).unwrap();
        window.push(loss);
        if (it + 1) % 50 == 0 {
            let avg: f64 = window.iter().sum::<f64>() / window.len() as f64;
            println!(
                "iter {:>5}  mean50 {:8.4}  ({:.1} ms/it)",
                it + 1,
                avg,
                t0.elapsed().as_millis() as f64 / (it + 1) as f64
            );
            window.clear();
        }
    }

    // track a held-out sequence
    let preset = ScenarioPreset::new(PresetKind::Easy, 200);
    let seq = generate(&preset).unwrap();
    let mut tracker = Tracker::new(DiffusionNet { params }, TrackerConfig::default());
    let mut trk_rng = Rng::from_seed(7);
    let mut hyp: Vec<Vec<(i64, BBox)>> = Vec::new();
    for frame in &seq.frames {
        let r = tracker.step(frame, &mut trk_rng).unwrap();
        hyp.push(r.detections.iter().map(|&(id, b, _)| (id as i64, b)).collect());
    }
    let gt: Vec<Vec<(i64, BBox)>> = seq
        .gt
        .iter()
        .map(|e| e.iter().map(|x| (x.id as i64, x.bbox)).collect())
        .collect();
    let counts = evaluate_sequence(&gt, &hyp, &EvalConfig::default()).unwrap();
    println!("counts: {counts:?}");
    println!("MOTA {:?}  MOTP {:?}", mota(&counts), motp(&counts));
}
