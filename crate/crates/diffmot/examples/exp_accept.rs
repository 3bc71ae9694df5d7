// dress rehearsal for the end-to-end acceptance criterion
use diffmot::clearmot::{evaluate_sequence, mota, motp, EvalConfig};
use diffmot::diffusion::{build_schedule, ScheduleKind};
use diffmot::geom::BBox;
use diffmot::ndgrad::Rng;
use diffmot::nets::ModelConfig;
use diffmot::synthworld::{
    corrupt_detections, generate, gt_to_targets, visible_targets, DetectionNoise, PresetKind,
    ScenarioPreset,
};
use diffmot::tracker::{DiffusionNet, Tracker, TrackerConfig};
use diffmot::trainer::{train, FramePairSample, TrainConfig, TrainDataset};
use std::time::Instant;

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(5e-4);
    let batch: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let mut model = ModelConfig::default();
    if let Some(p) = std::env::args().nth(4).and_then(|s| s.parse().ok()) {
        model.patch_size = p;
    }
    let jitter_arg: Option<f64> = std::env::args().nth(5).and_then(|s| s.parse().ok());
    let schedule = build_schedule(10, 0.1, 0.9, ScheduleKind::Linear).unwrap();
    let cfg = TrainConfig {
        lr_backbone: lr / 10.0,
        lr_transformer: lr,
        batch_size: batch,
        max_iters: iters,
        val_interval: 500,
        lr_warmup_iters: 100,
        lr_decay_from: iters * 7 / 10,
        track_jitter: jitter_arg.unwrap_or(0.3),
        seed: 0,
        ..TrainConfig::default()
    };

    let mut dataset = TrainDataset::default();
    for seed in 100..132u64 {
        let mut preset = ScenarioPreset::new(PresetKind::Easy, seed);
        preset.person_min = 4;
        preset.person_max = 4;
        let seq = generate(&preset).unwrap();
        for i in 1..seq.frames.len() {
            dataset.train.push(FramePairSample {
                frames: (seq.frames[i - 1].clone(), seq.frames[i].clone()),
                targets: (gt_to_targets(&seq.gt[i - 1]), gt_to_targets(&seq.gt[i])),
            });
        }
    }
    {
        let preset = ScenarioPreset::new(PresetKind::Easy, 150);
        let seq = generate(&preset).unwrap();
        for i in 1..seq.frames.len().min(11) {
            dataset.val.push(FramePairSample {
                frames: (seq.frames[i - 1].clone(), seq.frames[i].clone()),
                targets: (gt_to_targets(&seq.gt[i - 1]), gt_to_targets(&seq.gt[i])),
            });
        }
    }

    let dir = std::env::temp_dir().join("diffmot_accept_dress");
    std::fs::create_dir_all(&dir).unwrap();
    let t0 = Instant::now();
    let report = train(
        &dataset,
        model,
        &cfg,
        &schedule,
        &dir.join("dress.ckpt"),
        &dir.join("dress_log.csv"),
    )
    .unwrap();
    println!(
        "trained {} iters in {:.1} min, best val {:.3}",
        report.iterations,
        t0.elapsed().as_secs_f64() / 60.0,
        report.best_val_loss
    );

    let eval_cfg = EvalConfig::default();
    let run = |seed: u64, kind: PresetKind, label: &str, params: &diffmot::nets::ModelParams| {
        let seq = generate(&ScenarioPreset::new(kind, seed)).unwrap();
        let mut tracker = Tracker::new(
            DiffusionNet {
                params: params.clone(),
            },
            TrackerConfig::default(),
        );
        let _ = &model;
        let mut rng = Rng::derive(seed, 0x77ac);
        let hyp: Vec<Vec<(i64, BBox)>> = seq
            .frames
            .iter()
            .map(|f| {
                tracker
                    .step(f, &mut rng)
                    .unwrap()
                    .detections
                    .iter()
                    .map(|&(id, b, _)| (id as i64, b))
                    .collect()
            })
            .collect();
        let gt: Vec<Vec<(i64, BBox)>> = seq
            .gt
            .iter()
            .map(|e| e.iter().map(|x| (x.id as i64, x.bbox)).collect())
            .collect();
        let counts = evaluate_sequence(&gt, &hyp, &eval_cfg).unwrap();
        println!(
            "{label}: MOTA {:?} MOTP {:?} | {counts:?}",
            mota(&counts).map(|v| (v * 10.0).round() / 10.0),
            motp(&counts).map(|v| (v * 10.0).round() / 10.0)
        );
        (seq, counts)
    };

    run(200, PresetKind::Easy, "easy-200", &report.params);
    run(201, PresetKind::Easy, "easy-201", &report.params);
    let (occl_seq, _) = run(300, PresetKind::Occlusion, "occl-300", &report.params);

    // baseline on corrupted detections
    let visible: Vec<_> = occl_seq.gt.iter().map(|e| visible_targets(e)).collect();
    let mut det_rng = Rng::from_seed(5);
    let noise = DetectionNoise {
        jitter_std: 0.0,
        drop_prob: 0.2,
        clutter_rate: 0.0,
    };
    let detections = corrupt_detections(&visible, &noise, &mut det_rng);
    let sort_hyp: Vec<Vec<(i64, BBox)>> = diffmot::baseline::sort_track_sequence(
        &detections,
        &diffmot::baseline::SortConfig::default(),
    )
    .iter()
    .map(|f| f.iter().map(|&(id, b)| (id as i64, b)).collect())
    .collect();
    let gt: Vec<Vec<(i64, BBox)>> = occl_seq
        .gt
        .iter()
        .map(|e| e.iter().map(|x| (x.id as i64, x.bbox)).collect())
        .collect();
    let sort_counts = evaluate_sequence(&gt, &sort_hyp, &eval_cfg).unwrap();
    println!(
        "sort-occl: MOTA {:?} | {sort_counts:?}",
        mota(&sort_counts).map(|v| (v * 10.0).round() / 10.0)
    );
}
