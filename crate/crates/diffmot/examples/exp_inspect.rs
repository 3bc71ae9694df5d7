// load a trained checkpoint and dump per-frame tracker dynamics
use diffmot::geom::{iou, BBox};
use diffmot::ndgrad::Rng;
use diffmot::nets::{load_checkpoint, ModelConfig, ModelParams};
use diffmot::synthworld::{generate, PresetKind, ScenarioPreset};
use diffmot::tracker::{DiffusionNet, Tracker, TrackerConfig};

fn main() {
    let ckpt = std::env::temp_dir().join("diffmot_accept_dress/dress.ckpt");
    let values = load_checkpoint(&ckpt).unwrap();
    let params = ModelParams::from_values(ModelConfig::default(), values).unwrap();

    let gate: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let seq = generate(&ScenarioPreset::new(PresetKind::Easy, 200)).unwrap();
    let mut cfg = TrackerConfig::default();
    cfg.refresh_gate = gate;
    cfg.refine_steps = steps;
    let mut tracker = Tracker::new(DiffusionNet { params }, cfg);
    let mut rng = Rng::derive(200, 0x77ac);
    for (f, frame) in seq.frames.iter().enumerate().take(25) {
        let r = tracker.step(frame, &mut rng).unwrap();
        let gt_str: Vec<String> = seq.gt[f]
            .iter()
            .map(|e| format!("g{}@({:.2},{:.2})", e.id, e.bbox.cx, e.bbox.cy))
            .collect();
        let det_str: Vec<String> = r
            .detections
            .iter()
            .map(|&(id, b, s)| {
                let best: f64 = seq.gt[f]
                    .iter()
                    .map(|e| iou(&e.bbox, &b))
                    .fold(0.0, f64::max);
                format!("t{id}@({:.2},{:.2})s{:.2}iou{:.2}", b.cx, b.cy, s, best)
            })
            .collect();
        let states: Vec<String> = tracker
            .tracks
            .tracks
            .iter()
            .map(|t| {
                format!(
                    "{}{}",
                    t.id,
                    if t.is_active() { "A" } else { "i" }
                )
            })
            .collect();
        println!("f{f:02} gt[{}] det[{}] tracks[{}]", gt_str.join(" "), det_str.join(" "), states.join(","));
    }
    // full-sequence metrics with the same gate
    let mut cfg2 = TrackerConfig::default();
    cfg2.refresh_gate = gate;
    cfg2.refine_steps = steps;
    let values2 = load_checkpoint(&ckpt).unwrap();
    let params2 = ModelParams::from_values(ModelConfig::default(), values2).unwrap();
    let mut tracker = Tracker::new(DiffusionNet { params: params2 }, cfg2);
    let mut rng = Rng::derive(200, 0x77ac);
    let mut hyp: Vec<Vec<(i64, BBox)>> = Vec::new();
    for frame in &seq.frames {
        let r = tracker.step(frame, &mut rng).unwrap();
        hyp.push(r.detections.iter().map(|&(id, b, _)| (id as i64, b)).collect());
    }
    let gt: Vec<Vec<(i64, BBox)>> = seq
        .gt
        .iter()
        .map(|e| e.iter().map(|x| (x.id as i64, x.bbox)).collect())
        .collect();
    let counts =
        diffmot::clearmot::evaluate_sequence(&gt, &hyp, &diffmot::clearmot::EvalConfig::default())
            .unwrap();
    println!("gate {gate}: counts {counts:?}");
    println!(
        "gate {gate}: MOTA {:?} MOTP {:?}",
        diffmot::clearmot::mota(&counts),
        diffmot::clearmot::motp(&counts)
    );
}
