//! Command-line surface: `synth`, `train`, `track`, `baseline`, `eval`,
//! and `compare`, all driven by one resolved configuration.
//!
//! Every run writes a `run.json` manifest of the resolved configuration;
//! re-running with `--config run.json` reproduces the outputs
//! byte-identically. `DIFFMOT_THREADS` caps the worker count where
//! sequences are processed in parallel.

use crate::baseline::sort_track_sequence;
use crate::clearmot::{evaluate_sequence, format_improvement, Report, SequenceMetrics};
use crate::config::{ConfigError, RunConfig};
use crate::diffusion::build_schedule;
use crate::geom::BBox;
use crate::ndgrad::Rng;
use crate::nets::{load_checkpoint, ModelParams};
use crate::synthworld::{
    corrupt_detections, export_sequence, generate, mot_csv_read, mot_csv_write,
    ppm_read, visible_targets, Frame, MotRow, SynthError,
};
use crate::tracker::{DiffusionNet, Tracker};
use crate::trainer::{train, FramePairSample, TrainDataset};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("unknown subcommand '{0}' (expected synth|train|track|baseline|eval|compare)")]
    UnknownSubcommand(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Net(#[from] crate::nets::NetError),
    #[error(transparent)]
    Trainer(#[from] crate::trainer::TrainerError),
    #[error(transparent)]
    Tracker(#[from] crate::tracker::TrackerError),
    #[error(transparent)]
    Eval(#[from] crate::clearmot::EvalError),
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Worker cap: `DIFFMOT_THREADS` when set and positive, otherwise the
/// machine's available parallelism.
pub fn worker_cap() -> usize {
    std::env::var("DIFFMOT_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Order-preserving parallel map over independent items, bounded by the
/// worker cap.
pub fn parallel_map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let workers = worker_cap().min(items.len().max(1));
    if workers <= 1 {
        return items.into_iter().map(f).collect();
    }
    let indexed: Vec<(usize, T)> = items.into_iter().enumerate().collect();
    let mut results: Vec<Option<R>> = Vec::new();
    results.resize_with(indexed.len(), || None);
    let chunk = indexed.len().div_ceil(workers);
    let slots: Vec<(usize, Option<R>)> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        let f = &f;
        let mut rest = indexed;
        while !rest.is_empty() {
            let take = chunk.min(rest.len());
            let batch: Vec<(usize, T)> = rest.drain(..take).collect();
            handles.push(scope.spawn(move || {
                batch
                    .into_iter()
                    .map(|(i, item)| (i, Some(f(item))))
                    .collect::<Vec<_>>()
            }));
        }
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    for (i, r) in slots {
        results[i] = r;
    }
    results.into_iter().map(|r| r.expect("all slots filled")).collect()
}

fn write_manifest(cfg: &RunConfig, subcommand: &str, out_dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("run.json"), cfg.manifest_json(subcommand))?;
    Ok(())
}

/// Run one subcommand against a resolved configuration. Returns only when
/// every artifact has been written.
pub fn dispatch(subcommand: &str, cfg: &RunConfig) -> Result<(), CliError> {
    match subcommand {
        "synth" => run_synth(cfg),
        "train" => run_train(cfg),
        "track" => run_track(cfg),
        "baseline" => run_baseline(cfg),
        "eval" => run_eval(cfg),
        "compare" => run_compare(cfg),
        other => Err(CliError::UnknownSubcommand(other.to_string())),
    }
}

/// Emit one synthetic sequence: PPM frames, ground-truth CSV, and a
/// corrupted detection CSV for the baseline.
fn run_synth(cfg: &RunConfig) -> Result<(), CliError> {
    let out_dir = PathBuf::from(cfg.str("out_dir"));
    let preset = cfg.preset()?;
    let seq = generate(&preset)?;
    std::fs::create_dir_all(&out_dir)?;
    export_sequence(&seq, preset.frame_w, preset.frame_h, &out_dir)?;

    // detector stand-in: corrupt the visible ground truth
    let visible: Vec<_> = seq.gt.iter().map(|e| visible_targets(e)).collect();
    let mut det_rng = Rng::derive(cfg.seed(), 0xde7);
    let detections = corrupt_detections(&visible, &cfg.detection_noise(), &mut det_rng);
    let det_rows: Vec<Vec<MotRow>> = detections
        .iter()
        .map(|frame| {
            frame
                .iter()
                .map(|&bbox| MotRow {
                    id: -1,
                    bbox,
                    conf: 1.0,
                })
                .collect()
        })
        .collect();
    mot_csv_write(
        &det_rows,
        preset.frame_w,
        preset.frame_h,
        &out_dir.join("det.csv"),
    )?;
    write_manifest(cfg, "synth", &out_dir)?;
    Ok(())
}

fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Invalid(format!(
            "no sequence directories under {}",
            root.display()
        )));
    }
    Ok(dirs)
}

fn load_frames(dir: &Path) -> Result<Vec<Frame>, CliError> {
    let frames_dir = dir.join("frames");
    let root = if frames_dir.is_dir() { frames_dir } else { dir.to_path_buf() };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Invalid(format!(
            "no .ppm frames under {}",
            root.display()
        )));
    }
    paths.iter().map(|p| Ok(ppm_read(p)?)).collect()
}

/// Load one exported sequence directory into training samples.
fn load_samples(dir: &Path) -> Result<Vec<FramePairSample>, CliError> {
    let frames = load_frames(dir)?;
    let (w, h) = (frames[0].width, frames[0].height);
    let gt = mot_csv_read(&dir.join("gt.csv"), w, h)?;
    let targets: Vec<_> = gt
        .iter()
        .map(|rows| {
            crate::assign::TargetSet::new(
                rows.iter()
                    .map(|r| crate::assign::Target {
                        id: r.id.max(0) as u64,
                        class: crate::assign::PERSON,
                        bbox: r.bbox,
                    })
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Invalid(format!("{}: {e}", dir.display())))?;
    let n = frames.len().min(targets.len());
    Ok((1..n)
        .map(|i| FramePairSample {
            frames: (frames[i - 1].clone(), frames[i].clone()),
            targets: (targets[i - 1].clone(), targets[i].clone()),
        })
        .collect())
}

/// Train from a data directory holding `train/` and `val/` sequence
/// subdirectories; write the checkpoint and training log.
fn run_train(cfg: &RunConfig) -> Result<(), CliError> {
    let data_dir = PathBuf::from(cfg.required_path("data_dir")?);
    let out_dir = PathBuf::from(cfg.str("out_dir"));
    std::fs::create_dir_all(&out_dir)?;

    let mut dataset = TrainDataset::default();
    for dir in sequence_dirs(&data_dir.join("train"))? {
        dataset.train.extend(load_samples(&dir)?);
    }
    for dir in sequence_dirs(&data_dir.join("val"))? {
        dataset.val.extend(load_samples(&dir)?);
    }

    let schedule = build_schedule(
        cfg.uint("diffusion_steps"),
        cfg.float("beta_start"),
        cfg.float("beta_end"),
        cfg.schedule_kind()?,
    )?;
    let checkpoint = if cfg.str("checkpoint").is_empty() {
        out_dir.join("model.ckpt")
    } else {
        PathBuf::from(cfg.str("checkpoint"))
    };
    let report = train(
        &dataset,
        cfg.model(),
        &cfg.train(),
        &schedule,
        &checkpoint,
        &out_dir.join("train_log.csv"),
    )?;
    println!(
        "trained {} iterations, best validation loss {:.6}",
        report.iterations, report.best_val_loss
    );
    write_manifest(cfg, "train", &out_dir)?;
    Ok(())
}

/// Track frames with a trained checkpoint, writing hypothesis CSV.
fn run_track(cfg: &RunConfig) -> Result<(), CliError> {
    let frames_dir = PathBuf::from(cfg.required_path("frames_dir")?);
    let checkpoint = PathBuf::from(cfg.required_path("checkpoint")?);
    let out_dir = PathBuf::from(cfg.str("out_dir"));
    std::fs::create_dir_all(&out_dir)?;

    let frames = load_frames(&frames_dir)?;
    let values = load_checkpoint(&checkpoint)?;
    let params = ModelParams::from_values(cfg.model(), values)?;
    let mut tracker = Tracker::new(DiffusionNet { params }, cfg.tracker());
    let mut rng = Rng::derive(cfg.seed(), 0x77ac);

    let mut rows: Vec<Vec<MotRow>> = Vec::with_capacity(frames.len());
    for frame in &frames {
        let result = tracker.step(frame, &mut rng)?;
        rows.push(
            result
                .detections
                .iter()
                .map(|&(id, bbox, score)| MotRow {
                    id: id as i64,
                    bbox,
                    conf: score,
                })
                .collect(),
        );
    }
    let (w, h) = (frames[0].width, frames[0].height);
    mot_csv_write(&rows, w, h, &out_dir.join("hyp.csv"))?;
    write_manifest(cfg, "track", &out_dir)?;
    Ok(())
}

/// Run the Kalman-filter baseline over a detections CSV.
fn run_baseline(cfg: &RunConfig) -> Result<(), CliError> {
    let det_path = PathBuf::from(cfg.required_path("detections_path")?);
    let out_dir = PathBuf::from(cfg.str("out_dir"));
    std::fs::create_dir_all(&out_dir)?;
    let (w, h) = (cfg.uint("image_w"), cfg.uint("image_h"));
    let det_frames = mot_csv_read(&det_path, w, h)?;
    let boxes: Vec<Vec<BBox>> = det_frames
        .iter()
        .map(|rows| rows.iter().map(|r| r.bbox).collect())
        .collect();
    let tracked = sort_track_sequence(&boxes, &cfg.sort());
    let rows: Vec<Vec<MotRow>> = tracked
        .iter()
        .map(|frame| {
            frame
                .iter()
                .map(|&(id, bbox)| MotRow {
                    id: id as i64,
                    bbox,
                    conf: 1.0,
                })
                .collect()
        })
        .collect();
    mot_csv_write(&rows, w, h, &out_dir.join("sort_hyp.csv"))?;
    write_manifest(cfg, "baseline", &out_dir)?;
    Ok(())
}

fn csv_to_id_boxes(rows: &[Vec<MotRow>]) -> Vec<Vec<(i64, BBox)>> {
    rows.iter()
        .map(|frame| frame.iter().map(|r| (r.id, r.bbox)).collect())
        .collect()
}

/// Evaluate hypothesis CSVs against ground truth. Accepts either two CSV
/// files or two directories holding same-named per-sequence CSVs;
/// sequences are evaluated in parallel up to the worker cap.
fn run_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let gt_path = PathBuf::from(cfg.required_path("gt_path")?);
    let hyp_path = PathBuf::from(cfg.required_path("hyp_path")?);
    let out_dir = PathBuf::from(cfg.str("out_dir"));
    std::fs::create_dir_all(&out_dir)?;
    let (w, h) = (cfg.uint("image_w"), cfg.uint("image_h"));

    let pairs: Vec<(String, PathBuf, PathBuf)> = if gt_path.is_dir() {
        let mut names: Vec<String> = std::fs::read_dir(&gt_path)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect();
        names.sort();
        names
            .into_iter()
            .map(|name| {
                let stem = name.trim_end_matches(".csv").to_string();
                (stem, gt_path.join(&name), hyp_path.join(&name))
            })
            .collect()
    } else {
        let stem = gt_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".into());
        vec![(stem, gt_path.clone(), hyp_path.clone())]
    };

    let eval_cfg = cfg.eval();
    let results: Vec<Result<SequenceMetrics, CliError>> = parallel_map(pairs, |(name, g, hp)| {
        let gt = csv_to_id_boxes(&mot_csv_read(&g, w, h)?);
        let hyp = csv_to_id_boxes(&mot_csv_read(&hp, w, h)?);
        let counts = evaluate_sequence(&gt, &hyp, &eval_cfg)?;
        Ok(SequenceMetrics { name, counts })
    });
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let report = Report { rows };
    print!("{}", report.to_text());
    std::fs::write(out_dir.join("metrics.csv"), report.to_csv())?;
    write_manifest(cfg, "eval", &out_dir)?;
    Ok(())
}

fn read_metrics_csv(path: &Path) -> Result<BTreeMap<String, Vec<(String, f64)>>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Invalid(format!("{}: empty metrics file", path.display())))?;
    let columns: Vec<&str> = header.split(',').collect();
    let mut out = BTreeMap::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(CliError::Invalid(format!(
                "{}: ragged metrics row '{line}'",
                path.display()
            )));
        }
        let mut metrics = Vec::new();
        for (name, value) in columns.iter().zip(&fields).skip(1) {
            if let Ok(v) = value.parse::<f64>() {
                metrics.push((name.to_string(), v));
            }
        }
        out.insert(fields[0].to_string(), metrics);
    }
    Ok(out)
}

/// Relative-improvement report between two metric tables (ours vs
/// baseline), per sequence and metric.
fn run_compare(cfg: &RunConfig) -> Result<(), CliError> {
    let a_path = PathBuf::from(cfg.required_path("compare_a")?);
    let b_path = PathBuf::from(cfg.required_path("compare_b")?);
    let out_dir = PathBuf::from(cfg.str("out_dir"));
    std::fs::create_dir_all(&out_dir)?;

    let ours = read_metrics_csv(&a_path)?;
    let baseline = read_metrics_csv(&b_path)?;
    let mut out = String::new();
    for (seq, metrics) in &ours {
        let Some(base_metrics) = baseline.get(seq) else {
            continue;
        };
        for (metric, value) in metrics {
            let Some((_, base)) = base_metrics.iter().find(|(m, _)| m == metric) else {
                continue;
            };
            if *base == 0.0 {
                continue;
            }
            out.push_str(&format!(
                "{seq} {metric}: {value} vs {base} -> {}\n",
                format_improvement(*value, *base)
            ));
        }
    }
    print!("{out}");
    std::fs::write(out_dir.join("compare.txt"), out)?;
    write_manifest(cfg, "compare", &out_dir)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<usize> = (0..23).collect();
        let out = parallel_map(items, |x| x * 2);
        assert_eq!(out, (0..23).map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn unknown_subcommand_rejected() {
        let cfg = RunConfig::parse(None, &[]).unwrap();
        assert!(matches!(
            dispatch("tarck", &cfg),
            Err(CliError::UnknownSubcommand(_))
        ));
    }
}
