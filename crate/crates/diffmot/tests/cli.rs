//! End-to-end command-line flows through the dispatch API: generation
//! determinism, evaluation on known fixtures, the baseline path, manifest
//! round-trips, and error reporting.

use diffmot::cli::dispatch;
use diffmot::config::RunConfig;
use std::path::{Path, PathBuf};

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("diffmot_cli_{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn cfg(pairs: &[(&str, &str)]) -> RunConfig {
    let overrides: Vec<(String, String)> = pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    RunConfig::parse(None, &overrides).unwrap()
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn synth_outputs_are_deterministic_per_seed() {
    let a = temp_dir("synth_a");
    let b = temp_dir("synth_b");
    for out in [&a, &b] {
        dispatch(
            "synth",
            &cfg(&[
                ("preset", "easy"),
                ("seed", "1"),
                ("seq_len", "12"),
                ("out_dir", out.to_str().unwrap()),
            ]),
        )
        .unwrap();
    }
    let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
    assert_eq!(ta.len(), tb.len());
    for ((name_a, bytes_a), (name_b, bytes_b)) in ta.iter().zip(&tb) {
        assert_eq!(name_a, name_b);
        if name_a == "run.json" {
            continue; // differs only in out_dir by construction
        }
        assert_eq!(bytes_a, bytes_b, "{name_a} differs between identical runs");
    }
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let dir = temp_dir("eval_perfect");
    dispatch(
        "synth",
        &cfg(&[
            ("preset", "crossing"),
            ("seed", "3"),
            ("seq_len", "10"),
            ("out_dir", dir.to_str().unwrap()),
        ]),
    )
    .unwrap();
    let gt = dir.join("gt.csv");
    let out = dir.join("eval");
    dispatch(
        "eval",
        &cfg(&[
            ("gt_path", gt.to_str().unwrap()),
            ("hyp_path", gt.to_str().unwrap()),
            ("out_dir", out.to_str().unwrap()),
        ]),
    )
    .unwrap();
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let row = metrics.lines().nth(1).unwrap();
    assert!(row.starts_with("gt,100.0,100.0,100.0,0,0,0,"), "{row}");
}

#[test]
fn baseline_tracks_clean_detections_well() {
    let dir = temp_dir("baseline_flow");
    dispatch(
        "synth",
        &cfg(&[
            ("preset", "easy"),
            ("seed", "5"),
            ("seq_len", "20"),
            ("det_drop_prob", "0.0"),
            ("det_jitter_std", "0.0"),
            ("det_clutter_rate", "0.0"),
            ("out_dir", dir.to_str().unwrap()),
        ]),
    )
    .unwrap();
    let out = dir.join("sort");
    dispatch(
        "baseline",
        &cfg(&[
            (
                "detections_path",
                dir.join("det.csv").to_str().unwrap(),
            ),
            ("out_dir", out.to_str().unwrap()),
        ]),
    )
    .unwrap();
    let eval_out = dir.join("eval");
    dispatch(
        "eval",
        &cfg(&[
            ("gt_path", dir.join("gt.csv").to_str().unwrap()),
            ("hyp_path", out.join("sort_hyp.csv").to_str().unwrap()),
            ("out_dir", eval_out.to_str().unwrap()),
        ]),
    )
    .unwrap();
    let metrics = std::fs::read_to_string(eval_out.join("metrics.csv")).unwrap();
    let row = metrics.lines().nth(1).unwrap();
    let mota: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
    assert!(
        mota >= 95.0,
        "baseline on noiseless detections should be near-perfect: {row}"
    );
}

#[test]
fn compare_reports_relative_improvement() {
    let dir = temp_dir("compare");
    let a = dir.join("a.csv");
    let b = dir.join("b.csv");
    std::fs::write(
        &a,
        "sequence,MOTA,MOTP,MOTP*,FP,FN,IDSW,GT\nKTP,92.7,93.1,91.7,1,1,0,100\n",
    )
    .unwrap();
    std::fs::write(
        &b,
        "sequence,MOTA,MOTP,MOTP*,FP,FN,IDSW,GT\nKTP,88.2,84.4,55.2,2,2,0,100\n",
    )
    .unwrap();
    let out = dir.join("out");
    dispatch(
        "compare",
        &cfg(&[
            ("compare_a", a.to_str().unwrap()),
            ("compare_b", b.to_str().unwrap()),
            ("out_dir", out.to_str().unwrap()),
        ]),
    )
    .unwrap();
    let report = std::fs::read_to_string(out.join("compare.txt")).unwrap();
    assert!(report.contains("KTP MOTA: 92.7 vs 88.2 -> +5.1%"), "{report}");
}

#[test]
fn rerunning_from_manifest_reproduces_outputs() {
    let first = temp_dir("manifest_first");
    dispatch(
        "synth",
        &cfg(&[
            ("preset", "occlusion"),
            ("seed", "8"),
            ("seq_len", "15"),
            ("out_dir", first.to_str().unwrap()),
        ]),
    )
    .unwrap();

    // re-run purely from the manifest, redirecting the output dir
    let second = temp_dir("manifest_second");
    let rc = RunConfig::parse(
        Some(&first.join("run.json")),
        &[("out_dir".to_string(), second.to_str().unwrap().to_string())],
    )
    .unwrap();
    dispatch("synth", &rc).unwrap();

    let (ta, tb) = (tree_bytes(&first), tree_bytes(&second));
    assert_eq!(ta.len(), tb.len());
    for ((name_a, bytes_a), (name_b, bytes_b)) in ta.iter().zip(&tb) {
        assert_eq!(name_a, name_b);
        if name_a == "run.json" {
            continue;
        }
        assert_eq!(bytes_a, bytes_b, "{name_a} differs after manifest re-run");
    }
}

/// Minimal train -> track -> eval round trip with a tiny model: exercises
/// the full dispatch surface including checkpoint reload.
#[test]
fn tiny_train_track_eval_round_trip() {
    let root = temp_dir("train_flow");
    let tiny: &[(&str, &str)] = &[
        ("latent_dim", "8"),
        ("n_ns", "6"),
        ("patch_size", "8"),
        ("image_h", "16"),
        ("image_w", "16"),
        ("attention_heads", "2"),
        ("encoder_layers", "1"),
        ("decoder_layers", "1"),
        ("ffn_hidden", "16"),
        ("seq_len", "4"),
        ("person_min", "2"),
        ("person_max", "2"),
    ];
    let with = |extra: &[(&str, &str)]| -> RunConfig {
        let mut all: Vec<(&str, &str)> = tiny.to_vec();
        all.extend_from_slice(extra);
        cfg(&all)
    };

    let train_seq = root.join("data/train/seq0");
    let val_seq = root.join("data/val/seq0");
    dispatch(
        "synth",
        &with(&[("seed", "21"), ("out_dir", train_seq.to_str().unwrap())]),
    )
    .unwrap();
    dispatch(
        "synth",
        &with(&[("seed", "22"), ("out_dir", val_seq.to_str().unwrap())]),
    )
    .unwrap();

    let run_dir = root.join("run");
    dispatch(
        "train",
        &with(&[
            ("data_dir", root.join("data").to_str().unwrap()),
            ("out_dir", run_dir.to_str().unwrap()),
            ("max_iters", "3"),
            ("val_interval", "2"),
        ]),
    )
    .unwrap();
    assert!(run_dir.join("model.ckpt").is_file());
    let log = std::fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert!(log.starts_with("iter,loss,val_loss\n"), "{log}");

    let track_dir = root.join("track");
    dispatch(
        "track",
        &with(&[
            ("checkpoint", run_dir.join("model.ckpt").to_str().unwrap()),
            ("frames_dir", train_seq.join("frames").to_str().unwrap()),
            ("out_dir", track_dir.to_str().unwrap()),
            ("image_h", "16"),
            ("image_w", "16"),
        ]),
    )
    .unwrap();
    assert!(track_dir.join("hyp.csv").is_file());

    // hypothesis may be empty at 3 iterations; eval must still run
    let eval_dir = root.join("eval");
    dispatch(
        "eval",
        &with(&[
            ("gt_path", train_seq.join("gt.csv").to_str().unwrap()),
            ("hyp_path", track_dir.join("hyp.csv").to_str().unwrap()),
            ("out_dir", eval_dir.to_str().unwrap()),
            ("image_h", "16"),
            ("image_w", "16"),
        ]),
    )
    .unwrap();
    let metrics = std::fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert!(metrics.lines().count() >= 2, "{metrics}");
}

#[test]
fn unknown_flag_is_rejected_with_its_name() {
    let err = RunConfig::parse(None, &[("latent_dmi".into(), "32".into())]).unwrap_err();
    assert!(err.to_string().contains("latent_dmi"));
}

#[test]
fn missing_required_path_is_reported() {
    let c = cfg(&[]);
    let err = dispatch("track", &c).unwrap_err();
    assert!(err.to_string().contains("frames_dir"), "{err}");
}

#[test]
fn worker_cap_honors_environment() {
    // the parallel map must produce identical results regardless of cap
    let items: Vec<usize> = (0..50).collect();
    let expected: Vec<usize> = items.iter().map(|x| x * 3).collect();
    let out = diffmot::cli::parallel_map(items, |x| x * 3);
    assert_eq!(out, expected);
}
