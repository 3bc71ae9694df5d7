//! Run configuration: documented defaults, a flat JSON config file, and
//! command-line overrides, in that precedence order. Unknown keys are
//! rejected so typos never pass silently.

use crate::assign::LossWeights;
use crate::baseline::{KfNoise, SortConfig};
use crate::clearmot::EvalConfig;
use crate::diffusion::ScheduleKind;
use crate::nets::ModelConfig;
use crate::synthworld::{DetectionNoise, PresetKind, ScenarioPreset};
use crate::tracker::TrackerConfig;
use crate::trainer::TrainConfig;
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("type mismatch for '{key}': expected {expected}, got {got}")]
    TypeMismatch {
        key: String,
        expected: &'static str,
        got: String,
    },
    #[error("invalid value for '{key}': {detail}")]
    InvalidValue { key: String, detail: String },
    #[error("required path '{key}' is not set")]
    MissingPath { key: &'static str },
    #[error("config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("config file is not a JSON object: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    UInt,
    Float,
    Str,
}

struct KeySpec {
    key: &'static str,
    kind: Kind,
    default: Value,
}

fn uint(key: &'static str, v: u64) -> KeySpec {
    KeySpec {
        key,
        kind: Kind::UInt,
        default: Value::from(v),
    }
}

fn float(key: &'static str, v: f64) -> KeySpec {
    KeySpec {
        key,
        kind: Kind::Float,
        default: Value::from(v),
    }
}

fn string(key: &'static str, v: &str) -> KeySpec {
    KeySpec {
        key,
        kind: Kind::Str,
        default: Value::from(v),
    }
}

/// Every documented key with its type and default.
fn key_table() -> Vec<KeySpec> {
    vec![
        // model
        uint("latent_dim", 32),
        uint("n_ns", 64),
        uint("patch_size", 8),
        uint("image_h", 64),
        uint("image_w", 64),
        uint("encoder_layers", 2),
        uint("decoder_layers", 2),
        uint("attention_heads", 4),
        uint("ffn_hidden", 64),
        // diffusion
        uint("diffusion_steps", 10),
        float("beta_start", 1e-4),
        float("beta_end", 0.02),
        string("schedule", "linear"),
        // loss
        float("lambda_cls", 2.0),
        float("lambda_l1", 5.0),
        float("lambda_giou", 2.0),
        // training
        float("lr_backbone", 1e-5),
        float("lr_transformer", 1e-4),
        uint("batch_size", 1),
        uint("max_iters", 2000),
        uint("early_stop_patience", 0),
        uint("val_interval", 100),
        float("weight_decay", 0.0),
        uint("lr_warmup_iters", 0),
        uint("lr_decay_from", 0),
        float("track_jitter", 0.3),
        // tracker lifecycle
        float("sigma_cls", 0.4),
        float("sigma_iou", 0.9),
        uint("n_reid", 5),
        uint("refine_steps", 1),
        uint("history_depth", 1),
        float("refresh_gate", 0.0),
        // evaluation
        float("iou_gate", 0.5),
        // synthetic scenarios
        string("preset", "easy"),
        uint("seq_len", 60),
        uint("person_min", 2),
        uint("person_max", 4),
        float("speed_min", 0.003),
        float("speed_max", 0.01),
        uint("occlusion_gap", 4),
        float("occlusion_overlap", 0.6),
        float("pixel_noise", 0.0),
        // detector corruption for the baseline feed
        float("det_jitter_std", 0.01),
        float("det_drop_prob", 0.1),
        float("det_clutter_rate", 0.0),
        // baseline association
        float("sort_iou_threshold", 0.3),
        uint("sort_max_age", 3),
        uint("sort_min_hits", 1),
        // paths
        string("out_dir", "out"),
        string("checkpoint", ""),
        string("data_dir", ""),
        string("frames_dir", ""),
        string("gt_path", ""),
        string("hyp_path", ""),
        string("detections_path", ""),
        string("compare_a", ""),
        string("compare_b", ""),
        // bookkeeping
        uint("seed", 0),
        string("subcommand", ""),
        string("artifact_version", env!("CARGO_PKG_VERSION")),
    ]
}

/// Resolved configuration for one run. Tracks which keys were set
/// explicitly so scenario presets can keep their per-kind defaults unless
/// the user overrides them.
#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, Value>,
    explicit: BTreeSet<String>,
}

impl RunConfig {
    /// Defaults, overlaid by an optional JSON file, overlaid by flag
    /// overrides.
    pub fn parse(
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<RunConfig, ConfigError> {
        let table = key_table();
        let mut values: BTreeMap<String, Value> = table
            .iter()
            .map(|s| (s.key.to_string(), s.default.clone()))
            .collect();
        let kind_of: BTreeMap<&str, Kind> = table.iter().map(|s| (s.key, s.kind)).collect();
        let mut explicit = BTreeSet::new();

        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let parsed: BTreeMap<String, Value> = serde_json::from_str(&text)?;
            for (key, value) in parsed {
                let kind = *kind_of
                    .get(key.as_str())
                    .ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
                values.insert(key.clone(), coerce(&key, kind, value)?);
                explicit.insert(key);
            }
        }

        for (key, raw) in overrides {
            let kind = *kind_of
                .get(key.as_str())
                .ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
            let value = parse_flag(key, kind, raw)?;
            values.insert(key.clone(), value);
            explicit.insert(key.clone());
        }

        values.insert(
            "artifact_version".into(),
            Value::from(env!("CARGO_PKG_VERSION")),
        );
        Ok(RunConfig { values, explicit })
    }

    pub fn uint(&self, key: &str) -> usize {
        self.values[key].as_u64().expect("typed at parse") as usize
    }

    pub fn float(&self, key: &str) -> f64 {
        self.values[key].as_f64().expect("typed at parse")
    }

    pub fn str(&self, key: &str) -> &str {
        self.values[key].as_str().expect("typed at parse")
    }

    pub fn required_path(&self, key: &'static str) -> Result<&str, ConfigError> {
        let v = self.str(key);
        if v.is_empty() {
            return Err(ConfigError::MissingPath { key });
        }
        Ok(v)
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn seed(&self) -> u64 {
        self.uint("seed") as u64
    }

    /// Serialize the resolved configuration (used for the run manifest).
    pub fn manifest_json(&self, subcommand: &str) -> String {
        let mut out = self.values.clone();
        out.insert("subcommand".into(), Value::from(subcommand));
        serde_json::to_string_pretty(&out).expect("plain map serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            latent_dim: self.uint("latent_dim"),
            n_ns: self.uint("n_ns"),
            patch_size: self.uint("patch_size"),
            image_h: self.uint("image_h"),
            image_w: self.uint("image_w"),
            encoder_layers: self.uint("encoder_layers"),
            decoder_layers: self.uint("decoder_layers"),
            attention_heads: self.uint("attention_heads"),
            ffn_hidden: self.uint("ffn_hidden"),
        }
    }

    pub fn schedule_kind(&self) -> Result<ScheduleKind, ConfigError> {
        match self.str("schedule") {
            "linear" => Ok(ScheduleKind::Linear),
            "constant" => Ok(ScheduleKind::Constant),
            other => Err(ConfigError::InvalidValue {
                key: "schedule".into(),
                detail: format!("'{other}' is not linear|constant"),
            }),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_cls: self.float("lambda_cls"),
            lambda_l1: self.float("lambda_l1"),
            lambda_giou: self.float("lambda_giou"),
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr_backbone: self.float("lr_backbone"),
            lr_transformer: self.float("lr_transformer"),
            batch_size: self.uint("batch_size"),
            weights: self.loss_weights(),
            max_iters: self.uint("max_iters"),
            early_stop_patience: self.uint("early_stop_patience"),
            val_interval: self.uint("val_interval"),
            weight_decay: self.float("weight_decay"),
            lr_warmup_iters: self.uint("lr_warmup_iters"),
            lr_decay_from: self.uint("lr_decay_from"),
            track_jitter: self.float("track_jitter"),
            sigma_cls: self.float("sigma_cls"),
            sigma_iou: self.float("sigma_iou"),
            seed: self.seed(),
        }
    }

    pub fn tracker(&self) -> TrackerConfig {
        TrackerConfig {
            sigma_cls: self.float("sigma_cls"),
            sigma_iou: self.float("sigma_iou"),
            n_reid: self.uint("n_reid"),
            refine_steps: self.uint("refine_steps"),
            history_depth: self.uint("history_depth"),
            refresh_gate: self.float("refresh_gate"),
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            iou_gate: self.float("iou_gate"),
        }
    }

    pub fn preset(&self) -> Result<ScenarioPreset, ConfigError> {
        let kind = PresetKind::parse(self.str("preset")).ok_or_else(|| {
            ConfigError::InvalidValue {
                key: "preset".into(),
                detail: format!(
                    "'{}' is not easy|crossing|occlusion|crowd",
                    self.str("preset")
                ),
            }
        })?;
        let mut preset = ScenarioPreset::new(kind, self.seed());
        preset.frame_w = self.uint("image_w");
        preset.frame_h = self.uint("image_h");
        if self.is_explicit("seq_len") {
            preset.seq_len = self.uint("seq_len");
        }
        if self.is_explicit("person_min") {
            preset.person_min = self.uint("person_min");
        }
        if self.is_explicit("person_max") {
            preset.person_max = self.uint("person_max");
        }
        if self.is_explicit("speed_min") {
            preset.speed_min = self.float("speed_min");
        }
        if self.is_explicit("speed_max") {
            preset.speed_max = self.float("speed_max");
        }
        if self.is_explicit("occlusion_gap") {
            preset.occlusion_gap = self.uint("occlusion_gap");
        }
        if self.is_explicit("occlusion_overlap") {
            preset.occlusion_overlap = self.float("occlusion_overlap");
        }
        if self.is_explicit("pixel_noise") {
            preset.pixel_noise = self.float("pixel_noise");
        }
        Ok(preset)
    }

    pub fn detection_noise(&self) -> DetectionNoise {
        DetectionNoise {
            jitter_std: self.float("det_jitter_std"),
            drop_prob: self.float("det_drop_prob"),
            clutter_rate: self.float("det_clutter_rate"),
        }
    }

    pub fn sort(&self) -> SortConfig {
        SortConfig {
            iou_threshold: self.float("sort_iou_threshold"),
            max_age: self.uint("sort_max_age"),
            min_hits: self.uint("sort_min_hits"),
            noise: KfNoise::default(),
        }
    }
}

fn coerce(key: &str, kind: Kind, value: Value) -> Result<Value, ConfigError> {
    let mismatch = |expected: &'static str, got: &Value| ConfigError::TypeMismatch {
        key: key.to_string(),
        expected,
        got: got.to_string(),
    };
    match kind {
        Kind::UInt => {
            if value.as_u64().is_some() {
                Ok(value)
            } else {
                Err(mismatch("non-negative integer", &value))
            }
        }
        Kind::Float => match value.as_f64() {
            Some(f) => Ok(Value::from(f)),
            None => Err(mismatch("number", &value)),
        },
        Kind::Str => {
            if value.is_string() {
                Ok(value)
            } else {
                Err(mismatch("string", &value))
            }
        }
    }
}

fn parse_flag(key: &str, kind: Kind, raw: &str) -> Result<Value, ConfigError> {
    let mismatch = |expected: &'static str| ConfigError::TypeMismatch {
        key: key.to_string(),
        expected,
        got: format!("'{raw}'"),
    };
    match kind {
        Kind::UInt => raw
            .parse::<u64>()
            .map(Value::from)
            .map_err(|_| mismatch("non-negative integer")),
        Kind::Float => raw
            .parse::<f64>()
            .map(Value::from)
            .map_err(|_| mismatch("number")),
        Kind::Str => Ok(Value::from(raw)),
    }
}
