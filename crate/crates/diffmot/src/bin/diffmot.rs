use diffmot::cli::dispatch;
use diffmot::config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

const USAGE: &str = "\
diffmot <subcommand> [--config FILE] [--<key> <value>]...

Subcommands:
  synth      generate a synthetic sequence (PPM frames, gt.csv, det.csv)
  train      train a model from --data-dir (train/ and val/ sequence dirs)
  track      run the tracker: --checkpoint + --frames-dir -> hyp.csv
  baseline   Kalman-filter baseline: --detections-path -> sort_hyp.csv
  eval       CLEAR MOT metrics: --gt-path + --hyp-path -> metrics.csv
  compare    relative improvement between two metrics CSVs (--compare-a, --compare-b)

Flags are configuration keys with hyphens (e.g. --latent-dim 288 sets
latent_dim) and override values from --config. Unknown keys are errors.
Every run writes run.json into --out-dir; re-running with
--config run.json reproduces the outputs byte-identically.
DIFFMOT_THREADS caps parallel workers.
";

fn parse_args() -> Result<(String, Option<PathBuf>, Vec<(String, String)>), String> {
    let mut args = std::env::args().skip(1);
    let subcommand = match args.next() {
        Some(s) if s == "--help" || s == "-h" => return Err(USAGE.to_string()),
        Some(s) => s,
        None => return Err(USAGE.to_string()),
    };
    let mut config = None;
    let mut overrides = Vec::new();
    while let Some(arg) = args.next() {
        if arg == "--help" || arg == "-h" {
            return Err(USAGE.to_string());
        }
        let Some(key) = arg.strip_prefix("--") else {
            return Err(format!("unexpected argument '{arg}'\n\n{USAGE}"));
        };
        let value = args
            .next()
            .ok_or_else(|| format!("flag --{key} needs a value"))?;
        if key == "config" {
            config = Some(PathBuf::from(value));
        } else {
            overrides.push((key.replace('-', "_"), value));
        }
    }
    Ok((subcommand, config, overrides))
}

fn main() -> ExitCode {
    let (subcommand, config_path, overrides) = match parse_args() {
        Ok(parts) => parts,
        Err(msg) => {
            eprintln!("{msg}");
            return ExitCode::FAILURE;
        }
    };
    let cfg = match RunConfig::parse(config_path.as_deref(), &overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match dispatch(&subcommand, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
