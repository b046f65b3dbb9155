//! Command-line surface and JSON config merging.
//!
//! A config file is a JSON object. Top-level scalar entries are global flags
//! (`seed`, `deterministic`, `manifest`); an object entry named after a
//! subcommand holds that subcommand's flags. Keys are flag names with either
//! `-` or `_`; `true` switches a flag on, arrays become comma-separated
//! lists. Flags given on the command line override the file.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use volprecip_core::collocate::MatchConfig;
use volprecip_core::losses::LossWeights;
use volprecip_core::synthgen::SynthConfig;

#[derive(Debug, Parser, Serialize)]
#[command(name = "volprecip", version, about = "Volumetric precipitation retrieval pipeline", args_override_self = true)]
pub struct Cli {
    /// Master seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Run all parallel sections on a single worker.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// JSON file with default flag values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Where to write the run manifest.
    #[arg(long, global = true, value_name = "PATH", default_value = "run_manifest.json")]
    pub manifest: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Write a synthetic dataset.
    #[command(args_override_self = true)]
    Generate(GenerateArgs),
    /// Integrate layer PWV from specific humidity on pressure levels.
    #[command(args_override_self = true)]
    Pwv(PwvArgs),
    /// Collocate scenes with point profiles into a dataset.
    #[command(args_override_self = true)]
    Collocate(CollocateArgs),
    /// Run the loss oracle and gradient suites.
    #[command(args_override_self = true)]
    LossCheck(LossCheckArgs),
    /// Train a model and write a checkpoint.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Sweep the PWV loss weight.
    #[command(args_override_self = true)]
    Ablate(AblateArgs),
    /// Run a checkpoint on a dataset.
    #[command(args_override_self = true)]
    Infer(InferArgs),
    /// Score predictions against a dataset.
    #[command(args_override_self = true)]
    Evaluate(EvaluateArgs),
    /// Stratify evaluation scores or summarize revisit gaps.
    #[command(args_override_self = true)]
    Report(ReportArgs),
}

impl Command {
    pub const NAMES: [&'static str; 9] = [
        "generate",
        "pwv",
        "collocate",
        "loss-check",
        "train",
        "ablate",
        "infer",
        "evaluate",
        "report",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Pwv(_) => "pwv",
            Command::Collocate(_) => "collocate",
            Command::LossCheck(_) => "loss-check",
            Command::Train(_) => "train",
            Command::Ablate(_) => "ablate",
            Command::Infer(_) => "infer",
            Command::Evaluate(_) => "evaluate",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 3)]
    pub cores: usize,
    #[arg(long, default_value_t = 0.15)]
    pub cirrus: f64,
    /// mm
    #[arg(long, default_value_t = 30.0)]
    pub gate_pwv: f64,
    /// K
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
}

impl GenerateArgs {
    pub fn synth_config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            h: self.height,
            w: self.width,
            n_cores: self.cores,
            cirrus_fraction: self.cirrus,
            gate_pwv: self.gate_pwv,
            noise_sigma: self.noise,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PwvArgs {
    /// Specific humidity, 19×H×W, kg/kg.
    #[arg(long, value_name = "FILE")]
    pub humidity: PathBuf,
    /// Output layer PWV, 18×H×W, mm.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Pressure levels in hPa, surface first; defaults to the standard 19.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub levels: Vec<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct CollocateArgs {
    /// Scene tensors (15×H×W) carrying a `time` metadata entry.
    #[arg(long = "scene", value_name = "FILE", value_delimiter = ',', num_args = 1.., required = true)]
    pub scenes: Vec<PathBuf>,
    /// Layer PWV tensors (18×H×W), one per scene, same order.
    #[arg(long = "pwv", value_name = "FILE", value_delimiter = ',', num_args = 1.., required = true)]
    pub pwv: Vec<PathBuf>,
    /// JSON-lines file, one observation per line.
    #[arg(long, value_name = "FILE")]
    pub points: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub radius_deg: f64,
    #[arg(long, default_value_t = 600.0)]
    pub window_s: f64,
}

impl CollocateArgs {
    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            radius_deg: self.radius_deg,
            window_s: self.window_s,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct LossCheckArgs {
    /// Random instances per gradient check.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    /// Also write the JSON report here.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args, Serialize)]
pub struct WeightArgs {
    #[arg(long, default_value_t = 1.0)]
    pub lambda_sens: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda_geo: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_scale: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lambda_struct: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_prob: f64,
    #[arg(long, default_value_t = 5.0)]
    pub lambda_pwv: f64,
}

impl WeightArgs {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_sens: self.lambda_sens,
            lambda_geo: self.lambda_geo,
            lambda_scale: self.lambda_scale,
            lambda_struct: self.lambda_struct,
            lambda_prob: self.lambda_prob,
            lambda_pwv: self.lambda_pwv,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Intensity-weighted sampling.
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub sampler: Switch,
    /// Channel divisor applied to the full-size model widths.
    #[arg(long, default_value_t = 8)]
    pub width_divisor: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Checkpoint directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub weights: WeightArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output stem; writes `<stem>.csv` and `<stem>.json`.
    #[arg(long, value_name = "STEM")]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = [0.0, 1.0, 5.0, 10.0])]
    pub lambdas: Vec<f64>,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub weights: WeightArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    #[arg(long, value_name = "DIR")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Prediction directory written by `infer`.
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,
    /// Reference dataset directory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output stem; writes `<stem>.csv/json` and `<stem>_regimes.csv/json`.
    #[arg(long, value_name = "STEM")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StratifyBy {
    Latitude,
    Longitude,
    Time,
}

#[derive(Debug, Args, Serialize)]
#[group(id = "source", required = true, multiple = false)]
pub struct ReportSource {
    /// Per-sample JSON written by `evaluate`.
    #[arg(long, value_name = "FILE", group = "source")]
    pub scores: Option<PathBuf>,
    /// JSON-lines overpasses (`time`, `coverage`), time-sorted.
    #[arg(long, value_name = "FILE", group = "source")]
    pub overpasses: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[command(flatten)]
    pub source: ReportSource,
    /// Output stem; writes `<stem>.csv` and `<stem>.json`.
    #[arg(long, value_name = "STEM")]
    pub out: PathBuf,
    /// Score column to stratify.
    #[arg(long, default_value = "CSI")]
    pub metric: String,
    #[arg(long, value_enum, default_value_t = StratifyBy::Latitude)]
    pub by: StratifyBy,
    /// Band width: degrees for latitude/longitude, seconds for time.
    #[arg(long, default_value_t = 5.0)]
    pub band: f64,
    /// Revisit gap threshold, seconds.
    #[arg(long, default_value_t = 15.0 * 86_400.0)]
    pub gap_threshold_s: f64,
}

/// Position of `--config` and its value in raw arguments.
fn find_config(argv: &[String]) -> Option<String> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(v.to_string());
        }
    }
    None
}

fn flag_tokens(map: &serde_json::Map<String, Value>, out: &mut Vec<String>) -> Result<(), String> {
    for (k, v) in map {
        let flag = format!("--{}", k.replace('_', "-"));
        match v {
            Value::Bool(true) => out.push(flag),
            Value::Bool(false) | Value::Null => {}
            Value::Number(n) => out.extend([flag, n.to_string()]),
            Value::String(s) => out.extend([flag, s.clone()]),
            Value::Array(items) => {
                let parts: Vec<String> = items
                    .iter()
                    .map(|i| match i {
                        Value::String(s) => Ok(s.clone()),
                        Value::Number(n) => Ok(n.to_string()),
                        other => Err(format!("config key `{k}`: unsupported list item {other}")),
                    })
                    .collect::<Result<_, _>>()?;
                out.extend([flag, parts.join(",")]);
            }
            Value::Object(_) => return Err(format!("config key `{k}`: nested objects are only allowed for subcommands")),
        }
    }
    Ok(())
}

/// Splice config-file flags in front of the command-line ones so that the
/// latter win. Returns the effective argument list.
pub fn merge_config(argv: &[String], config: &Value) -> Result<Vec<String>, String> {
    let obj = config.as_object().ok_or("config file must hold a JSON object")?;
    let sub_pos = argv.iter().skip(1).position(|a| Command::NAMES.contains(&a.as_str())).map(|p| p + 1);
    let mut globals = serde_json::Map::new();
    let mut sub = serde_json::Map::new();
    let sub_name = sub_pos.map(|p| argv[p].as_str());
    for (k, v) in obj {
        match v {
            Value::Object(m) if Command::NAMES.contains(&k.as_str()) => {
                if Some(k.as_str()) == sub_name {
                    sub = m.clone();
                }
            }
            _ if k == "config" => {}
            _ => {
                globals.insert(k.clone(), v.clone());
            }
        }
    }
    let mut out = vec![argv[0].clone()];
    flag_tokens(&globals, &mut out)?;
    match sub_pos {
        Some(p) => {
            out.extend_from_slice(&argv[1..=p]);
            flag_tokens(&sub, &mut out)?;
            out.extend_from_slice(&argv[p + 1..]);
        }
        None => out.extend_from_slice(&argv[1..]),
    }
    Ok(out)
}

/// Effective arguments: the raw ones, or the merge with `--config`.
pub fn effective_argv(argv: &[String]) -> Result<Vec<String>, ConfigError> {
    let Some(path) = find_config(argv) else {
        return Ok(argv.to_vec());
    };
    let text = std::fs::read_to_string(&path).map_err(|e| ConfigError::Io(path.clone(), e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(format!("{path}: {e}")))?;
    merge_config(argv, &value).map_err(|e| ConfigError::Invalid(format!("{path}: {e}")))
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("invalid config {0}")]
    Invalid(String),
}
