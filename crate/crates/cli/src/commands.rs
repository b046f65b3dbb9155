//! Subcommand implementations.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde_json::json;

use volprecip_core::collocate::{build_dataset, MatchRecord, ObsPoint, TimedScene};
use volprecip_core::evaluate::{
    aggregate, classify_regime, emit_report, revisit_gaps, MetricBundle, MetricSample, Overpass, Regime, Report, Stratify,
    VolumeScores,
};
use volprecip_core::fields::{PrecipVolume, PwvStack, SpectralScene, LAYERS};
use volprecip_core::losses::{suite, LossConfig};
use volprecip_core::model::{load_checkpoint, save_checkpoint, ModelConfig};
use volprecip_core::pwv::{pwv_stack_for_scene, PressureProfile, PRESSURE_LEVELS_HPA};
use volprecip_core::synthgen::generate_dataset;
use volprecip_core::tensorfile::{read_tensor, write_tensor, TensorFile};
use volprecip_core::train::{ablate, infer, train, TrainConfig};
use volprecip_core::Error;

use crate::args::*;
use crate::store;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Config(#[from] ConfigError),
    /// A verification run completed but some checks failed.
    #[error("{0}")]
    CheckFailed(String),
    /// Rejected command line; clap has already printed the usage.
    #[error("usage: {0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(Error::Io { .. } | Error::Parse { .. }) => 2,
            CliError::Core(Error::NonFinite { .. }) | CliError::CheckFailed(_) => 3,
            CliError::Core(_) | CliError::Usage(_) => 1,
            CliError::Config(ConfigError::Io(..)) => 2,
            CliError::Config(ConfigError::Invalid(_)) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Files a command read and wrote.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

pub fn execute(cli: &Cli) -> CliResult<Outcome> {
    match &cli.command {
        Command::Generate(a) => generate(a, cli.seed),
        Command::Pwv(a) => pwv(a),
        Command::Collocate(a) => collocate(a),
        Command::LossCheck(a) => loss_check(a, cli.seed),
        Command::Train(a) => run_train(a, cli.seed),
        Command::Ablate(a) => run_ablate(a, cli.seed),
        Command::Infer(a) => run_infer(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn generate(a: &GenerateArgs, seed: u64) -> CliResult<Outcome> {
    let cfg = a.synth_config(seed);
    let records = generate_dataset(&cfg, a.count)?;
    let outputs = store::save_records(&a.out, &records, json!({ "synthetic": cfg }))?;
    Ok(Outcome {
        inputs: vec![],
        outputs,
    })
}

fn pwv(a: &PwvArgs) -> CliResult<Outcome> {
    let q = read_tensor(&a.humidity)?.tensor;
    let levels = if a.levels.is_empty() {
        PRESSURE_LEVELS_HPA.to_vec()
    } else {
        a.levels.clone()
    };
    let &[nl, h, w] = q.dims() else {
        return Err(Error::Validation(format!("humidity must be levels×H×W, got {:?}", q.dims())).into());
    };
    if nl != levels.len() {
        return Err(Error::Validation(format!("humidity has {nl} levels, {} pressures given", levels.len())).into());
    }
    let n = h * w;
    let profiles: Vec<PressureProfile> = (0..n)
        .map(|p| PressureProfile {
            levels: levels.clone(),
            q: (0..nl).map(|l| q.data()[l * n + p]).collect(),
        })
        .collect();
    let stack = pwv_stack_for_scene(h, w, &profiles)?;
    write_tensor(&a.out, &TensorFile::new(stack.to_tensor()).with_meta("units", "mm"))?;
    Ok(Outcome {
        inputs: vec![a.humidity.clone()],
        outputs: vec![a.out.clone()],
    })
}

fn read_jsonl<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

fn collocate(a: &CollocateArgs) -> CliResult<Outcome> {
    if a.scenes.len() != a.pwv.len() {
        return Err(Error::Validation(format!("{} scenes but {} PWV files", a.scenes.len(), a.pwv.len())).into());
    }
    let mut scenes = Vec::with_capacity(a.scenes.len());
    for path in &a.scenes {
        let f = read_tensor(path)?;
        let time = f
            .meta("time")
            .and_then(|t| t.parse::<f64>().ok())
            .ok_or_else(|| Error::Validation(format!("{}: missing numeric `time` metadata", path.display())))?;
        scenes.push(TimedScene {
            scene: SpectralScene::from_tensor(&f.tensor)?,
            time,
        });
    }
    let pwv: Vec<PwvStack> = a
        .pwv
        .iter()
        .map(|p| PwvStack::from_tensor(&read_tensor(p)?.tensor))
        .collect::<Result<_, _>>()?;
    let points: Vec<ObsPoint> = read_jsonl(&a.points)?;
    let cfg = a.match_config();
    let records = build_dataset(&scenes, &points, &pwv, &cfg)?;
    let outputs = store::save_records(&a.out, &records, json!({ "collocate": cfg }))?;
    let mut inputs = a.scenes.clone();
    inputs.extend(a.pwv.iter().cloned());
    inputs.push(a.points.clone());
    Ok(Outcome { inputs, outputs })
}

fn loss_check(a: &LossCheckArgs, seed: u64) -> CliResult<Outcome> {
    let rep = suite::run(a.instances, seed)?;
    let text = serde_json::to_string_pretty(&rep).map_err(Error::from)? + "\n";
    print!("{text}");
    let mut outputs = vec![];
    if let Some(p) = &a.out {
        fs::write(p, &text).map_err(|e| io_err(p, e))?;
        outputs.push(p.clone());
    }
    if !rep.all_passed {
        let failed: Vec<&str> = rep.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        return Err(CliError::CheckFailed(format!("failed checks: {}", failed.join(", "))));
    }
    Ok(Outcome { inputs: vec![], outputs })
}

fn train_config(optim: &OptimArgs, weights: &WeightArgs, seed: u64, steps: usize) -> CliResult<TrainConfig> {
    if optim.width_divisor == 0 {
        return Err(Error::Validation("width-divisor must be at least 1".into()).into());
    }
    Ok(TrainConfig {
        seed,
        batch_size: optim.batch_size,
        steps,
        learning_rate: optim.learning_rate,
        loss: LossConfig {
            weights: weights.weights(),
            ..Default::default()
        },
        sampler: optim.sampler == Switch::On,
        model: ModelConfig::scaled(optim.width_divisor),
    })
}

fn dataset_inputs(dir: &Path, m: &store::DatasetManifest) -> Vec<PathBuf> {
    let mut v = vec![dir.join(store::RECORDS_FILE)];
    for e in &m.records {
        for kind in ["scene", "volume", "pwv", "mask"] {
            v.push(dir.join(format!("{}.{kind}.vptn", e.id)));
        }
    }
    v
}

fn sorted_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| io_err(dir, e)))
        .collect::<Result<_, _>>()?;
    v.sort();
    Ok(v)
}

fn run_train(a: &TrainArgs, seed: u64) -> CliResult<Outcome> {
    let (m, records) = store::load_records(&a.data)?;
    let cfg = train_config(&a.optim, &a.weights, seed, a.steps)?;
    let out = train(&records, &cfg)?;
    save_checkpoint(&a.out, &out.params, seed, a.steps as u64)?;
    let mut hist = Report::new(None, &["step", "sens", "geo", "scale", "struct", "prob", "pwv", "total"]);
    for (i, b) in out.history.iter().enumerate() {
        let vals = [i as f64, b.sens, b.geo, b.scale, b.structural, b.prob, b.pwv, b.total];
        hist.push(None, vals.into_iter().map(Some).collect())?;
    }
    emit_report(&hist, &a.out.join("history"))?;
    Ok(Outcome {
        inputs: dataset_inputs(&a.data, &m),
        outputs: sorted_files(&a.out)?,
    })
}

fn stem_outputs(stem: &Path) -> Vec<PathBuf> {
    vec![stem.with_extension("csv"), stem.with_extension("json")]
}

fn run_ablate(a: &AblateArgs, seed: u64) -> CliResult<Outcome> {
    let (m, records) = store::load_records(&a.data)?;
    let cfg = train_config(&a.optim, &a.weights, seed, 1)?;
    let rep = ablate(&records, &a.lambdas, &cfg)?;
    emit_report(&rep.to_report()?, &a.out)?;
    Ok(Outcome {
        inputs: dataset_inputs(&a.data, &m),
        outputs: stem_outputs(&a.out),
    })
}

fn run_infer(a: &InferArgs) -> CliResult<Outcome> {
    let (params, _) = load_checkpoint(&a.checkpoint)?;
    let (m, records) = store::load_records(&a.data)?;
    for r in &records {
        params.config.check_dims(r.scene.h, r.scene.w)?;
    }
    let scenes: Vec<&SpectralScene> = records.iter().map(|r| &r.scene).collect();
    let preds = infer(&params, &scenes)?;
    let ids: Vec<String> = m.records.iter().map(|e| e.id.clone()).collect();
    let outputs = store::save_predictions(&a.out, &ids, &preds, &a.checkpoint)?;
    let mut inputs = sorted_files(&a.checkpoint)?;
    inputs.extend(dataset_inputs(&a.data, &m));
    Ok(Outcome { inputs, outputs })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let name = stem.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    stem.with_file_name(format!("{name}{suffix}"))
}

/// Per-sample table columns of `evaluate`.
pub fn evaluate_columns() -> Vec<String> {
    let mut cols: Vec<String> = ["lat", "lon", "time"].iter().map(|s| s.to_string()).collect();
    cols.extend(MetricBundle::COLUMNS.iter().map(|c| c.to_string()));
    cols.extend(MetricBundle::COLUMNS.iter().map(|c| format!("sfc_{c}")));
    cols
}

fn evaluate(a: &EvaluateArgs) -> CliResult<Outcome> {
    let preds = store::load_predicted_volumes(&a.pred)?;
    let (m, records) = store::load_records(&a.data)?;
    let mut pairs: Vec<(&PrecipVolume, &MatchRecord, &str)> = Vec::with_capacity(records.len());
    for (e, r) in m.records.iter().zip(&records) {
        let p = preds
            .get(&e.id)
            .ok_or_else(|| Error::Validation(format!("no prediction for record {}", e.id)))?;
        pairs.push((p, r, &e.id));
    }
    let cols = evaluate_columns();
    let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut table = Report::new(Some("sample"), &col_refs);
    let row = |s: &VolumeScores, head: [Option<f64>; 3]| -> Vec<Option<f64>> {
        head.into_iter().chain(s.volume.values()).chain(s.surface.values()).collect()
    };
    for (p, r, id) in &pairs {
        let s = VolumeScores::compute(&[(p, &r.volume, Some(r.supervised.as_slice()))])?;
        table.push(Some(id), row(&s, [Some(mean(&r.scene.lat)), Some(mean(&r.scene.lon)), Some(r.scene_time)]))?;
    }
    if !pairs.is_empty() {
        let all: Vec<_> = pairs.iter().map(|(p, r, _)| (*p, &r.volume, Some(r.supervised.as_slice()))).collect();
        table.push(Some("all"), row(&VolumeScores::compute(&all)?, [None; 3]))?;
    }
    emit_report(&table, &a.out)?;

    let mut cols: Vec<&str> = MetricBundle::COLUMNS.to_vec();
    cols.push("pixels");
    let mut regimes = Report::new(Some("regime"), &cols);
    for g in Regime::ALL {
        let (mut pv, mut rv, mut pixels) = (Vec::new(), Vec::new(), 0usize);
        for (p, r, _) in &pairs {
            let n = r.scene.pixels();
            for px in 0..n {
                if !r.supervised[px] || classify_regime(&r.volume.profile(px)) != g {
                    continue;
                }
                pixels += 1;
                for l in 0..LAYERS {
                    pv.push(p.rate[l * n + px]);
                    rv.push(r.volume.rate[l * n + px]);
                }
            }
        }
        let mut vals: Vec<Option<f64>> = if pixels > 0 {
            MetricBundle::compute(&pv, &rv, None)?.values().to_vec()
        } else {
            vec![None; MetricBundle::COLUMNS.len()]
        };
        vals.push(Some(pixels as f64));
        regimes.push(Some(g.name()), vals)?;
    }
    let regime_stem = with_suffix(&a.out, "_regimes");
    emit_report(&regimes, &regime_stem)?;

    let mut inputs = vec![a.pred.join(store::PREDICTIONS_FILE)];
    inputs.extend(m.records.iter().map(|e| a.pred.join(format!("{}.value.vptn", e.id))));
    inputs.extend(dataset_inputs(&a.data, &m));
    let mut outputs = stem_outputs(&a.out);
    outputs.extend(stem_outputs(&regime_stem));
    Ok(Outcome { inputs, outputs })
}

fn column(rep: &Report, name: &str) -> CliResult<usize> {
    rep.columns
        .iter()
        .position(|c| c == name)
        .ok_or_else(|| Error::Validation(format!("score table has no `{name}` column")).into())
}

fn report(a: &ReportArgs) -> CliResult<Outcome> {
    match (&a.source.scores, &a.source.overpasses) {
        (Some(scores), _) => stratify(a, scores),
        (None, Some(overpasses)) => revisit(a, overpasses),
        (None, None) => Err(Error::Validation("report needs --scores or --overpasses".into()).into()),
    }
}

fn stratify(a: &ReportArgs, scores: &Path) -> CliResult<Outcome> {
    let rep: Report = store::read_json(scores)?;
    let (lat, lon, time, metric) = (column(&rep, "lat")?, column(&rep, "lon")?, column(&rep, "time")?, column(&rep, &a.metric)?);
    let samples: Vec<MetricSample> = rep
        .rows
        .iter()
        .filter(|r| r.label.as_deref() != Some("all"))
        .filter_map(|r| {
            Some(MetricSample {
                lat: r.values[lat]?,
                lon: r.values[lon]?,
                time: r.values[time]?,
                value: r.values[metric]?,
            })
        })
        .collect();
    let by = match a.by {
        StratifyBy::Latitude => Stratify::Latitude(a.band),
        StratifyBy::Longitude => Stratify::Longitude(a.band),
        StratifyBy::Time => Stratify::Time(a.band),
    };
    let table = aggregate(&samples, by)?;
    let mut out = Report::new(Some("band"), &["lower", "upper", "count", "mean"]);
    for (i, b) in table.bands.iter().enumerate() {
        out.push(Some(&i.to_string()), vec![Some(b.lower), Some(b.upper), Some(b.count as f64), b.mean])?;
    }
    out.push(Some("all"), vec![None, None, Some(table.count as f64), table.global_mean])?;
    emit_report(&out, &a.out)?;
    Ok(Outcome {
        inputs: vec![scores.to_path_buf()],
        outputs: stem_outputs(&a.out),
    })
}

fn revisit(a: &ReportArgs, path: &Path) -> CliResult<Outcome> {
    let overpasses: Vec<Overpass> = read_jsonl(path)?;
    let n_cells = overpasses.first().map_or(0, |o| o.coverage.len());
    let stats = revisit_gaps(&overpasses, n_cells, a.gap_threshold_s)?;
    let mut cells = Report::new(Some("cell"), &["visits", "mean_gap_s", "max_gap_s"]);
    for (i, c) in stats.cells.iter().enumerate() {
        cells.push(Some(&i.to_string()), vec![Some(c.visits as f64), c.mean_gap, c.max_gap])?;
    }
    emit_report(&cells, &a.out)?;
    let summary_stem = with_suffix(&a.out, "_summary");
    let mut summary = Report::new(None, &["cells", "flagged", "mean_gap_s", "max_gap_s", "fraction_over_threshold"]);
    summary.push(
        None,
        vec![
            Some(n_cells as f64),
            Some(stats.flagged as f64),
            stats.mean_gap,
            stats.max_gap,
            stats.fraction_over_threshold,
        ],
    )?;
    emit_report(&summary, &summary_stem)?;
    let mut outputs = stem_outputs(&a.out);
    outputs.extend(stem_outputs(&summary_stem));
    Ok(Outcome {
        inputs: vec![path.to_path_buf()],
        outputs,
    })
}
