//! On-disk layout of datasets and predictions.
//!
//! A dataset directory holds `records.json` plus, per record id,
//! `<id>.scene.vptn` (15×H×W), `<id>.volume.vptn` (72×H×W, mm h⁻¹),
//! `<id>.pwv.vptn` (18×H×W, mm) and `<id>.mask.vptn` (H×W, 1 = supervised).
//! A prediction directory holds `predictions.json` plus `<id>.value.vptn`
//! (72×H×W, mm h⁻¹), `<id>.prob.vptn` (H×W) and `<id>.pwv.vptn`
//! (18×H/8×W/8, mm).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use volprecip_core::collocate::MatchRecord;
use volprecip_core::fields::{PrecipVolume, PwvStack, SpectralScene};
use volprecip_core::model::Prediction;
use volprecip_core::tensorfile::{read_tensor, write_tensor, TensorFile};
use volprecip_core::{Error, Result, Tensor};

pub const RECORDS_FILE: &str = "records.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub id: String,
    pub scene_time: f64,
    pub n_matched_points: usize,
    pub provenance: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub h: usize,
    pub w: usize,
    pub records: Vec<RecordEntry>,
    /// Settings of the command that produced the set.
    pub source: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionManifest {
    pub checkpoint: PathBuf,
    pub ids: Vec<String>,
}

pub fn record_id(i: usize) -> String {
    format!("{i:05}")
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| io_err(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn put(dir: &Path, name: String, t: Tensor, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    write_tensor(&path, &TensorFile::new(t))?;
    written.push(path);
    Ok(())
}

/// Write `records` to `dir`; returns the files written.
pub fn save_records(dir: &Path, records: &[MatchRecord], source: serde_json::Value) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let (h, w) = records.first().map_or((0, 0), |r| (r.scene.h, r.scene.w));
    let mut written = Vec::new();
    let mut entries = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        r.validate()?;
        let id = record_id(i);
        put(dir, format!("{id}.scene.vptn"), r.scene.to_tensor(), &mut written)?;
        put(dir, format!("{id}.volume.vptn"), r.volume.to_tensor(), &mut written)?;
        put(dir, format!("{id}.pwv.vptn"), r.pwv.to_tensor(), &mut written)?;
        let mask = r.supervised.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
        put(dir, format!("{id}.mask.vptn"), Tensor::new(vec![r.scene.h, r.scene.w], mask)?, &mut written)?;
        entries.push(RecordEntry {
            id,
            scene_time: r.scene_time,
            n_matched_points: r.n_matched_points,
            provenance: r.provenance.clone(),
        });
    }
    let manifest = DatasetManifest {
        h,
        w,
        records: entries,
        source,
    };
    let path = dir.join(RECORDS_FILE);
    write_json(&path, &manifest)?;
    written.push(path);
    Ok(written)
}

pub fn load_records(dir: &Path) -> Result<(DatasetManifest, Vec<MatchRecord>)> {
    let manifest: DatasetManifest = read_json(&dir.join(RECORDS_FILE))?;
    let mut out = Vec::with_capacity(manifest.records.len());
    for e in &manifest.records {
        let get = |kind: &str| read_tensor(dir.join(format!("{}.{kind}.vptn", e.id))).map(|f| f.tensor);
        let mask = get("mask")?;
        let r = MatchRecord {
            scene: SpectralScene::from_tensor(&get("scene")?)?,
            volume: PrecipVolume::from_tensor(&get("volume")?)?,
            pwv: PwvStack::from_tensor(&get("pwv")?)?,
            scene_time: e.scene_time,
            n_matched_points: e.n_matched_points,
            supervised: mask.data().iter().map(|&v| v != 0.0).collect(),
            provenance: e.provenance.clone(),
        };
        r.validate()?;
        out.push(r);
    }
    Ok((manifest, out))
}

pub fn save_predictions(dir: &Path, ids: &[String], preds: &[Prediction], checkpoint: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut written = Vec::new();
    for (id, p) in ids.iter().zip(preds) {
        put(dir, format!("{id}.value.vptn"), p.volume().to_tensor(), &mut written)?;
        put(dir, format!("{id}.prob.vptn"), Tensor::new(vec![p.h, p.w], p.prob.clone())?, &mut written)?;
        let (ph, pw) = (p.h / volprecip_core::model::BOTTLENECK_FACTOR, p.w / volprecip_core::model::BOTTLENECK_FACTOR);
        put(dir, format!("{id}.pwv.vptn"), Tensor::new(vec![volprecip_core::fields::PWV_LAYERS, ph, pw], p.pwv.clone())?, &mut written)?;
    }
    let path = dir.join(PREDICTIONS_FILE);
    write_json(
        &path,
        &PredictionManifest {
            checkpoint: checkpoint.to_path_buf(),
            ids: ids.to_vec(),
        },
    )?;
    written.push(path);
    Ok(written)
}

/// Predicted volumes keyed by id.
pub fn load_predicted_volumes(dir: &Path) -> Result<BTreeMap<String, PrecipVolume>> {
    let manifest: PredictionManifest = read_json(&dir.join(PREDICTIONS_FILE))?;
    manifest
        .ids
        .into_iter()
        .map(|id| {
            let t = read_tensor(dir.join(format!("{id}.value.vptn")))?.tensor;
            Ok((id, PrecipVolume::from_tensor(&t)?))
        })
        .collect()
}
