//! Verification metrics, regime stratification, revisit-gap statistics and
//! report emission.
//!
//! Undefined quantities (zero variance, empty denominators, empty bands) are
//! `None` and are written as an empty CSV cell or JSON `null`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_same_len, Error, Result};
use crate::fields::{layer_midpoint_m, PrecipVolume, LAYERS, RAIN_THRESHOLD};
use crate::losses::pearson;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousMetrics {
    pub cc: Option<f64>,
    pub bias: f64,
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
}

fn selected<'a>(pred: &'a [f64], reference: &'a [f64], mask: Option<&'a [bool]>) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.iter()
        .zip(reference)
        .enumerate()
        .filter(move |(i, _)| mask.is_none_or(|m| m[*i]))
        .map(|(_, (&p, &r))| (p, r))
}

fn check_inputs(context: &'static str, pred: &[f64], reference: &[f64], mask: Option<&[bool]>) -> Result<()> {
    check_same_len(context, pred.len(), reference.len())?;
    if let Some(m) = mask {
        check_same_len(context, pred.len(), m.len())?;
    }
    Ok(())
}

/// CC, bias, RMSE and MAE over the unmasked cells.
pub fn continuous_metrics(pred: &[f64], reference: &[f64], mask: Option<&[bool]>) -> Result<ContinuousMetrics> {
    check_inputs("continuous_metrics", pred, reference, mask)?;
    let (p, r): (Vec<f64>, Vec<f64>) = selected(pred, reference, mask).unzip();
    if p.is_empty() {
        return Err(Error::validation("continuous_metrics: no unmasked cells"));
    }
    let n = p.len() as f64;
    let (mut sum, mut sq, mut abs) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(&r) {
        let d = a - b;
        sum += d;
        sq += d * d;
        abs += d.abs();
    }
    Ok(ContinuousMetrics {
        cc: if p.len() >= 2 { pearson(&p, &r) } else { None },
        bias: sum / n,
        rmse: (sq / n).sqrt(),
        mae: abs / n,
        n: p.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_negatives: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ContingencyTable {
    pub fn total(&self) -> u64 {
        self.hits + self.misses + self.false_alarms + self.correct_negatives
    }

    pub fn pod(&self) -> Option<f64> {
        ratio(self.hits, self.hits + self.misses)
    }

    pub fn far(&self) -> Option<f64> {
        ratio(self.false_alarms, self.hits + self.false_alarms)
    }

    pub fn csi(&self) -> Option<f64> {
        ratio(self.hits, self.hits + self.misses + self.false_alarms)
    }

    pub fn merge(&self, other: &ContingencyTable) -> ContingencyTable {
        ContingencyTable {
            hits: self.hits + other.hits,
            misses: self.misses + other.misses,
            false_alarms: self.false_alarms + other.false_alarms,
            correct_negatives: self.correct_negatives + other.correct_negatives,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoricalMetrics {
    pub pod: Option<f64>,
    pub far: Option<f64>,
    pub csi: Option<f64>,
    /// mm h⁻¹; an event is `rate >= threshold`.
    pub threshold: f64,
    pub table: ContingencyTable,
}

impl CategoricalMetrics {
    pub fn from_table(table: ContingencyTable, threshold: f64) -> Self {
        CategoricalMetrics {
            pod: table.pod(),
            far: table.far(),
            csi: table.csi(),
            threshold,
            table,
        }
    }
}

pub fn contingency(pred: &[f64], reference: &[f64], threshold: f64, mask: Option<&[bool]>) -> Result<ContingencyTable> {
    check_inputs("contingency", pred, reference, mask)?;
    let mut t = ContingencyTable::default();
    for (p, r) in selected(pred, reference, mask) {
        match (p >= threshold, r >= threshold) {
            (true, true) => t.hits += 1,
            (false, true) => t.misses += 1,
            (true, false) => t.false_alarms += 1,
            (false, false) => t.correct_negatives += 1,
        }
    }
    Ok(t)
}

pub fn categorical_metrics(pred: &[f64], reference: &[f64], threshold: f64, mask: Option<&[bool]>) -> Result<CategoricalMetrics> {
    Ok(CategoricalMetrics::from_table(contingency(pred, reference, threshold, mask)?, threshold))
}

/// Continuous and categorical scores of one comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub continuous: ContinuousMetrics,
    pub categorical: CategoricalMetrics,
}

impl MetricBundle {
    pub fn compute(pred: &[f64], reference: &[f64], mask: Option<&[bool]>) -> Result<Self> {
        Ok(MetricBundle {
            continuous: continuous_metrics(pred, reference, mask)?,
            categorical: categorical_metrics(pred, reference, RAIN_THRESHOLD, mask)?,
        })
    }

    /// `(CC + CSI) / 2`, with undefined scores counted as 0.
    pub fn skill(&self) -> f64 {
        (self.continuous.cc.unwrap_or(0.0) + self.categorical.csi.unwrap_or(0.0)) / 2.0
    }

    pub const COLUMNS: [&'static str; 7] = ["CC", "bias", "RMSE", "MAE", "POD", "FAR", "CSI"];

    pub fn values(&self) -> [Option<f64>; 7] {
        let c = &self.continuous;
        let k = &self.categorical;
        [c.cc, Some(c.bias), Some(c.rmse), Some(c.mae), k.pod, k.far, k.csi]
    }
}

/// Scores over all `72×H×W` cells and over the surface layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeScores {
    pub volume: MetricBundle,
    pub surface: MetricBundle,
}

pub const VOLUME_WEIGHT: f64 = 0.8;

impl VolumeScores {
    /// Pool several (prediction, reference) volume pairs, each with an
    /// optional per-pixel mask.
    pub fn compute(pairs: &[(&PrecipVolume, &PrecipVolume, Option<&[bool]>)]) -> Result<Self> {
        let (mut vp, mut vr, mut vm, mut sp, mut sr, mut sm) = (vec![], vec![], vec![], vec![], vec![], vec![]);
        for (p, r, mask) in pairs {
            if (p.h, p.w) != (r.h, r.w) {
                return Err(Error::validation("prediction and reference grids differ"));
            }
            let n = p.h * p.w;
            vp.extend_from_slice(&p.rate);
            vr.extend_from_slice(&r.rate);
            sp.extend_from_slice(p.layer(0));
            sr.extend_from_slice(r.layer(0));
            let m: Vec<bool> = mask.map_or(vec![true; n], |m| m.to_vec());
            check_same_len("VolumeScores mask", m.len(), n)?;
            for _ in 0..LAYERS {
                vm.extend_from_slice(&m);
            }
            sm.extend_from_slice(&m);
        }
        Ok(VolumeScores {
            volume: MetricBundle::compute(&vp, &vr, Some(&vm))?,
            surface: MetricBundle::compute(&sp, &sr, Some(&sm))?,
        })
    }

    /// 80 % volume skill + 20 % surface skill.
    pub fn composite(&self) -> f64 {
        VOLUME_WEIGHT * self.volume.skill() + (1.0 - VOLUME_WEIGHT) * self.surface.skill()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    DeepConvection,
    ShallowConvection,
    Stratiform,
    Weak,
}

impl Regime {
    pub const ALL: [Regime; 4] = [
        Regime::DeepConvection,
        Regime::ShallowConvection,
        Regime::Stratiform,
        Regime::Weak,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::DeepConvection => "deep_convection",
            Regime::ShallowConvection => "shallow_convection",
            Regime::Stratiform => "stratiform",
            Regime::Weak => "weak",
        }
    }
}

pub mod regime_thresholds {
    /// mm h⁻¹ defining the echo top.
    pub const ECHO_RATE: f64 = 0.1;
    pub const WEAK_MAX: f64 = 1.0;
    pub const DEEP_TOP_M: f64 = 8000.0;
    pub const DEEP_MAX: f64 = 10.0;
    pub const SHALLOW_TOP_M: f64 = 5000.0;
    pub const SHALLOW_MAX: f64 = 5.0;
}

/// Height (m, layer midpoint) of the highest layer at or above the echo rate.
pub fn echo_top_m(profile: &[f64]) -> Option<f64> {
    profile
        .iter()
        .rposition(|&r| r >= regime_thresholds::ECHO_RATE)
        .map(layer_midpoint_m)
}

pub fn classify_regime(profile: &[f64]) -> Regime {
    use regime_thresholds::*;
    let max = profile.iter().cloned().fold(0.0, f64::max);
    let top = echo_top_m(profile).unwrap_or(0.0);
    if !(max >= WEAK_MAX) {
        Regime::Weak
    } else if top >= DEEP_TOP_M && max >= DEEP_MAX {
        Regime::DeepConvection
    } else if top < SHALLOW_TOP_M && max >= SHALLOW_MAX {
        Regime::ShallowConvection
    } else {
        Regime::Stratiform
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overpass {
    /// s
    pub time: f64,
    /// One flag per grid cell.
    pub coverage: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellGaps {
    pub visits: usize,
    /// `None` for cells with fewer than two visits.
    pub mean_gap: Option<f64>,
    pub max_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisitStats {
    pub cells: Vec<CellGaps>,
    /// Mean over cells with at least two visits of their mean gap.
    pub mean_gap: Option<f64>,
    pub max_gap: Option<f64>,
    /// Fraction of revisited cells whose longest gap exceeds the threshold.
    pub fraction_over_threshold: Option<f64>,
    /// Cells with fewer than two visits.
    pub flagged: usize,
}

/// Gap statistics from one sweep over time-sorted overpasses.
pub fn revisit_gaps(overpasses: &[Overpass], n_cells: usize, threshold: f64) -> Result<RevisitStats> {
    if overpasses.windows(2).any(|w| !(w[0].time <= w[1].time)) {
        return Err(Error::validation("overpasses must be time-sorted"));
    }
    if let Some(o) = overpasses.iter().find(|o| o.coverage.len() != n_cells) {
        return Err(Error::validation(format!(
            "coverage mask has {} cells, grid has {n_cells}",
            o.coverage.len()
        )));
    }
    let mut last: Vec<Option<f64>> = vec![None; n_cells];
    let mut visits = vec![0usize; n_cells];
    let mut sum = vec![0.0; n_cells];
    let mut max = vec![f64::NEG_INFINITY; n_cells];
    for o in overpasses {
        for (c, _) in o.coverage.iter().enumerate().filter(|(_, &v)| v) {
            if let Some(t) = last[c] {
                let gap = o.time - t;
                sum[c] += gap;
                max[c] = max[c].max(gap);
            }
            last[c] = Some(o.time);
            visits[c] += 1;
        }
    }
    let cells: Vec<CellGaps> = (0..n_cells)
        .map(|c| CellGaps {
            visits: visits[c],
            mean_gap: (visits[c] >= 2).then(|| sum[c] / (visits[c] - 1) as f64),
            max_gap: (visits[c] >= 2).then_some(max[c]),
        })
        .collect();
    Ok(summarize_gaps(cells, threshold))
}

/// Grid-level statistics from per-cell gaps.
pub fn summarize_gaps(cells: Vec<CellGaps>, threshold: f64) -> RevisitStats {
    let revisited: Vec<&CellGaps> = cells.iter().filter(|c| c.mean_gap.is_some()).collect();
    let k = revisited.len();
    let mean_gap = (k > 0).then(|| revisited.iter().map(|c| c.mean_gap.unwrap()).sum::<f64>() / k as f64);
    let max_gap = revisited.iter().filter_map(|c| c.max_gap).reduce(f64::max);
    let over = revisited.iter().filter(|c| c.max_gap.is_some_and(|g| g > threshold)).count();
    RevisitStats {
        flagged: cells.len() - k,
        cells,
        mean_gap,
        max_gap,
        fraction_over_threshold: (k > 0).then(|| over as f64 / k as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub lat: f64,
    pub lon: f64,
    /// s
    pub time: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Stratify {
    /// Band width in degrees.
    Latitude(f64),
    Longitude(f64),
    /// Bucket width in seconds, anchored at time 0.
    Time(f64),
}

pub const DEFAULT_BAND_DEG: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedTable {
    pub bands: Vec<Band>,
    pub global_mean: Option<f64>,
    pub count: usize,
}

/// Per-band means. Latitude bands tile [-90, 90], longitude bands
/// [-180, 180], time buckets the span of the samples; the last band is
/// closed on the right.
pub fn aggregate(samples: &[MetricSample], by: Stratify) -> Result<StratifiedTable> {
    let (width, key): (f64, fn(&MetricSample) -> f64) = match by {
        Stratify::Latitude(w) => (w, |s| s.lat),
        Stratify::Longitude(w) => (w, |s| s.lon),
        Stratify::Time(w) => (w, |s| s.time),
    };
    if !(width.is_finite() && width > 0.0) {
        return Err(Error::validation("band width must be positive"));
    }
    if samples.iter().any(|s| !key(s).is_finite() || !s.value.is_finite()) {
        return Err(Error::validation("metric samples must be finite"));
    }
    let (lo, hi) = match by {
        Stratify::Latitude(_) => (-90.0, 90.0),
        Stratify::Longitude(_) => (-180.0, 180.0),
        Stratify::Time(w) => {
            if samples.is_empty() {
                (0.0, w)
            } else {
                let min = samples.iter().map(key).fold(f64::INFINITY, f64::min);
                let max = samples.iter().map(key).fold(f64::NEG_INFINITY, f64::max);
                ((min / w).floor() * w, ((max / w).floor() + 1.0) * w)
            }
        }
    };
    let n_bands = (((hi - lo) / width).ceil() as usize).max(1);
    let mut sums = vec![0.0; n_bands];
    let mut counts = vec![0usize; n_bands];
    for s in samples {
        let k = key(s);
        if k < lo || k > hi {
            return Err(Error::validation(format!("sample key {k} outside [{lo}, {hi}]")));
        }
        let b = (((k - lo) / width).floor() as usize).min(n_bands - 1);
        sums[b] += s.value;
        counts[b] += 1;
    }
    let bands = (0..n_bands)
        .map(|b| Band {
            lower: lo + b as f64 * width,
            upper: (lo + (b + 1) as f64 * width).min(hi),
            count: counts[b],
            mean: (counts[b] > 0).then(|| sums[b] / counts[b] as f64),
        })
        .collect();
    let total: f64 = samples.iter().map(|s| s.value).sum();
    Ok(StratifiedTable {
        bands,
        global_mean: (!samples.is_empty()).then(|| total / samples.len() as f64),
        count: samples.len(),
    })
}

/// Metrics per regime of the reference profile.
pub fn regime_scores(pred: &PrecipVolume, reference: &PrecipVolume) -> Result<Vec<(Regime, Option<MetricBundle>)>> {
    if (pred.h, pred.w) != (reference.h, reference.w) {
        return Err(Error::validation("prediction and reference grids differ"));
    }
    let n = pred.h * pred.w;
    let regimes: Vec<Regime> = (0..n).into_par_iter().map(|p| classify_regime(&reference.profile(p))).collect();
    Regime::ALL
        .iter()
        .map(|&g| {
            let mask: Vec<bool> = (0..LAYERS).flat_map(|_| regimes.iter().map(move |r| *r == g)).collect();
            if mask.iter().any(|&m| m) {
                Ok((g, Some(MetricBundle::compute(&pred.rate, &reference.rate, Some(&mask))?)))
            } else {
                Ok((g, None))
            }
        })
        .collect()
}

/// A table of optional numbers with an optional leading text column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub label_column: Option<String>,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: Option<String>,
    pub values: Vec<Option<f64>>,
}

impl Report {
    pub fn new(label_column: Option<&str>, columns: &[&str]) -> Self {
        Report {
            label_column: label_column.map(str::to_string),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, label: Option<&str>, values: Vec<Option<f64>>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::validation(format!(
                "report row has {} values for {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        if label.is_some() != self.label_column.is_some() {
            return Err(Error::validation("report row label does not match the label column"));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation("report values must be finite or missing"));
        }
        self.rows.push(ReportRow {
            label: label.map(str::to_string),
            values,
        });
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = self.label_column.iter().map(String::as_str).chain(self.columns.iter().map(String::as_str)).collect();
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let cells: Vec<String> = r
                .label
                .iter()
                .cloned()
                .chain(r.values.iter().map(|v| v.map_or(String::new(), |x| x.to_string())))
                .collect();
            w.write_record(&cells).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::validation(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::validation(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::validation(format!("csv: {e}"))
}

/// Write `<stem>.csv` and `<stem>.json`.
pub fn emit_report(report: &Report, stem: &Path) -> Result<()> {
    for (ext, text) in [("csv", report.to_csv()?), ("json", report.to_json()?)] {
        let path = stem.with_extension(ext);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn continuous_examples() {
        let r = [0.0, 2.0, 4.0, 6.0];
        let m = continuous_metrics(&r, &r, None).unwrap();
        assert_eq!((m.cc, m.bias, m.rmse, m.mae), (Some(1.0), 0.0, 0.0, 0.0));
        let shifted: Vec<f64> = r.iter().map(|v| v + 0.5).collect();
        let m = continuous_metrics(&shifted, &r, None).unwrap();
        assert_eq!((m.bias, m.rmse, m.mae), (0.5, 0.5, 0.5));
        let m = continuous_metrics(&[0.0, 1.0, 2.0, 3.0], &r, None).unwrap();
        assert!((m.cc.unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(m.bias, -1.5);
        assert_eq!(m.rmse, 14f64.sqrt() / 2.0);
        assert!((m.rmse - 1.8708).abs() < 1e-4);
        assert_eq!(m.mae, 1.5);
    }

    #[test]
    fn continuous_degenerate_and_masked() {
        let m = continuous_metrics(&[1.0, 1.0], &[0.0, 2.0], None).unwrap();
        assert_eq!(m.cc, None);
        let m = continuous_metrics(&[5.0, 1.0, 9.0], &[0.0, 2.0, 9.0], Some(&[false, true, true])).unwrap();
        assert_eq!(m.n, 2);
        assert_eq!(m.bias, -0.5);
        assert!(continuous_metrics(&[1.0], &[1.0], Some(&[false])).is_err());
        assert!(continuous_metrics(&[1.0], &[1.0, 2.0], None).is_err());
    }

    #[test]
    fn categorical_examples() {
        let r = [1.0, 1.0, 0.0, 0.0];
        let m = categorical_metrics(&r, &r, 0.1, None).unwrap();
        assert_eq!((m.pod, m.far, m.csi), (Some(1.0), Some(0.0), Some(1.0)));
        let m = categorical_metrics(&[1.0, 0.0, 1.0, 0.0], &r, 0.1, None).unwrap();
        assert_eq!((m.table.hits, m.table.misses, m.table.false_alarms), (1, 1, 1));
        assert_eq!((m.pod, m.far), (Some(0.5), Some(0.5)));
        assert_eq!(m.csi, Some(1.0 / 3.0));
        let m = categorical_metrics(&[0.0; 4], &[0.0; 4], 0.1, None).unwrap();
        assert_eq!((m.pod, m.far, m.csi), (None, None, None));
        assert_eq!(m.table.total(), 4);
        // event threshold is inclusive
        let m = categorical_metrics(&[0.1], &[0.1], 0.1, None).unwrap();
        assert_eq!(m.table.hits, 1);
    }

    #[test]
    fn regime_examples() {
        assert_eq!(classify_regime(&[0.0; LAYERS]), Regime::Weak);
        let mut deep = [0.0; LAYERS];
        for (l, v) in deep.iter_mut().enumerate().take(48) {
            *v = if l == 3 { 20.0 } else { 2.0 };
        }
        assert!((echo_top_m(&deep).unwrap() - 11875.0).abs() < 1e-9);
        assert_eq!(classify_regime(&deep), Regime::DeepConvection);
        let mut strat = [0.0; LAYERS];
        strat[..24].iter_mut().for_each(|v| *v = 3.0);
        assert_eq!(classify_regime(&strat), Regime::Stratiform);
        let mut shallow = [0.0; LAYERS];
        shallow[..12].iter_mut().for_each(|v| *v = 8.0);
        assert_eq!(classify_regime(&shallow), Regime::ShallowConvection);
        let mut nan = [0.0; LAYERS];
        nan[0] = f64::NAN;
        assert_eq!(classify_regime(&nan), Regime::Weak);
    }

    const DAY: f64 = 86_400.0;

    #[test]
    fn revisit_examples() {
        let daily: Vec<Overpass> = (0..10)
            .map(|d| Overpass {
                time: d as f64 * DAY,
                coverage: vec![true],
            })
            .collect();
        let s = revisit_gaps(&daily, 1, 2.0 * DAY).unwrap();
        assert_eq!(s.mean_gap, Some(DAY));
        assert_eq!(s.fraction_over_threshold, Some(0.0));
        let two = [
            Overpass {
                time: 0.0,
                coverage: vec![true, false],
            },
            Overpass {
                time: 20.0 * DAY,
                coverage: vec![true, true],
            },
        ];
        let s = revisit_gaps(&two, 2, 15.0 * DAY).unwrap();
        assert_eq!(s.max_gap, Some(20.0 * DAY));
        assert_eq!(s.flagged, 1);
        assert_eq!(s.cells[1].mean_gap, None);
        assert_eq!(s.fraction_over_threshold, Some(1.0));
        let mut unsorted = two.to_vec();
        unsorted.reverse();
        assert!(revisit_gaps(&unsorted, 2, 1.0).is_err());
    }

    fn sample(lat: f64, value: f64) -> MetricSample {
        MetricSample {
            lat,
            lon: 0.0,
            time: 0.0,
            value,
        }
    }

    #[test]
    fn aggregate_examples() {
        let s = [sample(1.0, 2.0), sample(2.0, 4.0)];
        let t = aggregate(&s, Stratify::Latitude(180.0)).unwrap();
        assert_eq!(t.bands.len(), 1);
        assert_eq!(t.bands[0].mean, t.global_mean);
        let s = [sample(-10.0, 0.0), sample(-20.0, 0.0), sample(10.0, 1.0), sample(20.0, 1.0)];
        let t = aggregate(&s, Stratify::Latitude(90.0)).unwrap();
        let means: Vec<Option<f64>> = t.bands.iter().map(|b| b.mean).collect();
        assert_eq!(means, vec![Some(0.0), Some(1.0)]);
        assert_eq!(t.global_mean, Some(0.5));
        let t = aggregate(&s, Stratify::Latitude(DEFAULT_BAND_DEG)).unwrap();
        assert_eq!(t.bands.len(), 36);
        assert_eq!(t.bands.iter().filter(|b| b.mean.is_none()).count(), 32);
        assert!(aggregate(&s, Stratify::Longitude(0.0)).is_err());
    }

    #[test]
    fn report_round_trip() {
        let mut r = Report::new(Some("name"), &["a", "b"]);
        assert_eq!(r.to_csv().unwrap(), "name,a,b\n");
        r.push(Some("x, y"), vec![Some(0.1), None]).unwrap();
        r.push(Some("z"), vec![Some(-2.5e-7), Some(3.0)]).unwrap();
        assert!(r.push(Some("bad"), vec![Some(f64::NAN), None]).is_err());
        let csv = r.to_csv().unwrap();
        assert_eq!(csv, "name,a,b\n\"x, y\",0.1,\nz,-0.00000025,3\n");
        assert_eq!(csv.lines().count(), 1 + r.rows.len());
        let back: Report = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_json().unwrap().contains("null"));
        let dir = tempfile::tempdir().unwrap();
        emit_report(&r, &dir.path().join("out")).unwrap();
        assert_eq!(std::fs::read_to_string(dir.path().join("out.csv")).unwrap(), csv);
        assert!(emit_report(&r, &dir.path().join("missing/out")).is_err());
    }

    fn table() -> impl Strategy<Value = ContingencyTable> {
        (0u64..500, 0u64..500, 0u64..500, 0u64..500).prop_map(|(h, m, f, c)| ContingencyTable {
            hits: h,
            misses: m,
            false_alarms: f,
            correct_negatives: c,
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn csi_is_bounded_by_pod_and_success_ratio(t in table()) {
            if let (Some(pod), Some(far), Some(csi)) = (t.pod(), t.far(), t.csi()) {
                prop_assert!(csi <= pod + 1e-15);
                prop_assert!(csi <= 1.0 - far + 1e-15);
                prop_assert!(csi <= 1.0);
            }
        }
    }

    proptest! {
        #[test]
        fn cc_affine_invariant_and_bias_shift_equivariant(
            pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let (p, r): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let base = continuous_metrics(&p, &r, None).unwrap();
            let affine: Vec<f64> = p.iter().map(|v| a * v + b).collect();
            let m = continuous_metrics(&affine, &r, None).unwrap();
            if let (Some(x), Some(y)) = (base.cc, m.cc) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let shifted: Vec<f64> = p.iter().map(|v| v + b).collect();
            let m = continuous_metrics(&shifted, &r, None).unwrap();
            prop_assert!((m.bias - (base.bias + b)).abs() < 1e-9);
        }

        #[test]
        fn regime_is_total(profile in prop::collection::vec(0.0f64..60.0, LAYERS)) {
            let g = classify_regime(&profile);
            prop_assert_eq!(Regime::ALL.iter().filter(|r| **r == g).count(), 1);
        }

        #[test]
        fn band_means_recombine_to_global(values in prop::collection::vec((-90.0f64..90.0, -5.0f64..5.0), 1..60)) {
            let s: Vec<MetricSample> = values.iter().map(|&(l, v)| sample(l, v)).collect();
            let t = aggregate(&s, Stratify::Latitude(DEFAULT_BAND_DEG)).unwrap();
            let n: usize = t.bands.iter().map(|b| b.count).sum();
            let recombined: f64 = t.bands.iter().filter_map(|b| b.mean.map(|m| m * b.count as f64)).sum::<f64>() / n as f64;
            prop_assert_eq!(n, s.len());
            prop_assert!((recombined - t.global_mean.unwrap()).abs() < 1e-12);
        }
    }
}
