//! Dataset splitting, intensity-weighted sampling, the optimization loop and
//! the λ_pwv ablation harness.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collocate::MatchRecord;
use crate::error::{Error, Result};
use crate::evaluate::{MetricBundle, Report, VolumeScores};
use crate::fields::{SpectralScene, LAYERS};
use crate::losses::{geo_weight, loss_total_grad, GridShape, LossBreakdown, LossConfig, LossInputs, ScaleParams};
use crate::model::{forward_pass, init, Batch, ForwardPass, ModelConfig, Parameters, Prediction, BOTTLENECK_FACTOR, PWV_SCALE_MM};

/// Training share of the 9:1 split.
pub const TRAIN_PARTS: usize = 9;
pub const SPLIT_PARTS: usize = 10;
/// Records per inference batch.
pub const INFER_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub loss: LossConfig,
    /// Intensity-weighted sampling; off means uniform.
    pub sampler: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 8,
            steps: 100,
            learning_rate: 1e-3,
            loss: LossConfig::default(),
            sampler: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        self.loss.weights.validate()?;
        self.model.validate()
    }
}

/// Deterministic 9:1 partition of `0..n` into (train, validation) indices.
pub fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < SPLIT_PARTS {
        return Err(Error::validation(format!("need at least {SPLIT_PARTS} records to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * TRAIN_PARTS / SPLIT_PARTS;
    let val = idx.split_off(n_train);
    Ok((idx, val))
}

pub fn split<T: Clone>(records: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let (t, v) = split_indices(records.len(), seed)?;
    Ok((
        t.iter().map(|&i| records[i].clone()).collect(),
        v.iter().map(|&i| records[i].clone()).collect(),
    ))
}

/// `max(1, (max surface rate / τ_ext)^β_ext)` per record.
pub fn sample_weights(records: &[MatchRecord], p: &ScaleParams) -> Vec<f64> {
    records
        .iter()
        .map(|r| {
            let peak = r.volume.layer(0).iter().cloned().fold(0.0, f64::max);
            (peak / p.tau_ext).powf(p.beta_ext).max(1.0)
        })
        .collect()
}

/// Draws record indices, uniformly or in proportion to weights.
#[derive(Debug, Clone)]
pub enum Sampler {
    Uniform(usize),
    Weighted(WeightedIndex<f64>),
}

impl Sampler {
    pub fn new(weights: Option<&[f64]>, n: usize) -> Result<Self> {
        match weights {
            None => {
                if n == 0 {
                    return Err(Error::validation("cannot sample from an empty set"));
                }
                Ok(Sampler::Uniform(n))
            }
            Some(w) => WeightedIndex::new(w)
                .map(Sampler::Weighted)
                .map_err(|e| Error::validation(format!("sampler weights: {e}"))),
        }
    }

    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        match self {
            Sampler::Uniform(n) => rng.random_range(0..*n),
            Sampler::Weighted(w) => w.sample(rng),
        }
    }
}

/// Adam with the usual moment defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &BTreeMap<String, Vec<f64>>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.tensors.get_mut(name).expect("gradient for a known parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((x, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Loss targets derived once per record.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub shape: GridShape,
    pub truth_raw: Vec<f64>,
    pub truth: Vec<f64>,
    pub geo_weight: Vec<f64>,
    /// Pooled to the bottleneck grid, in units of [`PWV_SCALE_MM`].
    pub pwv: Vec<f64>,
    pub supervised: Vec<bool>,
}

impl Targets {
    pub fn new(r: &MatchRecord, cfg: &LossConfig) -> Result<Self> {
        r.validate()?;
        Ok(Targets {
            shape: GridShape {
                layers: LAYERS,
                h: r.volume.h,
                w: r.volume.w,
            },
            truth_raw: r.volume.rate.clone(),
            truth: r.volume.normalized(),
            geo_weight: geo_weight(&r.scene.vza, &r.scene.lat, &cfg.geo)?,
            pwv: r.pwv.pooled(BOTTLENECK_FACTOR)?.data().iter().map(|v| v / PWV_SCALE_MM).collect(),
            supervised: r.supervised.clone(),
        })
    }
}

/// Mean loss of a batch and the parameter gradients of that mean.
pub struct BatchGradient {
    pub loss: LossBreakdown,
    pub grads: BTreeMap<String, Vec<f64>>,
    pub pass: ForwardPass,
}

/// Loss inputs of sample `i` in a batch of `n` stacked outputs.
fn sample_inputs<'a>(tg: &'a Targets, out: [&'a [f64]; 3], i: usize, n: usize) -> LossInputs<'a> {
    let part = |v: &'a [f64]| {
        let len = v.len() / n;
        &v[i * len..(i + 1) * len]
    };
    LossInputs {
        shape: tg.shape,
        truth_raw: &tg.truth_raw,
        truth: &tg.truth,
        pred: part(out[0]),
        prob: part(out[1]),
        geo_weight: &tg.geo_weight,
        pwv_true: &tg.pwv,
        pwv_pred: part(out[2]),
        supervised: Some(&tg.supervised),
    }
}

/// Mean per-sample loss of a training-mode forward pass, without gradients.
pub fn batch_loss(params: &Parameters, scenes: &[&SpectralScene], targets: &[&Targets], cfg: &LossConfig) -> Result<LossBreakdown> {
    let pass = forward_pass(params, &Batch::from_scenes(scenes)?, true)?;
    let t = &pass.tape;
    let n = scenes.len();
    let (vals, probs, pwvs) = (t.value(pass.value), t.value(pass.prob), t.value(pass.pwv));
    let per: Vec<LossBreakdown> = (0..n)
        .into_par_iter()
        .map(|i| crate::losses::loss_total(&sample_inputs(targets[i], [vals, probs, pwvs], i, n), cfg))
        .collect::<Result<_>>()?;
    Ok(LossBreakdown::mean(&per))
}

/// Forward a batch in training mode and back-propagate the mean per-sample loss.
pub fn batch_gradient(params: &Parameters, scenes: &[&SpectralScene], targets: &[&Targets], cfg: &LossConfig) -> Result<BatchGradient> {
    let batch = Batch::from_scenes(scenes)?;
    let pass = forward_pass(params, &batch, true)?;
    let t = &pass.tape;
    let n = scenes.len();
    let (vals, probs, pwvs) = (t.value(pass.value), t.value(pass.prob), t.value(pass.pwv));
    let per: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| loss_total_grad(&sample_inputs(targets[i], [vals, probs, pwvs], i, n), cfg))
        .collect::<Result<_>>()?;
    let inv = 1.0 / n as f64;
    let mut seeds_v = Vec::with_capacity(vals.len());
    let mut seeds_p = Vec::with_capacity(probs.len());
    let mut seeds_q = Vec::with_capacity(pwvs.len());
    let mut breakdowns = Vec::with_capacity(n);
    for (b, g) in per {
        breakdowns.push(b);
        seeds_v.extend(g.pred.iter().map(|v| v * inv));
        seeds_p.extend(g.prob.iter().map(|v| v * inv));
        seeds_q.extend(g.pwv_pred.iter().map(|v| v * inv));
    }
    let loss = LossBreakdown::mean(&breakdowns);
    let g = t.backward(&[(pass.value, &seeds_v), (pass.prob, &seeds_p), (pass.pwv, &seeds_q)]);
    let grads = pass
        .params
        .iter()
        .map(|(name, v)| {
            let len = params.tensors[name].len();
            (name.clone(), g.get(*v).map_or(vec![0.0; len], <[f64]>::to_vec))
        })
        .collect();
    Ok(BatchGradient { loss, grads, pass })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: Parameters,
    /// Batch loss before each update.
    pub history: Vec<LossBreakdown>,
    /// Largest absolute gradient that reached the PWV head over all steps.
    pub pwv_head_grad_max: f64,
}

fn data_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Train from a fresh initialization seeded by `cfg.seed`.
pub fn train(dataset: &[MatchRecord], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_from(init(&cfg.model, cfg.seed)?, dataset, cfg)
}

/// Run `cfg.steps` Adam updates starting from `params`. When the sampler is
/// off and the batch covers the whole set, every step uses all records in
/// order; otherwise batches are drawn with replacement.
pub fn train_from(mut params: Parameters, dataset: &[MatchRecord], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if params.config != cfg.model {
        return Err(Error::ConfigMismatch("parameters were built for a different model config".into()));
    }
    if dataset.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    let targets: Vec<Targets> = dataset.par_iter().map(|r| Targets::new(r, &cfg.loss)).collect::<Result<_>>()?;
    let weights = cfg.sampler.then(|| sample_weights(dataset, &cfg.loss.scale));
    let sampler = Sampler::new(weights.as_deref(), dataset.len())?;
    let full_batch = !cfg.sampler && cfg.batch_size >= dataset.len();
    let mut rng = data_rng(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.steps);
    let mut pwv_head_grad_max: f64 = 0.0;
    for step in 0..cfg.steps {
        let idx: Vec<usize> = if full_batch {
            (0..dataset.len()).collect()
        } else {
            (0..cfg.batch_size).map(|_| sampler.draw(&mut rng)).collect()
        };
        let scenes: Vec<&SpectralScene> = idx.iter().map(|&i| &dataset[i].scene).collect();
        let tg: Vec<&Targets> = idx.iter().map(|&i| &targets[i]).collect();
        let bg = batch_gradient(&params, &scenes, &tg, &cfg.loss)?;
        if let Some((term, value)) = bg.loss.non_finite_term() {
            return Err(Error::NonFinite {
                step,
                term,
                value,
            });
        }
        for (name, g) in &bg.grads {
            if name.starts_with("pwv_head.") {
                pwv_head_grad_max = g.iter().fold(pwv_head_grad_max, |m, v| m.max(v.abs()));
            }
        }
        history.push(bg.loss);
        adam.step(&mut params, &bg.grads);
        params.update_running_stats(&bg.pass);
    }
    Ok(TrainOutcome {
        params,
        history,
        pwv_head_grad_max,
    })
}

/// Inference-mode predictions, in batches of [`INFER_BATCH`].
pub fn infer(params: &Parameters, scenes: &[&SpectralScene]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(INFER_BATCH) {
        out.extend(crate::model::forward(params, chunk)?);
    }
    Ok(out)
}

/// Mean inference-mode loss over `records`.
pub fn evaluate_loss(params: &Parameters, records: &[MatchRecord], cfg: &LossConfig) -> Result<LossBreakdown> {
    let scenes: Vec<&SpectralScene> = records.iter().map(|r| &r.scene).collect();
    let preds = infer(params, &scenes)?;
    let per: Vec<LossBreakdown> = records
        .par_iter()
        .zip(&preds)
        .map(|(r, p)| {
            let tg = Targets::new(r, cfg)?;
            let pwv: Vec<f64> = p.pwv.iter().map(|v| v / PWV_SCALE_MM).collect();
            crate::losses::loss_total(
                &LossInputs {
                    shape: tg.shape,
                    truth_raw: &tg.truth_raw,
                    truth: &tg.truth,
                    pred: &p.value,
                    prob: &p.prob,
                    geo_weight: &tg.geo_weight,
                    pwv_true: &tg.pwv,
                    pwv_pred: &pwv,
                    supervised: Some(&tg.supervised),
                },
                cfg,
            )
        })
        .collect::<Result<_>>()?;
    Ok(LossBreakdown::mean(&per))
}

/// Volume and surface scores of `params` on `records`.
pub fn score(params: &Parameters, records: &[MatchRecord]) -> Result<VolumeScores> {
    let scenes: Vec<&SpectralScene> = records.iter().map(|r| &r.scene).collect();
    let preds = infer(params, &scenes)?;
    let vols: Vec<_> = preds.iter().map(Prediction::volume).collect();
    let pairs: Vec<_> = vols
        .iter()
        .zip(records)
        .map(|(p, r)| (p, &r.volume, Some(r.supervised.as_slice())))
        .collect();
    VolumeScores::compute(&pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub lambda_pwv: f64,
    pub volume: MetricBundle,
    pub surface: MetricBundle,
    pub score: f64,
    pub pwv_head_grad_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub const COLUMNS: [&'static str; 9] = ["lambda_pwv", "CC", "bias", "RMSE", "MAE", "POD", "FAR", "CSI", "score"];

    /// Tabular form; metric columns are the volume-level scores.
    pub fn to_report(&self) -> Result<Report> {
        let mut r = Report::new(None, &Self::COLUMNS);
        for row in &self.rows {
            let mut v = vec![Some(row.lambda_pwv)];
            v.extend(row.volume.values());
            v.push(Some(row.score));
            r.push(None, v)?;
        }
        Ok(r)
    }
}

/// Steps in one pass over `n` records.
pub fn epoch_steps(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// One single-epoch training run per λ_pwv from the same initialization,
/// scored on the validation split.
pub fn ablate(dataset: &[MatchRecord], lambdas: &[f64], cfg: &TrainConfig) -> Result<AblationReport> {
    if lambdas.is_empty() {
        return Err(Error::validation("ablation needs at least one λ_pwv"));
    }
    let (train_set, val_set) = split(dataset, cfg.seed)?;
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut run = cfg.clone();
        run.loss.weights.lambda_pwv = lambda;
        run.steps = epoch_steps(train_set.len(), cfg.batch_size);
        let out = train(&train_set, &run)?;
        let s = score(&out.params, &val_set)?;
        rows.push(AblationRow {
            lambda_pwv: lambda,
            volume: s.volume,
            surface: s.surface,
            score: s.composite(),
            pwv_head_grad_max: out.pwv_head_grad_max,
        });
    }
    Ok(AblationReport { rows })
}
