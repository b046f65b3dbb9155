//! Self-verification of the loss terms: frozen oracle values and
//! finite-difference gradient checks on random instances.
//!
//! This backs the `loss-check` command and is also run by the acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::*;

pub const ORACLE_TOL: f64 = 1e-9;
pub const GRAD_TOL: f64 = 1e-5;
pub const GRAD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    /// Absolute error (oracles) or worst relative gradient error.
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, error: f64, tolerance: f64) -> Self {
        CheckOutcome {
            name: name.into(),
            error,
            tolerance,
            passed: error.is_finite() && error < tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckOutcome>,
    pub all_passed: bool,
}

pub fn run(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut checks = oracle_suite()?;
    checks.extend(gradient_suite(instances, seed)?);
    let all_passed = checks.iter().all(|c| c.passed);
    Ok(SuiteReport { checks, all_passed })
}

fn oracle(name: &str, got: f64, want: f64) -> CheckOutcome {
    CheckOutcome::new(name, (got - want).abs(), ORACLE_TOL)
}

/// Closed-form examples for each term, checked to 1e-9 absolute.
pub fn oracle_suite() -> Result<Vec<CheckOutcome>> {
    let sens = SensParams::default();
    let geo = GeoParams::default();
    let scale = ScaleParams {
        lambda_ext: 2.0,
        tau_ext: 5.0,
        beta_ext: 1.0,
    };
    let ln2 = std::f64::consts::LN_2;
    let c1 = (ssim::K1 * ssim::DYNAMIC_RANGE).powi(2);
    let pwv_t: Vec<f64> = (0..2 * PWV_LAYERS).map(|i| i as f64 * 0.25).collect();
    let pwv_p: Vec<f64> = pwv_t.iter().map(|v| v + 1.0).collect();
    let mut out = vec![
        oracle("sens/singleton", loss_sens(&[0.05], &[0.5], &sens)?, 0.25),
        oracle("sens/empty-noise-set", loss_sens(&[0.0, 0.0], &[0.1, 0.05], &sens)?, 0.0),
        oracle("sens/true-rain", loss_sens(&[0.2, 3.0], &[7.0, 0.0], &sens)?, 0.0),
        oracle("geo_weight/nadir-equator", geo_weight(&[0.0], &[0.0], &geo)?[0], (0.4f64 / (1.0 + 1e-6)).exp()),
        oracle("geo_weight/clip-ceiling", geo_weight(&[89.999], &[0.0], &geo)?[0], 3f64.exp()),
        oracle(
            "geo_weight/zero-curvature",
            geo_weight(&[40.0], &[50.0], &GeoParams { alpha: 0.0, beta_lat: 0.0, ..geo })?[0],
            1.0,
        ),
        oracle("geo/single-pixel", loss_geo(&[0.5], &[2.0], &[1.0])?, 2.5),
        oracle("geo/zero", loss_geo(&[0.0], &[0.0], &[3.0])?, 0.0),
        oracle("scale/extreme-weight", loss_scale(&[10.0], &[8.0], &scale)?, 16.0),
        oracle("scale/weight-floor", loss_scale(&[1.0], &[0.0], &scale)?, 1.0),
        oracle("ssim/constant-patches", ssim::ssim(&[0.0; 121], &[1.0; 121], 11, 11)?, c1 / (1.0 + c1)),
        oracle("prob/positive-half", loss_prob(&[1.0], &[0.5])?, ln2),
        oracle("prob/negative-half", loss_prob(&[0.0], &[0.5])?, ln2),
        oracle("pwv/unit-offset", loss_pwv(&pwv_t, &pwv_p)?, 1.0),
    ];
    let y: Vec<f64> = (0..144).map(|i| [0.1, 0.2, 0.3][i % 3]).collect();
    let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
    let st = loss_struct(&y, &y2, GridShape::plane(12, 12), &StructParams::default())?;
    out.push(oracle("struct/cc-scale-invariance", 1.0 - st.rho, 0.0));
    let st = loss_struct(&y, &y, GridShape::plane(12, 12), &StructParams::default())?;
    out.push(oracle("struct/identity", st.value, 0.0));

    // recomposition on a random instance
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let inst = Instance::random(&mut rng, 12, 12, 2);
    let b = loss_total(&inst.inputs(), &inst.cfg)?;
    let by_hand = inst.cfg.weights.lambda_sens * b.sens
        + inst.cfg.weights.lambda_geo * b.geo
        + inst.cfg.weights.lambda_scale * b.scale
        + inst.cfg.weights.lambda_struct * b.structural
        + inst.cfg.weights.lambda_prob * b.prob
        + inst.cfg.weights.lambda_pwv * b.pwv;
    out.push(CheckOutcome::new(
        "total/recomposition",
        (b.total - by_hand).abs() / by_hand.abs().max(f64::MIN_POSITIVE),
        1e-12,
    ));
    Ok(out)
}

/// A random loss instance with values kept away from every kink.
#[derive(Debug, Clone)]
pub struct Instance {
    pub shape: GridShape,
    pub truth_raw: Vec<f64>,
    pub truth: Vec<f64>,
    pub pred: Vec<f64>,
    pub prob: Vec<f64>,
    pub geo_weight: Vec<f64>,
    pub pwv_true: Vec<f64>,
    pub pwv_pred: Vec<f64>,
    pub cfg: LossConfig,
}

/// Draw uniformly from `[lo, hi)` avoiding `±margin` around each of `kinks`.
fn away_from(rng: &mut ChaCha8Rng, lo: f64, hi: f64, kinks: &[f64], margin: f64) -> f64 {
    loop {
        let v = rng.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > margin) {
            return v;
        }
    }
}

impl Instance {
    pub fn random(rng: &mut ChaCha8Rng, h: usize, w: usize, layers: usize) -> Self {
        let shape = GridShape { layers, h, w };
        let cfg = LossConfig::default();
        let eps_n = normalize_rate(cfg.sens.epsilon);
        let tau_n = normalize_rate(cfg.sens.tau_small);
        let margin = 1e-3;
        let truth_raw: Vec<f64> = (0..shape.len())
            .map(|_| {
                if rng.random_bool(0.4) {
                    rng.random_range(0.0..0.08)
                } else {
                    away_from(rng, 0.12, 40.0, &[cfg.scale.tau_ext / cfg.scale.lambda_ext], 1e-2)
                }
            })
            .collect();
        let truth: Vec<f64> = truth_raw.iter().map(|&r| normalize_rate(r)).collect();
        let pred = (0..shape.len())
            .map(|_| away_from(rng, 0.0, 1.0, &[eps_n, tau_n], margin))
            .collect();
        let plane = h * w;
        let pwv_cells = PWV_LAYERS * ((h / 8).max(1) * (w / 8).max(1));
        Instance {
            shape,
            truth_raw,
            truth,
            pred,
            prob: (0..plane).map(|_| rng.random_range(0.05..0.95)).collect(),
            geo_weight: (0..plane).map(|_| rng.random_range(1.0..3.0)).collect(),
            pwv_true: (0..pwv_cells).map(|_| rng.random_range(0.0..3.0)).collect(),
            pwv_pred: (0..pwv_cells).map(|_| rng.random_range(0.0..3.0)).collect(),
            cfg,
        }
    }

    pub fn inputs(&self) -> LossInputs<'_> {
        LossInputs {
            shape: self.shape,
            truth_raw: &self.truth_raw,
            truth: &self.truth,
            pred: &self.pred,
            prob: &self.prob,
            geo_weight: &self.geo_weight,
            pwv_true: &self.pwv_true,
            pwv_pred: &self.pwv_pred,
            supervised: None,
        }
    }
}

fn options() -> GradCheckOptions {
    GradCheckOptions {
        h: GRAD_STEP,
        ..Default::default()
    }
}

/// Worst relative gradient error for each term over `instances` random draws.
/// Pointwise terms use 8×8 grids; terms containing SSIM need at least the
/// 11×11 window and use 12×12.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 7];
    let names = ["sens", "geo", "scale", "struct", "prob", "pwv", "total"];
    let opts = options();
    for _ in 0..instances {
        let small = Instance::random(&mut rng, 8, 8, 1);
        let eps_n = normalize_rate(small.cfg.sens.epsilon);
        let sens = SensParams {
            epsilon: eps_n,
            tau_small: normalize_rate(small.cfg.sens.tau_small),
        };
        let y = &small.truth;
        let x = &small.pred;

        let g = loss_sens_grad(y, x, &sens)?;
        let r = grad_check(|v| loss_sens(y, v, &sens).unwrap(), &g, x, &opts);
        worst[0] = worst[0].max(r.max_rel_error);

        let (gp, gy) = loss_geo_grad(&small.prob, x, &small.geo_weight)?;
        let joint: Vec<f64> = small.prob.iter().chain(x).copied().collect();
        let gj: Vec<f64> = gp.into_iter().chain(gy).collect();
        let np = small.prob.len();
        let r = grad_check(
            |v| loss_geo(&v[..np], &v[np..], &small.geo_weight).unwrap(),
            &gj,
            &joint,
            &opts,
        );
        worst[1] = worst[1].max(r.max_rel_error);

        let g = loss_scale_grad(&small.truth_raw, x, &small.cfg.scale)?;
        let r = grad_check(|v| loss_scale(&small.truth_raw, v, &small.cfg.scale).unwrap(), &g, x, &opts);
        worst[2] = worst[2].max(r.max_rel_error);

        let y_bin: Vec<f64> = small.truth_raw.iter().map(|&t| if t >= 0.1 { 1.0 } else { 0.0 }).collect();
        let g = loss_prob_grad(&y_bin, &small.prob)?;
        let r = grad_check(|v| loss_prob(&y_bin, v).unwrap(), &g, &small.prob, &opts);
        worst[4] = worst[4].max(r.max_rel_error);

        let g = loss_pwv_grad(&small.pwv_true, &small.pwv_pred)?;
        let r = grad_check(|v| loss_pwv(&small.pwv_true, v).unwrap(), &g, &small.pwv_pred, &opts);
        worst[5] = worst[5].max(r.max_rel_error);

        let big = Instance::random(&mut rng, 12, 12, 2);
        let sp = StructParams::default();
        let g = loss_struct_grad(&big.truth, &big.pred, big.shape, &sp)?;
        let r = grad_check(
            |v| loss_struct(&big.truth, v, big.shape, &sp).unwrap().value,
            &g,
            &big.pred,
            &opts,
        );
        worst[3] = worst[3].max(r.max_rel_error);

        let (_, g) = loss_total_grad(&big.inputs(), &big.cfg)?;
        let (n_pred, n_prob) = (big.pred.len(), big.prob.len());
        let joint: Vec<f64> = big
            .pred
            .iter()
            .chain(&big.prob)
            .chain(&big.pwv_pred)
            .copied()
            .collect();
        let gj: Vec<f64> = g.pred.iter().chain(&g.prob).chain(&g.pwv_pred).copied().collect();
        let r = grad_check(
            |v| {
                let mut x = big.inputs();
                x.pred = &v[..n_pred];
                x.prob = &v[n_pred..n_pred + n_prob];
                x.pwv_pred = &v[n_pred + n_prob..];
                loss_total(&x, &big.cfg).unwrap().total
            },
            &gj,
            &joint,
            &opts,
        );
        worst[6] = worst[6].max(r.max_rel_error);
    }
    Ok(names
        .iter()
        .zip(worst)
        .map(|(n, e)| CheckOutcome::new(format!("grad/{n}"), e, GRAD_TOL))
        .collect())
}
