//! The multi-term physics-constrained training loss.
//!
//! Every term is a pure scalar function with a matching `*_grad` companion
//! returning the gradient with respect to the predicted quantity. The raw
//! functions take values in their natural units; [`loss_total`] applies them
//! to normalized rates (see [`crate::fields::normalize_rate`]) and handles
//! supervision masks.

pub mod gradcheck;
pub mod ssim;
pub mod suite;

use serde::{Deserialize, Serialize};

use crate::error::{check_same_len, Error, Result};
use crate::fields::{normalize_rate, PWV_LAYERS};

pub use gradcheck::{grad_check, GradCheck, GradCheckOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensParams {
    /// True-rain floor (mm h⁻¹).
    pub epsilon: f64,
    /// Suppression threshold on the prediction (mm h⁻¹).
    pub tau_small: f64,
}

impl Default for SensParams {
    fn default() -> Self {
        SensParams {
            epsilon: 0.1,
            tau_small: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoParams {
    pub alpha: f64,
    pub beta_lat: f64,
    pub c_max: f64,
    pub eps_div: f64,
}

impl Default for GeoParams {
    fn default() -> Self {
        GeoParams {
            alpha: 0.2,
            beta_lat: 0.2,
            c_max: 3.0,
            eps_div: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub lambda_ext: f64,
    pub tau_ext: f64,
    pub beta_ext: f64,
}

impl Default for ScaleParams {
    fn default() -> Self {
        ScaleParams {
            lambda_ext: 2.0,
            tau_ext: 10.0,
            beta_ext: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructParams {
    pub lambda_ssim: f64,
    pub lambda_cc: f64,
    pub lambda_grad: f64,
}

impl Default for StructParams {
    fn default() -> Self {
        StructParams {
            lambda_ssim: 1.0,
            lambda_cc: 1.0,
            lambda_grad: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_sens: f64,
    pub lambda_geo: f64,
    pub lambda_scale: f64,
    pub lambda_struct: f64,
    pub lambda_prob: f64,
    pub lambda_pwv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_sens: 1.0,
            lambda_geo: 0.1,
            lambda_scale: 1.0,
            lambda_struct: 0.5,
            lambda_prob: 1.0,
            lambda_pwv: 5.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            lambda_sens: 0.0,
            lambda_geo: 0.0,
            lambda_scale: 0.0,
            lambda_struct: 0.0,
            lambda_prob: 0.0,
            lambda_pwv: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_sens,
            self.lambda_geo,
            self.lambda_scale,
            self.lambda_struct,
            self.lambda_prob,
            self.lambda_pwv,
        ];
        if all.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::validation("loss weights must be finite and >= 0"));
        }
        Ok(())
    }
}

/// All parameter blocks of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub sens: SensParams,
    pub geo: GeoParams,
    pub scale: ScaleParams,
    pub structure: StructParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sens: f64,
    pub geo: f64,
    pub scale: f64,
    pub structural: f64,
    pub prob: f64,
    pub pwv: f64,
    pub total: f64,
    /// Set when the correlation term hit a zero-variance field.
    pub cc_degenerate: bool,
}

impl LossBreakdown {
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        w.lambda_sens * self.sens
            + w.lambda_geo * self.geo
            + w.lambda_scale * self.scale
            + w.lambda_struct * self.structural
            + w.lambda_prob * self.prob
            + w.lambda_pwv * self.pwv
    }

    /// Name and value of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<(&'static str, f64)> {
        [
            ("sens", self.sens),
            ("geo", self.geo),
            ("scale", self.scale),
            ("struct", self.structural),
            ("prob", self.prob),
            ("pwv", self.pwv),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for b in items {
            out.sens += b.sens / n;
            out.geo += b.geo / n;
            out.scale += b.scale / n;
            out.structural += b.structural / n;
            out.prob += b.prob / n;
            out.pwv += b.pwv / n;
            out.total += b.total / n;
            out.cc_degenerate |= b.cc_degenerate;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Sensitivity (light-rain suppression)

fn in_noise_set(y: f64, yhat: f64, p: &SensParams) -> bool {
    y < p.epsilon && yhat > p.tau_small
}

/// Mean of `ŷ²` over pixels where truth is below `epsilon` but the
/// prediction exceeds `tau_small`; 0 when no pixel qualifies.
pub fn loss_sens(y: &[f64], yhat: &[f64], p: &SensParams) -> Result<f64> {
    check_same_len("loss_sens", y.len(), yhat.len())?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (&t, &v) in y.iter().zip(yhat) {
        if in_noise_set(t, v, p) {
            sum += v * v;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

pub fn loss_sens_grad(y: &[f64], yhat: &[f64], p: &SensParams) -> Result<Vec<f64>> {
    check_same_len("loss_sens", y.len(), yhat.len())?;
    let count = y.iter().zip(yhat).filter(|(&t, &v)| in_noise_set(t, v, p)).count();
    if count == 0 {
        return Ok(vec![0.0; y.len()]);
    }
    let inv = 1.0 / count as f64;
    Ok(y.iter()
        .zip(yhat)
        .map(|(&t, &v)| if in_noise_set(t, v, p) { 2.0 * v * inv } else { 0.0 })
        .collect())
}

// ---------------------------------------------------------------------------
// Geolocation uncertainty

/// `exp(clip(α/(cos θ + ε) + β/(cos φ + ε), 0, C_max))` per pixel.
pub fn geo_weight(vza_deg: &[f64], lat_deg: &[f64], p: &GeoParams) -> Result<Vec<f64>> {
    check_same_len("geo_weight", vza_deg.len(), lat_deg.len())?;
    Ok(vza_deg
        .iter()
        .zip(lat_deg)
        .map(|(&t, &f)| {
            let inner = p.alpha / (t.to_radians().cos() + p.eps_div)
                + p.beta_lat / (f.to_radians().cos() + p.eps_div);
            inner.clamp(0.0, p.c_max).exp()
        })
        .collect())
}

fn geo_shapes(prob: &[f64], yhat: &[f64], w: &[f64]) -> Result<()> {
    check_same_len("loss_geo prob", w.len(), prob.len())?;
    if w.is_empty() || !yhat.len().is_multiple_of(w.len()) {
        return Err(Error::Shape {
            context: "loss_geo rate",
            expected: vec![w.len()],
            got: vec![yhat.len()],
        });
    }
    Ok(())
}

/// `mean(p̂·W) + mean(ŷ·W)`. `yhat` may hold several layers of the weight
/// grid's size; the weight is broadcast across them.
pub fn loss_geo(prob: &[f64], yhat: &[f64], w: &[f64]) -> Result<f64> {
    geo_shapes(prob, yhat, w)?;
    let n = w.len();
    let p_term: f64 = prob.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let y_term: f64 = yhat
        .iter()
        .enumerate()
        .map(|(i, v)| v * w[i % n])
        .sum::<f64>()
        / yhat.len() as f64;
    Ok(p_term + y_term)
}

/// Gradients of [`loss_geo`] with respect to `(prob, yhat)`.
pub fn loss_geo_grad(prob: &[f64], yhat: &[f64], w: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    geo_shapes(prob, yhat, w)?;
    let n = w.len();
    let gp = w.iter().map(|v| v / n as f64).collect();
    let m = yhat.len() as f64;
    let gy = (0..yhat.len()).map(|i| w[i % n] / m).collect();
    Ok((gp, gy))
}

// ---------------------------------------------------------------------------
// Scale-aware intensity

/// `max(1, λ_ext·(y/τ_ext)^β)` per pixel, from the raw truth in mm h⁻¹.
pub fn scale_weights(y: &[f64], p: &ScaleParams) -> Vec<f64> {
    y.iter()
        .map(|&t| (p.lambda_ext * (t.max(0.0) / p.tau_ext).powf(p.beta_ext)).max(1.0))
        .collect()
}

pub fn weighted_square_error(y: &[f64], yhat: &[f64], weights: &[f64]) -> Result<f64> {
    check_same_len("loss_scale", y.len(), yhat.len())?;
    check_same_len("loss_scale weights", y.len(), weights.len())?;
    if y.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = y
        .iter()
        .zip(yhat)
        .zip(weights)
        .map(|((t, v), w)| w * (v - t) * (v - t))
        .sum();
    Ok(s / y.len() as f64)
}

pub fn weighted_square_error_grad(y: &[f64], yhat: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    check_same_len("loss_scale", y.len(), yhat.len())?;
    check_same_len("loss_scale weights", y.len(), weights.len())?;
    let inv = 1.0 / y.len().max(1) as f64;
    Ok(y.iter()
        .zip(yhat)
        .zip(weights)
        .map(|((t, v), w)| 2.0 * w * (v - t) * inv)
        .collect())
}

/// Intensity-weighted L2 loss; weights come from the truth `y`.
pub fn loss_scale(y: &[f64], yhat: &[f64], p: &ScaleParams) -> Result<f64> {
    weighted_square_error(y, yhat, &scale_weights(y, p))
}

pub fn loss_scale_grad(y: &[f64], yhat: &[f64], p: &ScaleParams) -> Result<Vec<f64>> {
    weighted_square_error_grad(y, yhat, &scale_weights(y, p))
}

// ---------------------------------------------------------------------------
// Structural composite

/// A stack of `layers` grids of `h×w`, layer-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub layers: usize,
    pub h: usize,
    pub w: usize,
}

impl GridShape {
    pub fn plane(h: usize, w: usize) -> Self {
        GridShape { layers: 1, h, w }
    }

    pub fn len(&self) -> usize {
        self.layers * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructValue {
    pub value: f64,
    pub ssim: f64,
    pub rho: f64,
    pub grad_l1: f64,
    /// True when ρ was undefined (zero variance) and the CC term was set to 1.
    pub cc_degenerate: bool,
}

/// Pearson correlation; `None` when either field has zero variance.
fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|x| *x == v[0])
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if is_constant(a) || is_constant(b) || saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// `∂ρ(p, y)/∂p`; zero when ρ is undefined.
fn pearson_grad(p: &[f64], y: &[f64]) -> Vec<f64> {
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut spy, mut spp, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(y) {
        spy += (a - mp) * (b - my);
        spp += (a - mp) * (a - mp);
        syy += (b - my) * (b - my);
    }
    if is_constant(p) || is_constant(y) || spp == 0.0 || syy == 0.0 {
        return vec![0.0; p.len()];
    }
    let norm = (spp * syy).sqrt();
    let rho = spy / norm;
    p.iter()
        .zip(y)
        .map(|(a, b)| (b - my) / norm - rho * (a - mp) / spp)
        .collect()
}

/// Mean over all cells of `|Dx d| + |Dy d|`, `d = ŷ − y`, with forward
/// differences and a replicated last row/column (zero difference there).
fn gradient_l1(d: &[f64], s: GridShape) -> f64 {
    let (h, w) = (s.h, s.w);
    let mut sum = 0.0;
    for l in 0..s.layers {
        let g = &d[l * h * w..(l + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                if j + 1 < w {
                    sum += (g[i * w + j + 1] - g[i * w + j]).abs();
                }
                if i + 1 < h {
                    sum += (g[(i + 1) * w + j] - g[i * w + j]).abs();
                }
            }
        }
    }
    sum / s.len() as f64
}

fn gradient_l1_grad(d: &[f64], s: GridShape) -> Vec<f64> {
    let (h, w) = (s.h, s.w);
    let inv = 1.0 / s.len() as f64;
    let mut out = vec![0.0; d.len()];
    for l in 0..s.layers {
        let off = l * h * w;
        for i in 0..h {
            for j in 0..w {
                let c = off + i * w + j;
                if j + 1 < w {
                    let sg = (d[c + 1] - d[c]).signum() * inv;
                    if d[c + 1] != d[c] {
                        out[c + 1] += sg;
                        out[c] -= sg;
                    }
                }
                if i + 1 < h {
                    let r = c + w;
                    let sg = (d[r] - d[c]).signum() * inv;
                    if d[r] != d[c] {
                        out[r] += sg;
                        out[c] -= sg;
                    }
                }
            }
        }
    }
    out
}

fn struct_check(y: &[f64], yhat: &[f64], s: GridShape) -> Result<()> {
    if y.len() != s.len() || yhat.len() != s.len() {
        return Err(Error::Shape {
            context: "loss_struct",
            expected: vec![s.layers, s.h, s.w],
            got: vec![y.len(), yhat.len()],
        });
    }
    Ok(())
}

/// `λ_SSIM(1 − SSIM) + λ_CC(1 − ρ) + λ_Grad·mean|∇ŷ − ∇y|` over normalized
/// grids. SSIM is averaged over layers; ρ spans every cell. When ρ is
/// undefined the CC term is 1, unless `ŷ` equals `y` exactly (then 0).
pub fn loss_struct(y: &[f64], yhat: &[f64], s: GridShape, p: &StructParams) -> Result<StructValue> {
    struct_check(y, yhat, s)?;
    let plane = s.h * s.w;
    let mut ssim_sum = 0.0;
    for l in 0..s.layers {
        let r = l * plane..(l + 1) * plane;
        ssim_sum += ssim::ssim(&y[r.clone()], &yhat[r], s.h, s.w)?;
    }
    let ssim_mean = ssim_sum / s.layers as f64;
    let (rho, cc_term, degenerate) = match pearson(yhat, y) {
        Some(r) => (r, 1.0 - r, false),
        None if yhat == y => (1.0, 0.0, false),
        None => (0.0, 1.0, true),
    };
    let d: Vec<f64> = yhat.iter().zip(y).map(|(a, b)| a - b).collect();
    let grad_l1 = gradient_l1(&d, s);
    Ok(StructValue {
        value: p.lambda_ssim * (1.0 - ssim_mean) + p.lambda_cc * cc_term + p.lambda_grad * grad_l1,
        ssim: ssim_mean,
        rho,
        grad_l1,
        cc_degenerate: degenerate,
    })
}

pub fn loss_struct_grad(y: &[f64], yhat: &[f64], s: GridShape, p: &StructParams) -> Result<Vec<f64>> {
    struct_check(y, yhat, s)?;
    let plane = s.h * s.w;
    let mut g = vec![0.0; s.len()];
    for l in 0..s.layers {
        let r = l * plane..(l + 1) * plane;
        let (_, gs) = ssim::ssim_grad(&y[r.clone()], &yhat[r.clone()], s.h, s.w)?;
        let k = -p.lambda_ssim / s.layers as f64;
        for (o, v) in g[r].iter_mut().zip(gs) {
            *o += k * v;
        }
    }
    for (o, v) in g.iter_mut().zip(pearson_grad(yhat, y)) {
        *o -= p.lambda_cc * v;
    }
    let d: Vec<f64> = yhat.iter().zip(y).map(|(a, b)| a - b).collect();
    for (o, v) in g.iter_mut().zip(gradient_l1_grad(&d, s)) {
        *o += p.lambda_grad * v;
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// Probability (binary cross-entropy)

pub const PROB_CLAMP: f64 = 1e-7;

pub fn loss_prob(y_bin: &[f64], prob: &[f64]) -> Result<f64> {
    check_same_len("loss_prob", y_bin.len(), prob.len())?;
    if prob.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = y_bin
        .iter()
        .zip(prob)
        .map(|(&y, &p)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(-s / prob.len() as f64)
}

pub fn loss_prob_grad(y_bin: &[f64], prob: &[f64]) -> Result<Vec<f64>> {
    check_same_len("loss_prob", y_bin.len(), prob.len())?;
    let inv = 1.0 / prob.len().max(1) as f64;
    Ok(y_bin
        .iter()
        .zip(prob)
        .map(|(&y, &p)| {
            if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                0.0
            } else {
                -(y / p - (1.0 - y) / (1.0 - p)) * inv
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// PWV constraint

fn pwv_check(t: &[f64], p: &[f64]) -> Result<()> {
    check_same_len("loss_pwv", t.len(), p.len())?;
    if t.is_empty() || !t.len().is_multiple_of(PWV_LAYERS) {
        return Err(Error::Shape {
            context: "loss_pwv channels",
            expected: vec![PWV_LAYERS],
            got: vec![t.len()],
        });
    }
    Ok(())
}

/// Mean squared error over all 18 channels and pixels.
pub fn loss_pwv(pwv_true: &[f64], pwv_pred: &[f64]) -> Result<f64> {
    pwv_check(pwv_true, pwv_pred)?;
    Ok(pwv_true
        .iter()
        .zip(pwv_pred)
        .map(|(t, p)| (p - t) * (p - t))
        .sum::<f64>()
        / pwv_true.len() as f64)
}

pub fn loss_pwv_grad(pwv_true: &[f64], pwv_pred: &[f64]) -> Result<Vec<f64>> {
    pwv_check(pwv_true, pwv_pred)?;
    let inv = 2.0 / pwv_true.len() as f64;
    Ok(pwv_true.iter().zip(pwv_pred).map(|(t, p)| (p - t) * inv).collect())
}

// ---------------------------------------------------------------------------
// Composite

/// One sample's loss inputs. Rates are layer-major `L×H×W`; `prob`,
/// `geo_weight` and `supervised` are `H×W`.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub shape: GridShape,
    /// Raw truth (mm h⁻¹), used for intensity weights and rain labels.
    pub truth_raw: &'a [f64],
    pub truth: &'a [f64],
    pub pred: &'a [f64],
    pub prob: &'a [f64],
    pub geo_weight: &'a [f64],
    pub pwv_true: &'a [f64],
    pub pwv_pred: &'a [f64],
    pub supervised: Option<&'a [bool]>,
}

/// Gradients of the weighted total with respect to the three prediction heads.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub pred: Vec<f64>,
    pub prob: Vec<f64>,
    pub pwv_pred: Vec<f64>,
}

impl<'a> LossInputs<'a> {
    fn validate(&self) -> Result<()> {
        let (n, plane) = (self.shape.len(), self.shape.h * self.shape.w);
        for (context, len, want) in [
            ("loss_total truth_raw", self.truth_raw.len(), n),
            ("loss_total truth", self.truth.len(), n),
            ("loss_total pred", self.pred.len(), n),
            ("loss_total prob", self.prob.len(), plane),
            ("loss_total geo_weight", self.geo_weight.len(), plane),
        ] {
            check_same_len(context, want, len)?;
        }
        if let Some(m) = self.supervised {
            check_same_len("loss_total mask", plane, m.len())?;
        }
        pwv_check(self.pwv_true, self.pwv_pred)
    }

    /// Cell indices (layer-major) and pixel indices that are supervised.
    fn selection(&self) -> (Vec<usize>, Vec<usize>) {
        let plane = self.shape.h * self.shape.w;
        let pixels: Vec<usize> = match self.supervised {
            Some(m) => (0..plane).filter(|&p| m[p]).collect(),
            None => (0..plane).collect(),
        };
        let cells = (0..self.shape.layers)
            .flat_map(|l| pixels.iter().map(move |&p| l * plane + p))
            .collect();
        (cells, pixels)
    }
}

fn gather(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

fn scatter_add(out: &mut [f64], idx: &[usize], g: &[f64], scale: f64) {
    for (&i, v) in idx.iter().zip(g) {
        out[i] += scale * v;
    }
}

struct Prepared {
    cells: Vec<usize>,
    pixels: Vec<usize>,
    sens: SensParams,
    truth: Vec<f64>,
    pred: Vec<f64>,
    scale_w: Vec<f64>,
    prob: Vec<f64>,
    y_bin: Vec<f64>,
    geo_w: Vec<f64>,
    struct_pred: Vec<f64>,
}

fn prepare(x: &LossInputs, cfg: &LossConfig) -> Result<Prepared> {
    x.validate()?;
    let (cells, pixels) = x.selection();
    let surface_raw = &x.truth_raw[..x.shape.h * x.shape.w];
    let sens = SensParams {
        epsilon: normalize_rate(cfg.sens.epsilon),
        tau_small: normalize_rate(cfg.sens.tau_small),
    };
    let truth_raw_sel = gather(x.truth_raw, &cells);
    // Unsupervised pixels take the truth value so they add no structural mismatch.
    let struct_pred = match x.supervised {
        Some(m) => {
            let plane = x.shape.h * x.shape.w;
            x.pred
                .iter()
                .enumerate()
                .map(|(i, &v)| if m[i % plane] { v } else { x.truth[i] })
                .collect()
        }
        None => x.pred.to_vec(),
    };
    Ok(Prepared {
        sens,
        truth: gather(x.truth, &cells),
        pred: gather(x.pred, &cells),
        scale_w: scale_weights(&truth_raw_sel, &cfg.scale),
        prob: gather(x.prob, &pixels),
        y_bin: pixels
            .iter()
            .map(|&p| if surface_raw[p] >= cfg.sens.epsilon { 1.0 } else { 0.0 })
            .collect(),
        geo_w: gather(x.geo_weight, &pixels),
        struct_pred,
        cells,
        pixels,
    })
}

/// Weighted sum of all six terms for one sample.
pub fn loss_total(x: &LossInputs, cfg: &LossConfig) -> Result<LossBreakdown> {
    let pr = prepare(x, cfg)?;
    let w = &cfg.weights;
    let mut b = LossBreakdown::default();
    if pr.pixels.is_empty() {
        b.pwv = loss_pwv(x.pwv_true, x.pwv_pred)?;
        b.total = b.recompose(w);
        return Ok(b);
    }
    b.sens = loss_sens(&pr.truth, &pr.pred, &pr.sens)?;
    b.geo = loss_geo(&pr.prob, &pr.pred, &pr.geo_w)?;
    b.scale = weighted_square_error(&pr.truth, &pr.pred, &pr.scale_w)?;
    let st = loss_struct(x.truth, &pr.struct_pred, x.shape, &cfg.structure)?;
    b.structural = st.value;
    b.cc_degenerate = st.cc_degenerate;
    b.prob = loss_prob(&pr.y_bin, &pr.prob)?;
    b.pwv = loss_pwv(x.pwv_true, x.pwv_pred)?;
    b.total = b.recompose(w);
    Ok(b)
}

/// [`loss_total`] together with its gradient. Terms whose weight is zero
/// contribute exactly zero gradient.
pub fn loss_total_grad(x: &LossInputs, cfg: &LossConfig) -> Result<(LossBreakdown, LossGrads)> {
    let b = loss_total(x, cfg)?;
    let pr = prepare(x, cfg)?;
    let w = &cfg.weights;
    let mut g = LossGrads {
        pred: vec![0.0; x.pred.len()],
        prob: vec![0.0; x.prob.len()],
        pwv_pred: vec![0.0; x.pwv_pred.len()],
    };
    if w.lambda_pwv != 0.0 {
        for (o, v) in g.pwv_pred.iter_mut().zip(loss_pwv_grad(x.pwv_true, x.pwv_pred)?) {
            *o = w.lambda_pwv * v;
        }
    }
    if pr.pixels.is_empty() {
        return Ok((b, g));
    }
    if w.lambda_sens != 0.0 {
        let gs = loss_sens_grad(&pr.truth, &pr.pred, &pr.sens)?;
        scatter_add(&mut g.pred, &pr.cells, &gs, w.lambda_sens);
    }
    if w.lambda_geo != 0.0 {
        let (gp, gy) = loss_geo_grad(&pr.prob, &pr.pred, &pr.geo_w)?;
        scatter_add(&mut g.prob, &pr.pixels, &gp, w.lambda_geo);
        scatter_add(&mut g.pred, &pr.cells, &gy, w.lambda_geo);
    }
    if w.lambda_scale != 0.0 {
        let gs = weighted_square_error_grad(&pr.truth, &pr.pred, &pr.scale_w)?;
        scatter_add(&mut g.pred, &pr.cells, &gs, w.lambda_scale);
    }
    if w.lambda_struct != 0.0 {
        let gs = loss_struct_grad(x.truth, &pr.struct_pred, x.shape, &cfg.structure)?;
        let plane = x.shape.h * x.shape.w;
        for (i, v) in gs.into_iter().enumerate() {
            if x.supervised.is_none_or(|m| m[i % plane]) {
                g.pred[i] += w.lambda_struct * v;
            }
        }
    }
    if w.lambda_prob != 0.0 {
        let gp = loss_prob_grad(&pr.y_bin, &pr.prob)?;
        scatter_add(&mut g.prob, &pr.pixels, &gp, w.lambda_prob);
    }
    Ok((b, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sens_examples() {
        let p = SensParams::default();
        assert_eq!(loss_sens(&[0.0, 0.0], &[0.05, 0.1], &p).unwrap(), 0.0);
        assert!((loss_sens(&[0.05], &[0.5], &p).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(loss_sens(&[0.2, 5.0], &[9.0, 0.0], &p).unwrap(), 0.0);
        assert!(loss_sens(&[0.0], &[0.0, 1.0], &p).is_err());
    }

    #[test]
    fn geo_weight_examples() {
        let zero = GeoParams {
            alpha: 0.0,
            beta_lat: 0.0,
            ..Default::default()
        };
        assert_eq!(geo_weight(&[10.0, 80.0], &[30.0, 60.0], &zero).unwrap(), vec![1.0, 1.0]);
        let p = GeoParams::default();
        let w = geo_weight(&[0.0], &[0.0], &p).unwrap()[0];
        let want = (0.2f64 / (1.0 + 1e-6) + 0.2 / (1.0 + 1e-6)).exp();
        assert!((w - want).abs() < 1e-15);
        assert!((w - 1.4918).abs() < 1e-4);
        let w = geo_weight(&[89.99], &[0.0], &p).unwrap()[0];
        assert_eq!(w, 3f64.exp());
    }

    #[test]
    fn geo_examples() {
        assert_eq!(loss_geo(&[0.0], &[0.0], &[1.0]).unwrap(), 0.0);
        assert_eq!(loss_geo(&[0.5], &[2.0], &[1.0]).unwrap(), 2.5);
        let a = loss_geo(&[0.3, 0.7], &[1.0, 2.0], &[1.5, 2.0]).unwrap();
        let b = loss_geo(&[0.3, 0.7], &[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-15);
    }

    #[test]
    fn scale_examples() {
        let p = ScaleParams {
            lambda_ext: 2.0,
            tau_ext: 5.0,
            beta_ext: 1.0,
        };
        assert_eq!(loss_scale(&[3.0, 7.0], &[3.0, 7.0], &p).unwrap(), 0.0);
        assert_eq!(loss_scale(&[10.0], &[8.0], &p).unwrap(), 16.0);
        assert_eq!(loss_scale(&[1.0], &[0.0], &p).unwrap(), 1.0);
    }

    #[test]
    fn prob_examples() {
        let l = loss_prob(&[1.0], &[1.0 - 1e-7]).unwrap();
        assert!((l - 1e-7).abs() < 1e-12);
        let ln2 = std::f64::consts::LN_2;
        assert!((loss_prob(&[1.0], &[0.5]).unwrap() - ln2).abs() < 1e-15);
        assert!((loss_prob(&[0.0], &[0.5]).unwrap() - ln2).abs() < 1e-15);
    }

    #[test]
    fn pwv_examples() {
        let t: Vec<f64> = (0..36).map(|i| i as f64 * 0.5).collect();
        assert_eq!(loss_pwv(&t, &t).unwrap(), 0.0);
        let off: Vec<f64> = t.iter().map(|v| v + 1.0).collect();
        assert_eq!(loss_pwv(&t, &off).unwrap(), 1.0);
        let r1: Vec<f64> = t.iter().enumerate().map(|(i, v)| v + (i as f64).sin()).collect();
        let r2: Vec<f64> = t.iter().enumerate().map(|(i, v)| v + 2.0 * (i as f64).sin()).collect();
        let (a, b) = (loss_pwv(&t, &r1).unwrap(), loss_pwv(&t, &r2).unwrap());
        assert!((b - 4.0 * a).abs() < 1e-12);
        assert!(loss_pwv(&t[..17], &t[..17]).is_err());
    }

    fn pattern(h: usize, w: usize) -> Vec<f64> {
        (0..h * w).map(|i| [1.0, 2.0, 3.0][i % 3] / 10.0).collect()
    }

    #[test]
    fn struct_examples() {
        let s = GridShape::plane(12, 12);
        let p = StructParams::default();
        let y = pattern(12, 12);
        assert_eq!(loss_struct(&y, &y, s, &p).unwrap().value, 0.0);
        let shifted: Vec<f64> = y.iter().map(|v| v + 0.2).collect();
        let v = loss_struct(&y, &shifted, s, &p).unwrap();
        assert!(v.grad_l1.abs() < 1e-12);
        assert!((v.rho - 1.0).abs() < 1e-12);
        assert!(v.value > 0.0);
        let doubled: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let v = loss_struct(&y, &doubled, s, &p).unwrap();
        assert!((1.0 - v.rho).abs() < 1e-12);
    }

    #[test]
    fn struct_zero_variance_is_flagged() {
        let s = GridShape::plane(11, 11);
        let y = pattern(11, 11);
        let flat = vec![0.3; 121];
        let v = loss_struct(&y, &flat, s, &StructParams::default()).unwrap();
        assert!(v.cc_degenerate);
        let z = vec![0.0; 121];
        let v = loss_struct(&z, &z, s, &StructParams::default()).unwrap();
        assert!(!v.cc_degenerate);
        assert_eq!(v.value, 0.0);
    }

    fn inputs_fixture(h: usize, w: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let layers = 2;
        let raw: Vec<f64> = (0..layers * h * w).map(|i| ((i * 7) % 11) as f64).collect();
        let truth: Vec<f64> = raw.iter().map(|&r| normalize_rate(r)).collect();
        let prob: Vec<f64> = raw[..h * w].iter().map(|&r| if r >= 0.1 { 1.0 - 1e-7 } else { 1e-7 }).collect();
        let geo = vec![1.2; h * w];
        let pwv: Vec<f64> = (0..PWV_LAYERS * 4).map(|i| i as f64 * 0.1).collect();
        (raw, truth, prob, geo, pwv.clone(), pwv)
    }

    #[test]
    fn total_is_recomposed_weighted_sum() {
        let (raw, truth, prob, geo, pt, _) = inputs_fixture(12, 12);
        let pred: Vec<f64> = truth.iter().map(|v| (v * 0.8 + 0.05).min(1.0)).collect();
        let pp: Vec<f64> = pt.iter().map(|v| v + 0.3).collect();
        let x = LossInputs {
            shape: GridShape { layers: 2, h: 12, w: 12 },
            truth_raw: &raw,
            truth: &truth,
            pred: &pred,
            prob: &prob,
            geo_weight: &geo,
            pwv_true: &pt,
            pwv_pred: &pp,
            supervised: None,
        };
        let cfg = LossConfig::default();
        let b = loss_total(&x, &cfg).unwrap();
        assert!((b.total - b.recompose(&cfg.weights)).abs() <= 1e-12 * b.total.abs());
        let mut only_prob = cfg;
        only_prob.weights = LossWeights {
            lambda_prob: 1.0,
            ..LossWeights::zero()
        };
        let b2 = loss_total(&x, &only_prob).unwrap();
        assert_eq!(b2.total, b2.prob);
    }

    #[test]
    fn masked_pixels_do_not_contribute() {
        let (raw, truth, prob, geo, pt, pp) = inputs_fixture(12, 12);
        let mut pred = truth.clone();
        let mask: Vec<bool> = (0..144).map(|p| p % 5 != 0).collect();
        for (i, v) in pred.iter_mut().enumerate() {
            if !mask[i % 144] {
                *v = 0.9;
            }
        }
        let x = LossInputs {
            shape: GridShape { layers: 2, h: 12, w: 12 },
            truth_raw: &raw,
            truth: &truth,
            pred: &pred,
            prob: &prob,
            geo_weight: &geo,
            pwv_true: &pt,
            pwv_pred: &pp,
            supervised: Some(&mask),
        };
        let mut cfg = LossConfig::default();
        cfg.weights.lambda_geo = 0.0;
        let (b, g) = loss_total_grad(&x, &cfg).unwrap();
        assert!(b.total < 1e-6, "{b:?}");
        for (i, v) in g.pred.iter().enumerate() {
            if !mask[i % 144] {
                assert_eq!(*v, 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn pointwise_losses_are_permutation_invariant(
            vals in prop::collection::vec((0.0f64..20.0, 0.0f64..20.0, 0.01f64..0.99, 1.0f64..5.0), 18..40),
            seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let n = vals.len() / 18 * 18;
            let vals = &vals[..n];
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let col = |k: usize, idx: &[usize]| -> Vec<f64> {
                idx.iter().map(|&i| match k { 0 => vals[i].0, 1 => vals[i].1, 2 => vals[i].2, _ => vals[i].3 }).collect()
            };
            let id: Vec<usize> = (0..n).collect();
            let (y, yh, p, w) = (col(0, &id), col(1, &id), col(2, &id), col(3, &id));
            let (y2, yh2, p2, w2) = (col(0, &perm), col(1, &perm), col(2, &perm), col(3, &perm));
            let yb: Vec<f64> = y.iter().map(|v| if *v > 10.0 { 1.0 } else { 0.0 }).collect();
            let yb2: Vec<f64> = y2.iter().map(|v| if *v > 10.0 { 1.0 } else { 0.0 }).collect();
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1.0);
            prop_assert!(close(loss_sens(&y, &yh, &SensParams::default()).unwrap(), loss_sens(&y2, &yh2, &SensParams::default()).unwrap()));
            prop_assert!(close(loss_geo(&p, &yh, &w).unwrap(), loss_geo(&p2, &yh2, &w2).unwrap()));
            prop_assert!(close(loss_scale(&y, &yh, &ScaleParams::default()).unwrap(), loss_scale(&y2, &yh2, &ScaleParams::default()).unwrap()));
            prop_assert!(close(loss_prob(&yb, &p).unwrap(), loss_prob(&yb2, &p2).unwrap()));
            prop_assert!(close(loss_pwv(&y, &yh).unwrap(), loss_pwv(&y2, &yh2).unwrap()));
        }

        #[test]
        fn losses_are_non_negative(
            vals in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 144),
        ) {
            let y: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let yh: Vec<f64> = vals.iter().map(|v| v.1).collect();
            prop_assert!(loss_sens(&y, &yh, &SensParams::default()).unwrap() >= 0.0);
            prop_assert!(loss_scale(&y, &yh, &ScaleParams::default()).unwrap() >= 0.0);
            let st = loss_struct(&y, &yh, GridShape::plane(12, 12), &StructParams::default()).unwrap();
            prop_assert!(st.value >= 0.0);
        }
    }
}
