//! Central finite-difference verification of analytic gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    /// Base step; component `i` uses `h·(1 + |x_i|)`.
    pub h: f64,
    /// Magnitude below which a gradient component is compared absolutely:
    /// the relative error denominator is `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Additional floor as a fraction of `max_j |analytic_j|`, so components
    /// that are negligible next to the gradient scale are not judged against
    /// finite-difference roundoff alone.
    pub rel_floor: f64,
    /// Components whose difference quotients at `h` and `h/2` disagree by
    /// more than this (relative) straddle a kink and are skipped.
    pub kink_tol: f64,
    /// Restrict the check to these components.
    pub indices: Option<Vec<usize>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            floor: 1e-8,
            rel_floor: 1e-3,
            kink_tol: 1e-3,
            indices: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Components skipped because the stencil crossed a non-differentiable point.
    pub rejected: usize,
}

/// Worst relative error between `analytic` and central differences of `f` at `x`.
pub fn grad_check<F>(f: F, analytic: &[f64], x: &[f64], opts: &GradCheckOptions) -> GradCheck
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    assert_eq!(analytic.len(), x.len(), "gradient length must match input");
    let all: Vec<usize>;
    let idx: &[usize] = match &opts.indices {
        Some(v) => v,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let scale_floor = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs())) * opts.rel_floor;
    let floor = opts.floor.max(scale_floor);
    let results: Vec<Option<(usize, f64)>> = idx
        .par_iter()
        .map(|&i| {
            let step = opts.h * (1.0 + x[i].abs());
            let mut probe = x.to_vec();
            let mut diff = |s: f64| {
                probe[i] = x[i] + s;
                let up = f(&probe);
                probe[i] = x[i] - s;
                let down = f(&probe);
                probe[i] = x[i];
                (up - down) / (2.0 * s)
            };
            let full = diff(step);
            let half = diff(step / 2.0);
            let scale = full.abs().max(half.abs()).max(opts.floor);
            if (full - half).abs() > opts.kink_tol * scale {
                return None;
            }
            let a = analytic[i];
            let denom = a.abs().max(full.abs()).max(floor);
            Some((i, (a - full).abs() / denom))
        })
        .collect();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        rejected: 0,
    };
    for r in results {
        match r {
            None => out.rejected += 1,
            Some((i, e)) => {
                out.checked += 1;
                if out.worst_index.is_none() || e > out.max_rel_error {
                    out.max_rel_error = e;
                    out.worst_index = Some(i);
                }
            }
        }
    }
    out
}
