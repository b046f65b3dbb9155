//! Layer-wise precipitable water vapor from specific humidity on pressure levels.
//!
//! Each layer between consecutive pressure levels contributes
//! `q̄·ΔP / (g·ρ_w)`, with `q̄` the mean of the two bounding humidities and
//! `ΔP` in pascals; the result is reported in millimeters.

use crate::error::{Error, Result};
use crate::fields::{PwvStack, PWV_LAYERS};

pub const PRESSURE_LEVELS_HPA: [f64; PWV_LAYERS + 1] = [
    1000.0, 925.0, 850.0, 700.0, 600.0, 500.0, 400.0, 300.0, 250.0, 200.0, 150.0, 100.0, 70.0,
    50.0, 30.0, 20.0, 10.0, 5.0, 1.0,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysConstants {
    /// m s⁻²
    pub g: f64,
    /// kg m⁻³
    pub rho_w: f64,
}

pub const PHYS: PhysConstants = PhysConstants {
    g: 9.80665,
    rho_w: 1000.0,
};

#[derive(Debug, Clone, PartialEq)]
pub struct PressureProfile {
    /// hPa, strictly decreasing.
    pub levels: Vec<f64>,
    /// Specific humidity per level, kg kg⁻¹.
    pub q: Vec<f64>,
}

impl PressureProfile {
    /// Profile on the standard 19 levels.
    pub fn standard(q: Vec<f64>) -> Self {
        PressureProfile {
            levels: PRESSURE_LEVELS_HPA.to_vec(),
            q,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.len() != PWV_LAYERS + 1 || self.q.len() != PWV_LAYERS + 1 {
            return Err(Error::validation(format!(
                "pressure profile needs {} levels, got {} pressures and {} humidities",
                PWV_LAYERS + 1,
                self.levels.len(),
                self.q.len()
            )));
        }
        if self.levels.windows(2).any(|p| !(p[0] > p[1])) {
            return Err(Error::validation("pressure levels must be strictly decreasing"));
        }
        if self.q.iter().any(|q| !(q.is_finite() && *q >= 0.0)) {
            return Err(Error::validation("specific humidity must be finite and >= 0"));
        }
        Ok(())
    }
}

/// The 18 layer PWV values (mm) of one column.
pub fn integrate_layer_pwv(profile: &PressureProfile) -> Result<[f64; PWV_LAYERS]> {
    profile.validate()?;
    let scale = 1000.0 / (PHYS.g * PHYS.rho_w);
    let mut out = [0.0; PWV_LAYERS];
    for (i, v) in out.iter_mut().enumerate() {
        let q_mean = 0.5 * (profile.q[i] + profile.q[i + 1]);
        let dp_pa = (profile.levels[i] - profile.levels[i + 1]) * 100.0;
        *v = q_mean * dp_pa * scale;
    }
    Ok(out)
}

/// Grid per-pixel profiles (row-major, `h*w` of them) into a [`PwvStack`].
pub fn pwv_stack_for_scene(h: usize, w: usize, profiles: &[PressureProfile]) -> Result<PwvStack> {
    if profiles.len() != h * w {
        return Err(Error::Shape {
            context: "pwv_stack_for_scene",
            expected: vec![h, w],
            got: vec![profiles.len()],
        });
    }
    let n = h * w;
    let mut pwv = vec![0.0; PWV_LAYERS * n];
    for (p, prof) in profiles.iter().enumerate() {
        for (c, v) in integrate_layer_pwv(prof)?.into_iter().enumerate() {
            pwv[c * n + p] = v;
        }
    }
    PwvStack::new(h, w, pwv)
}
