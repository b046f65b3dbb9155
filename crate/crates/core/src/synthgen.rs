//! Synthetic (scene, volume, PWV) triples with the couplings the retrieval
//! relies on: cold tops over deep rain, moisture-gated rain and cold,
//! dry cirrus decoys.
//!
//! Every sample is a pure function of `(config, index)`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collocate::MatchRecord;
use crate::error::{Error, Result};
use crate::fields::{layer_midpoint_m, PrecipVolume, PwvStack, SpectralScene, LAYERS, PWV_LAYERS, TBB_CHANNELS};
use crate::pwv::{integrate_layer_pwv, PressureProfile, PRESSURE_LEVELS_HPA};

/// Forward-model constants.
pub mod consts {
    /// Peak surface intensity of a core, mm h⁻¹, drawn uniformly.
    pub const CORE_INTENSITY: (f64, f64) = (1.0, 50.0);
    /// Core σ as a fraction of `min(H, W)`, drawn uniformly.
    pub const CORE_SIGMA_FRAC: (f64, f64) = (0.06, 0.12);
    /// Cores are cut off beyond this many σ.
    pub const CORE_TRUNCATION: f64 = 3.0;
    pub const ECHO_TOP_BASE_KM: f64 = 3.0;
    pub const ECHO_TOP_SLOPE_KM: f64 = 2.5;
    pub const ECHO_TOP_MAX_KM: f64 = 18.0;
    pub const TBB_BASE_K: f64 = 290.0;
    pub const TBB_CHANNEL_STEP_K: f64 = 4.0;
    /// Depression at an 18 km top.
    pub const CLOUD_DEPRESSION_K: f64 = 60.0;
    pub const CIRRUS_DEPRESSION_K: f64 = 50.0;
    /// Cirrus patch radius as a fraction of `min(H, W)`.
    pub const CIRRUS_RADIUS_FRAC: f64 = 0.15;
    pub const PWV_BACKGROUND_MM: f64 = 20.0;
    pub const PWV_PER_RATE: f64 = 0.8;
    /// Grid spacing of the synthetic lat/lon mesh, degrees.
    pub const GRID_SPACING_DEG: f64 = 0.04;
    /// Seconds between consecutive samples of a dataset.
    pub const SAMPLE_INTERVAL_S: f64 = 3600.0;
}

use consts::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub n_cores: usize,
    pub cirrus_fraction: f64,
    /// mm; pixels and cores drier than this carry no rain.
    pub gate_pwv: f64,
    /// K
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            h: 32,
            w: 32,
            n_cores: 3,
            cirrus_fraction: 0.15,
            gate_pwv: 30.0,
            noise_sigma: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h < 16 || self.w < 16 {
            return Err(Error::validation(format!("synthetic tiles must be at least 16x16, got {}x{}", self.h, self.w)));
        }
        if !(0.0..=1.0).contains(&self.cirrus_fraction) {
            return Err(Error::validation("cirrus_fraction must lie in [0, 1]"));
        }
        if !(self.gate_pwv.is_finite() && self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::validation("gate_pwv and noise_sigma must be finite, noise_sigma >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Core {
    /// Centre in fractional pixel coordinates.
    pub row: f64,
    pub col: f64,
    pub sigma: f64,
    pub intensity: f64,
    /// Deleted from the rain field by the moisture gate.
    pub gated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub scene: SpectralScene,
    pub volume: PrecipVolume,
    pub pwv: PwvStack,
    /// TBB the scene would have without any cloud (baseline plus noise).
    pub clear_tbb: Vec<f64>,
    pub cirrus: Vec<bool>,
    pub cores: Vec<Core>,
}

pub fn echo_top_km(intensity: f64) -> f64 {
    (ECHO_TOP_BASE_KM + ECHO_TOP_SLOPE_KM * intensity.ln_1p()).min(ECHO_TOP_MAX_KM)
}

pub fn baseline_tbb(k: usize) -> f64 {
    TBB_BASE_K - TBB_CHANNEL_STEP_K * k as f64
}

/// Truncated Gaussian footprint of a core at pixel centre `(i, j)`.
pub fn core_footprint(core: &Core, i: usize, j: usize) -> f64 {
    let (dr, dc) = (i as f64 + 0.5 - core.row, j as f64 + 0.5 - core.col);
    let r2 = dr * dr + dc * dc;
    let cut = CORE_TRUNCATION * core.sigma;
    if r2 > cut * cut {
        0.0
    } else {
        core.intensity * (-r2 / (2.0 * core.sigma * core.sigma)).exp()
    }
}

/// Rain rate at height `z_m` for a column with surface rate `surface`.
pub fn rate_at_height(surface: f64, z_m: f64) -> f64 {
    if surface <= 0.0 {
        return 0.0;
    }
    let top_m = echo_top_km(surface) * 1000.0;
    surface * (1.0 - z_m / top_m).max(0.0)
}

/// Fraction of column PWV in each of the 18 layers, from a fixed reference
/// humidity profile.
pub fn layer_fractions() -> [f64; PWV_LAYERS] {
    let q: Vec<f64> = PRESSURE_LEVELS_HPA.iter().map(|p| 0.016 * (p / 1000.0).powi(3)).collect();
    let layers = integrate_layer_pwv(&PressureProfile::standard(q)).expect("reference profile is valid");
    let total: f64 = layers.iter().sum();
    layers.map(|v| v / total)
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn generate_sample(config: &SynthConfig, index: u64) -> Result<SynthSample> {
    config.validate()?;
    let (h, w) = (config.h, config.w);
    let n = h * w;
    let mut rng = sample_rng(config.seed, index);
    let side = h.min(w) as f64;

    let mut cores: Vec<Core> = (0..config.n_cores)
        .map(|_| {
            let intensity = rng.random_range(CORE_INTENSITY.0..=CORE_INTENSITY.1);
            let sigma = side * rng.random_range(CORE_SIGMA_FRAC.0..CORE_SIGMA_FRAC.1);
            Core {
                row: rng.random_range(0.0..h as f64),
                col: rng.random_range(0.0..w as f64),
                sigma,
                intensity,
                gated: false,
            }
        })
        .collect();
    for c in &mut cores {
        c.gated = PWV_BACKGROUND_MM + PWV_PER_RATE * c.intensity < config.gate_pwv;
    }

    let mut cirrus = vec![false; n];
    let target = (config.cirrus_fraction * n as f64).ceil() as usize;
    let radius = CIRRUS_RADIUS_FRAC * side;
    let mut covered = 0;
    let mut attempts = 0;
    while covered < target && attempts < 10_000 {
        attempts += 1;
        let (cr, cc) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        for i in 0..h {
            for j in 0..w {
                let (dr, dc) = (i as f64 + 0.5 - cr, j as f64 + 0.5 - cc);
                if dr * dr + dc * dc <= radius * radius && !cirrus[i * w + j] {
                    cirrus[i * w + j] = true;
                    covered += 1;
                }
            }
        }
    }

    // moisture-carrying cloud intensity and the gated rain intensity
    let mut cloud = vec![0.0; n];
    let mut rain = vec![0.0; n];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            for c in &cores {
                let v = core_footprint(c, i, j);
                cloud[p] += v;
                if !c.gated {
                    rain[p] += v;
                }
            }
        }
    }
    let pwv_total: Vec<f64> = (0..n)
        .map(|p| {
            if cirrus[p] {
                PWV_BACKGROUND_MM
            } else {
                PWV_BACKGROUND_MM + PWV_PER_RATE * cloud[p]
            }
        })
        .collect();
    for p in 0..n {
        if cirrus[p] || pwv_total[p] < config.gate_pwv {
            rain[p] = 0.0;
        }
    }

    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::validation(e.to_string()))?;
    let mut clear_tbb = vec![0.0; TBB_CHANNELS * n];
    let mut tbb = vec![0.0; TBB_CHANNELS * n];
    for k in 0..TBB_CHANNELS {
        for p in 0..n {
            let clear = baseline_tbb(k) + noise.sample(&mut rng);
            let mut depression = 0.0;
            if cloud[p] > 0.0 {
                depression = CLOUD_DEPRESSION_K * echo_top_km(cloud[p]) / ECHO_TOP_MAX_KM;
            }
            if cirrus[p] {
                depression = f64::max(depression, CIRRUS_DEPRESSION_K);
            }
            clear_tbb[k * n + p] = clear;
            tbb[k * n + p] = clear - depression;
        }
    }

    let mut rate = vec![0.0; LAYERS * n];
    for l in 0..LAYERS {
        let z = layer_midpoint_m(l);
        for p in 0..n {
            rate[l * n + p] = rate_at_height(rain[p], z);
        }
    }

    let fractions = layer_fractions();
    let mut pwv = vec![0.0; PWV_LAYERS * n];
    for (c, f) in fractions.iter().enumerate() {
        for p in 0..n {
            pwv[c * n + p] = f * pwv_total[p];
        }
    }

    let lat0 = rng.random_range(-40.0..40.0);
    let lon0 = rng.random_range(-170.0..170.0);
    let elevation = rng.random_range(0.0..1500.0);
    let landcover = rng.random_range(0..crate::fields::LANDCOVER_CLASSES);
    let vza = rng.random_range(0.0..60.0);
    let solar_time = rng.random_range(0.0..24.0);
    let mut lat = vec![0.0; n];
    let mut lon = vec![0.0; n];
    for i in 0..h {
        for j in 0..w {
            lat[i * w + j] = lat0 - GRID_SPACING_DEG * i as f64;
            lon[i * w + j] = lon0 + GRID_SPACING_DEG * j as f64;
        }
    }
    let scene = SpectralScene {
        h,
        w,
        tbb,
        lat,
        lon,
        elevation: vec![elevation; n],
        landcover: vec![landcover; n],
        vza: vec![vza; n],
        solar_time: vec![solar_time; n],
    };
    scene.validate()?;
    Ok(SynthSample {
        scene,
        volume: PrecipVolume::new(h, w, rate)?,
        pwv: PwvStack::new(h, w, pwv)?,
        clear_tbb,
        cirrus,
        cores,
    })
}

impl SynthSample {
    pub fn into_record(self, config: &SynthConfig, index: u64) -> MatchRecord {
        let n = self.scene.pixels();
        let provenance = BTreeMap::from([
            ("source".to_string(), "synthetic".to_string()),
            ("seed".to_string(), config.seed.to_string()),
            ("index".to_string(), index.to_string()),
        ]);
        MatchRecord {
            scene: self.scene,
            volume: self.volume,
            pwv: self.pwv,
            scene_time: index as f64 * SAMPLE_INTERVAL_S,
            n_matched_points: n,
            supervised: vec![true; n],
            provenance,
        }
    }
}

/// `n_samples` fully supervised records, indices `0..n_samples`.
pub fn generate_dataset(config: &SynthConfig, n_samples: usize) -> Result<Vec<MatchRecord>> {
    if n_samples == 0 {
        return Err(Error::validation("n_samples must be at least 1"));
    }
    config.validate()?;
    (0..n_samples as u64)
        .into_par_iter()
        .map(|i| generate_sample(config, i).map(|s| s.into_record(config, i)))
        .collect()
}
