//! Gridded domain types shared by every stage of the pipeline.
//!
//! All grids are row-major with the channel (or layer) axis outermost, so a
//! `C×H×W` field stores channel `c`, row `i`, column `j` at `c*H*W + i*W + j`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TBB_CHANNELS: usize = 9;
pub const STATIC_CHANNELS: usize = 6;
pub const INPUT_CHANNELS: usize = TBB_CHANNELS + STATIC_CHANNELS;
pub const LAYERS: usize = 72;
pub const LAYER_THICKNESS_M: f64 = 250.0;
pub const PWV_LAYERS: usize = 18;

pub const TBB_VALID: (f64, f64) = (150.0, 350.0);
pub const TBB_DEFAULT_RANGE: ChannelRange = ChannelRange {
    min: 180.0,
    max: 330.0,
};
pub const ELEVATION_CAP_M: f64 = 9000.0;
/// IGBP land-cover classes 0..=16.
pub const LANDCOVER_CLASSES: u16 = 17;

/// Rates above this are saturated by the normalized-rate map.
pub const RATE_CAP: f64 = 100.0;
/// Rain/no-rain threshold in mm h⁻¹.
pub const RAIN_THRESHOLD: f64 = 0.1;

/// Height of the midpoint of layer `l` in meters.
pub fn layer_midpoint_m(l: usize) -> f64 {
    (l as f64 + 0.5) * LAYER_THICKNESS_M
}

/// `ln(1 + min(y, cap)) / ln(1 + cap)`, mapping rates in mm h⁻¹ onto [0, 1].
pub fn normalize_rate(y: f64) -> f64 {
    (1.0 + y.clamp(0.0, RATE_CAP)).ln() / (1.0 + RATE_CAP).ln()
}

pub fn denormalize_rate(v: f64) -> f64 {
    ((v * (1.0 + RATE_CAP).ln()).exp() - 1.0).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelRange {
    pub min: f64,
    pub max: f64,
}

impl ChannelRange {
    pub const fn new(min: f64, max: f64) -> Self {
        ChannelRange { min, max }
    }
}

/// Default physical ranges for the 15 input channels: nine TBB channels
/// followed by lat, lon, elevation, land cover, viewing zenith, solar time.
pub fn default_ranges() -> Vec<ChannelRange> {
    let mut r = vec![TBB_DEFAULT_RANGE; TBB_CHANNELS];
    r.extend([
        ChannelRange::new(-90.0, 90.0),
        ChannelRange::new(-180.0, 180.0),
        ChannelRange::new(0.0, ELEVATION_CAP_M),
        ChannelRange::new(0.0, (LANDCOVER_CLASSES - 1) as f64),
        ChannelRange::new(0.0, 90.0),
        ChannelRange::new(0.0, 24.0),
    ]);
    r
}

/// The 15-channel input scene. Missing TBB values are stored as NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralScene {
    pub h: usize,
    pub w: usize,
    /// `9×H×W` brightness temperatures in kelvin.
    pub tbb: Vec<f64>,
    pub lat: Vec<f64>,
    pub lon: Vec<f64>,
    pub elevation: Vec<f64>,
    pub landcover: Vec<u16>,
    pub vza: Vec<f64>,
    pub solar_time: Vec<f64>,
}

impl SpectralScene {
    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pixels();
        if n == 0 {
            return Err(Error::validation("scene has zero pixels"));
        }
        let grids: [(&str, usize); 7] = [
            ("tbb", self.tbb.len()),
            ("lat", self.lat.len()),
            ("lon", self.lon.len()),
            ("elevation", self.elevation.len()),
            ("landcover", self.landcover.len()),
            ("vza", self.vza.len()),
            ("solar_time", self.solar_time.len()),
        ];
        for (name, len) in grids {
            let want = if name == "tbb" { TBB_CHANNELS * n } else { n };
            if len != want {
                return Err(Error::validation(format!(
                    "{name} grid has {len} values, expected {want} for {}x{}",
                    self.h, self.w
                )));
            }
        }
        if let Some(t) = self
            .tbb
            .iter()
            .find(|t| !t.is_nan() && !(TBB_VALID.0..=TBB_VALID.1).contains(*t))
        {
            return Err(Error::validation(format!("TBB {t} K outside [150, 350]")));
        }
        if self.lat.iter().any(|v| !(v.abs() <= 90.0)) {
            return Err(Error::validation("|lat| > 90"));
        }
        if self.lon.iter().any(|v| !(-180.0..=180.0).contains(v)) {
            return Err(Error::validation("lon outside [-180, 180]"));
        }
        if self.vza.iter().any(|v| !(0.0..=90.0).contains(v)) {
            return Err(Error::validation("vza outside [0, 90]"));
        }
        if self.solar_time.iter().any(|v| !(0.0..24.0).contains(v)) {
            return Err(Error::validation("solar_time outside [0, 24)"));
        }
        if self.elevation.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite elevation"));
        }
        Ok(())
    }

    pub fn tbb_channel(&self, k: usize) -> &[f64] {
        let n = self.pixels();
        &self.tbb[k * n..(k + 1) * n]
    }

    /// Raw values of input channel `c` (0..15) as `f64`.
    fn channel(&self, c: usize) -> Vec<f64> {
        match c {
            0..=8 => self.tbb_channel(c).to_vec(),
            9 => self.lat.clone(),
            10 => self.lon.clone(),
            11 => self.elevation.clone(),
            12 => self.landcover.iter().map(|&v| v as f64).collect(),
            13 => self.vza.clone(),
            14 => self.solar_time.clone(),
            _ => unreachable!("channel index {c}"),
        }
    }

    /// Pack into a `15×H×W` tensor (raw physical units), used for file exchange.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(INPUT_CHANNELS * self.pixels());
        for c in 0..INPUT_CHANNELS {
            data.extend(self.channel(c));
        }
        Tensor::new(vec![INPUT_CHANNELS, self.h, self.w], data).expect("sized by construction")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let &[c, h, w] = t.dims() else {
            return Err(Error::Shape {
                context: "SpectralScene::from_tensor",
                expected: vec![INPUT_CHANNELS, 0, 0],
                got: t.dims().to_vec(),
            });
        };
        if c != INPUT_CHANNELS {
            return Err(Error::Shape {
                context: "SpectralScene::from_tensor",
                expected: vec![INPUT_CHANNELS, h, w],
                got: t.dims().to_vec(),
            });
        }
        let n = h * w;
        let ch = |k: usize| t.data()[k * n..(k + 1) * n].to_vec();
        let scene = SpectralScene {
            h,
            w,
            tbb: t.data()[..TBB_CHANNELS * n].to_vec(),
            lat: ch(9),
            lon: ch(10),
            elevation: ch(11),
            landcover: ch(12).into_iter().map(|v| v.round() as u16).collect(),
            vza: ch(13),
            solar_time: ch(14),
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// Output of [`normalize_scene`]: a `15×H×W` grid in [0, 1] plus the
/// companion missing-value mask (`9×H×W`, 1 where the TBB was missing).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedScene {
    pub values: Tensor,
    pub missing: Tensor,
    pub missing_count: usize,
}

/// `(v − min)/(max − min)` clipped to [0, 1].
pub fn normalize_value(v: f64, range: ChannelRange) -> f64 {
    ((v - range.min) / (range.max - range.min)).clamp(0.0, 1.0)
}

pub fn normalize_scene(scene: &SpectralScene, ranges: &[ChannelRange]) -> Result<NormalizedScene> {
    if ranges.len() != INPUT_CHANNELS {
        return Err(Error::Shape {
            context: "normalize_scene ranges",
            expected: vec![INPUT_CHANNELS],
            got: vec![ranges.len()],
        });
    }
    if let Some(r) = ranges.iter().find(|r| !(r.max > r.min)) {
        return Err(Error::validation(format!(
            "channel range [{}, {}] is empty",
            r.min, r.max
        )));
    }
    scene.validate()?;
    let n = scene.pixels();
    let mut values = Vec::with_capacity(INPUT_CHANNELS * n);
    let mut missing = vec![0.0; TBB_CHANNELS * n];
    let mut missing_count = 0;
    for (c, r) in ranges.iter().enumerate() {
        for (i, v) in scene.channel(c).into_iter().enumerate() {
            if v.is_nan() {
                missing[c * n + i] = 1.0;
                missing_count += 1;
                values.push(0.0);
            } else {
                values.push(normalize_value(v, *r));
            }
        }
    }
    Ok(NormalizedScene {
        values: Tensor::new(vec![INPUT_CHANNELS, scene.h, scene.w], values)?,
        missing: Tensor::new(vec![TBB_CHANNELS, scene.h, scene.w], missing)?,
        missing_count,
    })
}

/// The six raw static features fed to the model's learned static embedding:
/// `lat/90`, `lon/180`, `min(elev, 9000)/9000`, normalized land-cover id,
/// `cos(vza)` and `sin(2π·t/24)`.
pub fn encode_static(scene: &SpectralScene) -> Result<Tensor> {
    scene.validate()?;
    let n = scene.pixels();
    let mut out = Vec::with_capacity(STATIC_CHANNELS * n);
    out.extend(scene.lat.iter().map(|v| v / 90.0));
    out.extend(scene.lon.iter().map(|v| v / 180.0));
    out.extend(
        scene
            .elevation
            .iter()
            .map(|v| v.clamp(-ELEVATION_CAP_M, ELEVATION_CAP_M) / ELEVATION_CAP_M),
    );
    out.extend(
        scene
            .landcover
            .iter()
            .map(|&v| v.min(LANDCOVER_CLASSES - 1) as f64 / (LANDCOVER_CLASSES - 1) as f64),
    );
    out.extend(scene.vza.iter().map(|v| v.to_radians().cos()));
    out.extend(
        scene
            .solar_time
            .iter()
            .map(|t| (2.0 * std::f64::consts::PI * t / 24.0).sin()),
    );
    Tensor::new(vec![STATIC_CHANNELS, scene.h, scene.w], out)
}

/// Model input: the nine normalized TBB channels followed by the six
/// [`encode_static`] features, as a `15×H×W` tensor.
pub fn model_input(scene: &SpectralScene) -> Result<Tensor> {
    let norm = normalize_scene(scene, &default_ranges())?;
    let n = scene.pixels();
    let mut data = norm.values.into_data();
    data.truncate(TBB_CHANNELS * n);
    data.extend_from_slice(encode_static(scene)?.data());
    Tensor::new(vec![INPUT_CHANNELS, scene.h, scene.w], data)
}

/// Layered precipitation rates, `L×H×W` in mm h⁻¹, layer 0 at the surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecipVolume {
    pub h: usize,
    pub w: usize,
    pub rate: Vec<f64>,
}

impl PrecipVolume {
    pub fn new(h: usize, w: usize, rate: Vec<f64>) -> Result<Self> {
        let v = PrecipVolume { h, w, rate };
        v.validate()?;
        Ok(v)
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        PrecipVolume {
            h,
            w,
            rate: vec![0.0; LAYERS * h * w],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rate.len() != LAYERS * self.h * self.w {
            return Err(Error::Shape {
                context: "PrecipVolume",
                expected: vec![LAYERS, self.h, self.w],
                got: vec![self.rate.len()],
            });
        }
        if self.rate.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::validation("precipitation rates must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.rate[l * n..(l + 1) * n]
    }

    /// Vertical profile at pixel `p` (row-major pixel index).
    pub fn profile(&self, p: usize) -> Vec<f64> {
        let n = self.h * self.w;
        (0..LAYERS).map(|l| self.rate[l * n + p]).collect()
    }

    pub fn surface(&self) -> SurfaceField {
        SurfaceField {
            h: self.h,
            w: self.w,
            rate: self.layer(0).to_vec(),
        }
    }

    pub fn normalized(&self) -> Vec<f64> {
        self.rate.iter().map(|&r| normalize_rate(r)).collect()
    }

    pub fn from_normalized(h: usize, w: usize, values: &[f64]) -> Self {
        PrecipVolume {
            h,
            w,
            rate: values.iter().map(|&v| denormalize_rate(v)).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![LAYERS, self.h, self.w], self.rate.clone()).expect("validated")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.dims() {
            [LAYERS, h, w] => Self::new(h, w, t.data().to_vec()),
            _ => Err(Error::Shape {
                context: "PrecipVolume::from_tensor",
                expected: vec![LAYERS, 0, 0],
                got: t.dims().to_vec(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceField {
    pub h: usize,
    pub w: usize,
    pub rate: Vec<f64>,
}

/// Layer-integrated precipitable water vapor, `18×H×W` in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwvStack {
    pub h: usize,
    pub w: usize,
    pub pwv: Vec<f64>,
}

impl PwvStack {
    pub fn new(h: usize, w: usize, pwv: Vec<f64>) -> Result<Self> {
        if pwv.len() != PWV_LAYERS * h * w {
            return Err(Error::Shape {
                context: "PwvStack",
                expected: vec![PWV_LAYERS, h, w],
                got: vec![pwv.len()],
            });
        }
        if pwv.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::validation("PWV values must be finite and >= 0"));
        }
        Ok(PwvStack { h, w, pwv })
    }

    /// Column total at pixel `p`.
    pub fn total(&self, p: usize) -> f64 {
        let n = self.h * self.w;
        (0..PWV_LAYERS).map(|c| self.pwv[c * n + p]).sum()
    }

    /// Block-mean pooling by `factor` in both spatial dims.
    pub fn pooled(&self, factor: usize) -> Result<Tensor> {
        if factor == 0 || !self.h.is_multiple_of(factor) || !self.w.is_multiple_of(factor) {
            return Err(Error::validation(format!(
                "{}x{} PWV grid not divisible by {factor}",
                self.h, self.w
            )));
        }
        let (ph, pw) = (self.h / factor, self.w / factor);
        let mut out = vec![0.0; PWV_LAYERS * ph * pw];
        let inv = 1.0 / (factor * factor) as f64;
        for c in 0..PWV_LAYERS {
            for i in 0..self.h {
                for j in 0..self.w {
                    out[c * ph * pw + (i / factor) * pw + j / factor] +=
                        self.pwv[c * self.h * self.w + i * self.w + j] * inv;
                }
            }
        }
        Tensor::new(vec![PWV_LAYERS, ph, pw], out)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![PWV_LAYERS, self.h, self.w], self.pwv.clone()).expect("validated")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.dims() {
            [PWV_LAYERS, h, w] => Self::new(h, w, t.data().to_vec()),
            _ => Err(Error::Shape {
                context: "PwvStack::from_tensor",
                expected: vec![PWV_LAYERS, 0, 0],
                got: t.dims().to_vec(),
            }),
        }
    }
}
