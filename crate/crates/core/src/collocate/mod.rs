//! Spatiotemporal collocation of gridded scenes with radar profile observations.
//!
//! A point matches a grid cell when their great-circle separation is within
//! `radius` degrees and their times differ by at most `window` seconds. The
//! spatial search runs on a KD-tree over unit-sphere coordinates with the
//! angular radius converted to its chord; candidates are then confirmed
//! with the exact great-circle predicate.

pub mod geo;
pub mod kdtree;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{layer_midpoint_m, PrecipVolume, PwvStack, SpectralScene, LAYERS};
use geo::{chord_for_angle, great_circle_deg, unit_vector};
use kdtree::KdTree;

/// Vertical profile at native radar bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NativeProfile {
    /// Bin heights in meters, strictly increasing.
    pub heights_m: Vec<f64>,
    /// mm h⁻¹, one per height.
    pub rates: Vec<f64>,
}

/// One radar observation; serialized as a single JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsPoint {
    pub lat: f64,
    pub lon: f64,
    /// Seconds since epoch.
    pub time: f64,
    pub profile: NativeProfile,
}

impl ObsPoint {
    pub fn validate(&self) -> Result<()> {
        if !(self.lat.abs() <= 90.0) || !self.lon.is_finite() || !self.time.is_finite() {
            return Err(Error::validation(format!(
                "invalid point location/time ({}, {}, {})",
                self.lat, self.lon, self.time
            )));
        }
        let p = &self.profile;
        if p.heights_m.len() != p.rates.len() {
            return Err(Error::validation("profile heights and rates differ in length"));
        }
        if p.heights_m.windows(2).any(|h| !(h[0] < h[1])) {
            return Err(Error::validation("profile heights must be strictly increasing"));
        }
        if p.rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::validation("profile rates must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Great-circle radius in degrees.
    pub radius_deg: f64,
    /// Half-width of the time window in seconds.
    pub window_s: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            radius_deg: 0.1,
            window_s: 600.0,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius_deg > 0.0) || !(self.window_s > 0.0) {
            return Err(Error::validation("match radius and window must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub lat: f64,
    pub lon: f64,
    pub time: f64,
}

/// Spatial index over observation points.
#[derive(Debug, Clone)]
pub struct PointIndex {
    tree: KdTree,
    lat: Vec<f64>,
    lon: Vec<f64>,
    time: Vec<f64>,
}

pub fn build_index(points: &[ObsPoint]) -> Result<PointIndex> {
    if points.is_empty() {
        return Err(Error::validation("cannot index an empty point list"));
    }
    for p in points {
        p.validate()?;
    }
    Ok(PointIndex {
        tree: KdTree::build(points.iter().map(|p| unit_vector(p.lat, p.lon)).collect()),
        lat: points.iter().map(|p| p.lat).collect(),
        lon: points.iter().map(|p| p.lon).collect(),
        time: points.iter().map(|p| p.time).collect(),
    })
}

impl PointIndex {
    pub fn len(&self) -> usize {
        self.lat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lat.is_empty()
    }

    /// Points within `radius_deg` of (lat, lon), ascending by input index.
    pub fn query(&self, lat: f64, lon: f64, radius_deg: f64) -> Vec<usize> {
        // Pad the chord so rounding never prunes a point the exact test accepts.
        let chord = chord_for_angle(radius_deg) * (1.0 + 1e-9) + 1e-15;
        let mut hits = self.tree.within(&unit_vector(lat, lon), chord);
        hits.retain(|&i| great_circle_deg(lat, lon, self.lat[i], self.lon[i]) <= radius_deg);
        hits
    }

    /// Per-cell lists of matching point indices (ascending).
    pub fn match_cells(&self, cells: &[Cell], config: &MatchConfig) -> Vec<Vec<usize>> {
        cells
            .par_iter()
            .map(|c| {
                let mut hits = self.query(c.lat, c.lon, config.radius_deg);
                hits.retain(|&i| (self.time[i] - c.time).abs() <= config.window_s);
                hits
            })
            .collect()
    }
}

/// Match every cell against `points`; cells without a match get empty lists.
pub fn match_points(cells: &[Cell], points: &[ObsPoint], config: &MatchConfig) -> Result<Vec<Vec<usize>>> {
    config.validate()?;
    if points.is_empty() {
        return Ok(vec![Vec::new(); cells.len()]);
    }
    Ok(build_index(points)?.match_cells(cells, config))
}

/// Linear interpolation of a native profile onto the 72 layer midpoints.
/// Midpoints outside the profile's height span get 0.
pub fn interpolate_profile(profile: &NativeProfile) -> Result<[f64; LAYERS]> {
    let (h, r) = (&profile.heights_m, &profile.rates);
    if h.is_empty() || h.len() != r.len() {
        return Err(Error::validation("profile is empty or ragged"));
    }
    if h.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::validation("profile heights must be strictly increasing"));
    }
    let top = LAYERS as f64 * crate::fields::LAYER_THICKNESS_M;
    if h[h.len() - 1] < 0.0 || h[0] > top {
        return Err(Error::validation("profile does not overlap 0-18 km"));
    }
    let mut out = [0.0; LAYERS];
    let mut k = 0;
    for (l, v) in out.iter_mut().enumerate() {
        let z = layer_midpoint_m(l);
        if z < h[0] || z > h[h.len() - 1] {
            continue;
        }
        while k + 1 < h.len() && h[k + 1] < z {
            k += 1;
        }
        let value = if k + 1 == h.len() || h[k] == z {
            r[k]
        } else {
            let t = (z - h[k]) / (h[k + 1] - h[k]);
            r[k] + t * (r[k + 1] - r[k])
        };
        *v = value.max(0.0);
    }
    Ok(out)
}

/// A scene tile with its acquisition time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedScene {
    pub scene: SpectralScene,
    pub time: f64,
}

/// One collocated training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchRecord {
    pub scene: SpectralScene,
    pub volume: PrecipVolume,
    pub pwv: PwvStack,
    pub scene_time: f64,
    pub n_matched_points: usize,
    /// Per-pixel supervision flag; unsupervised pixels are excluded from losses.
    pub supervised: Vec<bool>,
    pub provenance: BTreeMap<String, String>,
}

impl MatchRecord {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.scene.h, self.scene.w);
        if (self.volume.h, self.volume.w) != (h, w)
            || (self.pwv.h, self.pwv.w) != (h, w)
            || self.supervised.len() != h * w
        {
            return Err(Error::validation("record grids disagree in H×W"));
        }
        if self.n_matched_points == 0 {
            return Err(Error::validation("record has no matched points"));
        }
        Ok(())
    }
}

/// Collocate every scene with the observations and build one record per
/// scene with at least one match. Matched pixels average the interpolated
/// profiles of all their points. Output is ordered by scene time.
pub fn build_dataset(
    scenes: &[TimedScene],
    points: &[ObsPoint],
    pwv: &[PwvStack],
    config: &MatchConfig,
) -> Result<Vec<MatchRecord>> {
    config.validate()?;
    if scenes.len() != pwv.len() {
        return Err(Error::Shape {
            context: "build_dataset pwv",
            expected: vec![scenes.len()],
            got: vec![pwv.len()],
        });
    }
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let index = build_index(points)?;
    let profiles: Vec<[f64; LAYERS]> = points
        .iter()
        .map(|p| interpolate_profile(&p.profile))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.sort_by(|&a, &b| scenes[a].time.total_cmp(&scenes[b].time));

    let records: Vec<Option<MatchRecord>> = order
        .par_iter()
        .map(|&s| -> Result<Option<MatchRecord>> {
            let ts = &scenes[s];
            let scene = &ts.scene;
            scene.validate()?;
            if (pwv[s].h, pwv[s].w) != (scene.h, scene.w) {
                return Err(Error::validation(format!("PWV grid for scene {s} has wrong size")));
            }
            let cells: Vec<Cell> = (0..scene.pixels())
                .map(|p| Cell {
                    lat: scene.lat[p],
                    lon: scene.lon[p],
                    time: ts.time,
                })
                .collect();
            let matches = index.match_cells(&cells, config);
            let distinct: BTreeSet<usize> = matches.iter().flatten().copied().collect();
            if distinct.is_empty() {
                return Ok(None);
            }
            let n = scene.pixels();
            let mut volume = PrecipVolume::zeros(scene.h, scene.w);
            let mut supervised = vec![false; n];
            for (p, hits) in matches.iter().enumerate() {
                if hits.is_empty() {
                    continue;
                }
                supervised[p] = true;
                let inv = 1.0 / hits.len() as f64;
                for l in 0..LAYERS {
                    volume.rate[l * n + p] = hits.iter().map(|&i| profiles[i][l]).sum::<f64>() * inv;
                }
            }
            let mut provenance = BTreeMap::new();
            provenance.insert("source".to_string(), "collocate".to_string());
            provenance.insert("scene_index".to_string(), s.to_string());
            provenance.insert("radius_deg".to_string(), config.radius_deg.to_string());
            provenance.insert("window_s".to_string(), config.window_s.to_string());
            Ok(Some(MatchRecord {
                scene: scene.clone(),
                volume,
                pwv: pwv[s].clone(),
                scene_time: ts.time,
                n_matched_points: distinct.len(),
                supervised,
                provenance,
            }))
        })
        .collect::<Result<_>>()?;
    Ok(records.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::tests::flat_scene;
    use crate::fields::PWV_LAYERS;

    fn point(lat: f64, lon: f64, time: f64) -> ObsPoint {
        ObsPoint {
            lat,
            lon,
            time,
            profile: NativeProfile {
                heights_m: vec![0.0, 18_000.0],
                rates: vec![5.0, 5.0],
            },
        }
    }

    #[test]
    fn single_point_found_at_its_location() {
        let idx = build_index(&[point(10.0, 20.0, 0.0)]).unwrap();
        assert_eq!(idx.query(10.0, 20.0, 0.1), vec![0]);
        assert!(idx.query(10.2, 20.0, 0.1).is_empty());
    }

    #[test]
    fn empty_index_is_an_error() {
        assert!(build_index(&[]).is_err());
    }

    #[test]
    fn time_window_edge() {
        let pts = [point(0.0, 0.0, 600.0), point(0.0, 0.0, 601.0)];
        let cells = [Cell {
            lat: 0.0,
            lon: 0.0,
            time: 0.0,
        }];
        let m = match_points(&cells, &pts, &MatchConfig::default()).unwrap();
        assert_eq!(m, vec![vec![0]]);
    }

    #[test]
    fn interpolation_identity_on_midpoints() {
        let heights: Vec<f64> = (0..LAYERS).map(layer_midpoint_m).collect();
        let rates: Vec<f64> = (0..LAYERS).map(|l| (l % 7) as f64).collect();
        let out = interpolate_profile(&NativeProfile {
            heights_m: heights,
            rates: rates.clone(),
        })
        .unwrap();
        assert_eq!(out.to_vec(), rates);
    }

    #[test]
    fn interpolation_constant_and_ramp() {
        let c = interpolate_profile(&NativeProfile {
            heights_m: vec![0.0, 18_000.0],
            rates: vec![5.0, 5.0],
        })
        .unwrap();
        assert!(c.iter().all(|&v| v == 5.0));
        let ramp = interpolate_profile(&NativeProfile {
            heights_m: vec![0.0, 18_000.0],
            rates: vec![0.0, 18.0],
        })
        .unwrap();
        for (l, v) in ramp.iter().enumerate() {
            assert!((v - layer_midpoint_m(l) / 1000.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_clamps_outside_span() {
        let out = interpolate_profile(&NativeProfile {
            heights_m: vec![1000.0, 2000.0],
            rates: vec![2.0, 4.0],
        })
        .unwrap();
        assert_eq!(out[0], 0.0);
        assert_eq!(out[3], 0.0); // 875 m
        assert!((out[4] - 2.25).abs() < 1e-12); // 1125 m
        assert_eq!(out[8], 0.0); // 2125 m
        assert!(interpolate_profile(&NativeProfile {
            heights_m: vec![],
            rates: vec![]
        })
        .is_err());
    }

    fn tile(lat0: f64, lon0: f64) -> SpectralScene {
        let mut s = flat_scene(2, 2, 250.0);
        for p in 0..4 {
            s.lat[p] = lat0 + (p / 2) as f64;
            s.lon[p] = lon0 + (p % 2) as f64;
        }
        s
    }

    fn dry_pwv() -> PwvStack {
        PwvStack::new(2, 2, vec![0.0; PWV_LAYERS * 4]).unwrap()
    }

    #[test]
    fn one_scene_one_point() {
        let scenes = [TimedScene {
            scene: tile(0.0, 0.0),
            time: 100.0,
        }];
        let recs = build_dataset(&scenes, &[point(0.0, 0.0, 100.0)], &[dry_pwv()], &MatchConfig::default()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].n_matched_points, 1);
        assert_eq!(recs[0].supervised, vec![true, false, false, false]);
        assert_eq!(recs[0].volume.rate[0], 5.0);
        recs[0].validate().unwrap();
    }

    #[test]
    fn no_point_in_window_gives_no_record() {
        let scenes = [TimedScene {
            scene: tile(0.0, 0.0),
            time: 0.0,
        }];
        let recs = build_dataset(&scenes, &[point(0.0, 0.0, 5000.0)], &[dry_pwv()], &MatchConfig::default()).unwrap();
        assert!(recs.is_empty());
    }

    #[test]
    fn multiple_matches_are_averaged_and_ordered_by_time() {
        let mut a = point(0.0, 0.0, 0.0);
        a.profile.rates = vec![2.0, 2.0];
        let b = point(0.01, 0.0, 0.0);
        let scenes = [
            TimedScene {
                scene: tile(0.0, 0.0),
                time: 300.0,
            },
            TimedScene {
                scene: tile(0.0, 0.0),
                time: 0.0,
            },
        ];
        let recs = build_dataset(&scenes, &[a, b], &[dry_pwv(), dry_pwv()], &MatchConfig::default()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].scene_time, 0.0);
        assert_eq!(recs[0].volume.rate[0], 3.5);
        assert_eq!(recs[0].n_matched_points, 2);
    }
}
