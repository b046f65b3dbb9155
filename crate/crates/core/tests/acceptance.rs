//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use volprecip_core::collocate::{match_points, Cell, MatchConfig, NativeProfile, ObsPoint};
use volprecip_core::evaluate::{categorical_metrics, continuous_metrics, revisit_gaps, ContingencyTable, Overpass};
use volprecip_core::fields::{SpectralScene, LAYERS, PWV_LAYERS};
use volprecip_core::losses::gradcheck::{grad_check, GradCheckOptions};
use volprecip_core::losses::{suite, LossConfig};
use volprecip_core::model::{forward, init, load_checkpoint, save_checkpoint, ModelConfig, Parameters};
use volprecip_core::pwv::{integrate_layer_pwv, PressureProfile, PRESSURE_LEVELS_HPA};
use volprecip_core::synthgen::{generate_dataset, SynthConfig};
use volprecip_core::train::{ablate, batch_gradient, batch_loss, evaluate_loss, train, Targets, TrainConfig};

/// Written straight to stderr so the line shows without `--nocapture`.
fn report(id: u32, name: &str, passed: bool, detail: String, started: Instant) {
    let _ = writeln!(
        std::io::stderr(),
        "criterion {id:>2} {name}: {} ({detail}; {:.1} s)",
        if passed { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
}

fn synth(seed: u64, h: usize, w: usize, n: usize) -> Vec<volprecip_core::collocate::MatchRecord> {
    generate_dataset(
        &SynthConfig {
            seed,
            h,
            w,
            ..Default::default()
        },
        n,
    )
    .unwrap()
}

#[test]
fn c01_loss_oracles() {
    let t = Instant::now();
    let checks = suite::oracle_suite().unwrap();
    let failed: Vec<_> = checks.iter().filter(|c| !(c.passed && c.tolerance <= 1e-9)).map(|c| c.name.clone()).collect();
    let worst = checks.iter().map(|c| c.error).fold(0.0, f64::max);
    let ok = failed.is_empty() && !checks.is_empty();
    report(1, "loss oracles", ok, format!("{} examples, worst abs error {worst:.2e}", checks.len()), t);
    assert!(ok, "failed: {failed:?}");
}

#[test]
fn c02_loss_gradients() {
    let t = Instant::now();
    let checks = suite::gradient_suite(20, 2024).unwrap();
    let worst = checks.iter().map(|c| c.error).fold(0.0, f64::max);
    let ok = !checks.is_empty() && checks.iter().all(|c| c.passed && c.tolerance <= 1e-5);
    report(2, "loss gradients", ok, format!("{} terms x 20 instances, worst rel error {worst:.2e}", checks.len()), t);
    assert!(ok, "{checks:?}");
}

fn set_flat(params: &mut Parameters, names: &[(String, usize)], picks: &[usize], values: &[f64]) {
    for (&flat, &v) in picks.iter().zip(values) {
        let (name, off) = locate(names, flat);
        params.tensors.get_mut(name).unwrap().data_mut()[off] = v;
    }
}

fn locate(names: &[(String, usize)], flat: usize) -> (&str, usize) {
    let mut start = 0;
    for (name, len) in names {
        if flat < start + len {
            return (name, flat - start);
        }
        start += len;
    }
    panic!("index out of range");
}

#[test]
fn c03_end_to_end_gradient() {
    let t = Instant::now();
    let cfg = ModelConfig::default();
    let params = init(&cfg, 11).unwrap();
    let records = synth(12, 16, 16, 2);
    let loss_cfg = LossConfig::default();
    let targets: Vec<Targets> = records.iter().map(|r| Targets::new(r, &loss_cfg).unwrap()).collect();
    let scenes: Vec<&SpectralScene> = records.iter().map(|r| &r.scene).collect();
    let tg: Vec<&Targets> = targets.iter().collect();

    let names: Vec<(String, usize)> = params.tensors.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let total = params.count();
    let k = total.div_ceil(100);
    let mut picks = sample(&mut ChaCha8Rng::seed_from_u64(13), total, k).into_vec();
    picks.sort();

    let bg = batch_gradient(&params, &scenes, &tg, &loss_cfg).unwrap();
    let analytic: Vec<f64> = picks
        .iter()
        .map(|&f| {
            let (name, off) = locate(&names, f);
            bg.grads[name][off]
        })
        .collect();
    let x0: Vec<f64> = picks
        .iter()
        .map(|&f| {
            let (name, off) = locate(&names, f);
            params.tensors[name].data()[off]
        })
        .collect();
    drop(bg);
    let f = |x: &[f64]| {
        let mut p = params.clone();
        set_flat(&mut p, &names, &picks, x);
        batch_loss(&p, &scenes, &tg, &loss_cfg).unwrap().total
    };
    // the refinement and decoder weights are curved enough that a 1e-5 step
    // leaves ~1e-3 truncation error; 1e-6 keeps roundoff far below the floor
    let opts = GradCheckOptions {
        h: 1e-6,
        ..Default::default()
    };
    let r = grad_check(f, &analytic, &x0, &opts);
    let ok = r.max_rel_error < 1e-3 && r.checked > 0;
    report(
        3,
        "end-to-end gradient",
        ok,
        format!(
            "{} of {total} parameters, {} checked, {} on kinks, worst rel error {:.2e}",
            k, r.checked, r.rejected, r.max_rel_error
        ),
        t,
    );
    assert!(ok, "{r:?}");
}

/// Column integral by the trapezoid rule over all levels, SI units.
fn column_oracle(q: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..PRESSURE_LEVELS_HPA.len() - 1 {
        s += (PRESSURE_LEVELS_HPA[i] - PRESSURE_LEVELS_HPA[i + 1]) * 100.0 * (q[i] + q[i + 1]) / 2.0;
    }
    s / (9.80665 * 1000.0) * 1000.0
}

#[test]
fn c04_pwv() {
    let t = Instant::now();
    let mut fails = Vec::new();
    let mut q = vec![0.0; 19];
    q[0] = 0.005;
    q[1] = 0.005;
    let bottom = integrate_layer_pwv(&PressureProfile::standard(q)).unwrap()[0];
    // 0.005 kg/kg over 1000-925 hPa
    if (bottom - 3.823935798667231).abs() > 1e-9 {
        fails.push(format!("constant-q layer {bottom}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..1000 {
        let q: Vec<f64> = (0..19).map(|_| rng.random_range(0.0..0.03)).collect();
        let base = integrate_layer_pwv(&PressureProfile::standard(q.clone())).unwrap();
        let sum: f64 = base.iter().sum();
        let col = column_oracle(&q);
        if (sum - col).abs() > 1e-12 * col {
            fails.push(format!("profile {i}: layer sum {sum} vs column {col}"));
        }
        let a = rng.random_range(0.0..10.0);
        let scaled = integrate_layer_pwv(&PressureProfile::standard(q.iter().map(|v| a * v).collect())).unwrap();
        if scaled.iter().zip(&base).any(|(s, b)| (s - a * b).abs() > 1e-12 * (a * b).abs().max(1e-300)) {
            fails.push(format!("profile {i}: not linear"));
        }
        let other: Vec<f64> = (0..19).map(|_| rng.random_range(0.0..0.03)).collect();
        let sum_q: Vec<f64> = q.iter().zip(&other).map(|(x, y)| x + y).collect();
        let so = integrate_layer_pwv(&PressureProfile::standard(other)).unwrap();
        let ss = integrate_layer_pwv(&PressureProfile::standard(sum_q)).unwrap();
        if (0..PWV_LAYERS).any(|l| (ss[l] - base[l] - so[l]).abs() > 1e-12 * ss[l].max(1e-300)) {
            fails.push(format!("profile {i}: not additive"));
        }
        let mut wetter = q.clone();
        wetter[rng.random_range(0..19)] += rng.random_range(0.0..0.01);
        let bumped = integrate_layer_pwv(&PressureProfile::standard(wetter)).unwrap();
        if bumped.iter().zip(&base).any(|(b, a)| b < a) {
            fails.push(format!("profile {i}: not monotone"));
        }
    }
    let ok = fails.is_empty();
    report(4, "layer PWV", ok, format!("closed form {bottom:.9} mm, 1000 random profiles"), t);
    assert!(ok, "{fails:?}");
}

fn haversine_deg(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    (2.0 * a.sqrt().min(1.0).asin()).to_degrees()
}

#[test]
fn c05_collocation() {
    let t = Instant::now();
    let cfg = MatchConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatched = Vec::new();
    let mut total_matches = 0usize;
    for inst in 0..100 {
        let n = rng.random_range(1..=2000);
        let lat0: f64 = rng.random_range(-89.0..89.0);
        let lon0: f64 = if inst % 10 == 0 { 179.9 } else { rng.random_range(-180.0..180.0) };
        let span = rng.random_range(0.2..1.0);
        let wrap = |lon: f64| if lon >= 180.0 { lon - 360.0 } else { lon };
        let profile = NativeProfile {
            heights_m: vec![0.0, 1000.0],
            rates: vec![1.0, 0.5],
        };
        let points: Vec<ObsPoint> = (0..n)
            .map(|_| ObsPoint {
                lat: (lat0 + rng.random_range(-span..span)).clamp(-90.0, 90.0),
                lon: wrap(lon0 + rng.random_range(-span..span)),
                time: rng.random_range(0.0..3600.0),
                profile: profile.clone(),
            })
            .collect();
        let cells: Vec<Cell> = (0..200)
            .map(|_| Cell {
                lat: (lat0 + rng.random_range(-span..span)).clamp(-90.0, 90.0),
                lon: wrap(lon0 + rng.random_range(-span..span)),
                time: rng.random_range(0.0..3600.0),
            })
            .collect();
        let got = match_points(&cells, &points, &cfg).unwrap();
        for (ci, c) in cells.iter().enumerate() {
            let want: BTreeSet<usize> = points
                .iter()
                .enumerate()
                .filter(|(_, p)| {
                    haversine_deg(c.lat, c.lon, p.lat, p.lon) <= cfg.radius_deg && (p.time - c.time).abs() <= cfg.window_s
                })
                .map(|(i, _)| i)
                .collect();
            total_matches += want.len();
            if got[ci].iter().copied().collect::<BTreeSet<_>>() != want {
                mismatched.push((inst, ci));
            }
        }
    }
    let ok = mismatched.is_empty() && total_matches > 0;
    report(5, "collocation equivalence", ok, format!("100 instances, {total_matches} brute-force matches"), t);
    assert!(ok, "{mismatched:?}");
}

#[test]
fn c06_shapes_and_determinism() {
    let t = Instant::now();
    let cfg = ModelConfig::default();
    let params = init(&cfg, 6).unwrap();
    let records = synth(6, 64, 64, 2);
    let scenes: Vec<&SpectralScene> = records.iter().map(|r| &r.scene).collect();
    let a = forward(&params, &scenes).unwrap();
    let shapes_ok = a
        .iter()
        .all(|p| p.value.len() == LAYERS * 64 * 64 && p.prob.len() == 64 * 64 && p.pwv.len() == PWV_LAYERS * 8 * 8);
    let b = forward(&params, &scenes).unwrap();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let c = single.install(|| forward(&params, &scenes).unwrap());
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &params, 6, 0).unwrap();
    let (loaded, _) = load_checkpoint(dir.path()).unwrap();
    let d = forward(&loaded, &scenes).unwrap();
    let same = |x: &[volprecip_core::model::Prediction]| a.iter().zip(x).all(|(p, q)| p.bit_eq(q));
    let ok = shapes_ok && same(&b) && same(&c) && same(&d) && loaded == params;
    report(
        6,
        "shapes and determinism",
        ok,
        format!("shapes {shapes_ok}, repeat {}, single worker {}, checkpoint {}", same(&b), same(&c), same(&d)),
        t,
    );
    assert!(ok);
}

#[test]
fn c07_overfit() {
    let t = Instant::now();
    let data = synth(7, 32, 32, 16);
    let cfg = TrainConfig {
        seed: 7,
        batch_size: 16,
        steps: 200,
        sampler: false,
        ..Default::default()
    };
    let out = train(&data, &cfg).unwrap();
    let first = out.history[0].total;
    let last = out.history.last().unwrap().total;
    let after = evaluate_loss(&out.params, &data, &cfg.loss).unwrap().total;
    let ok = last <= 0.5 * first && after < first && out.params.is_finite();
    report(
        7,
        "overfit",
        ok,
        format!("total loss {first:.4} -> {last:.4} (ratio {:.3}), inference loss {after:.4}", last / first),
        t,
    );
    assert!(ok);
}

#[test]
fn c08_ablation_trend() {
    let t = Instant::now();
    let mut wins = 0;
    let mut lines = Vec::new();
    let mut zero_grad = true;
    for seed in [1u64, 2, 3] {
        let data = synth(100 + seed, 16, 16, 4000);
        let cfg = TrainConfig {
            seed,
            batch_size: 8,
            ..Default::default()
        };
        let rep = ablate(&data, &[0.0, 5.0], &cfg).unwrap();
        // no predicted events means no false alarms
        let far = |i: usize| rep.rows[i].volume.categorical.far.unwrap_or(0.0);
        zero_grad &= rep.rows[0].pwv_head_grad_max == 0.0;
        if far(1) <= far(0) {
            wins += 1;
        }
        let sfar = |i: usize| rep.rows[i].surface.categorical.far.unwrap_or(0.0);
        lines.push(format!(
            "seed {seed}: FAR {:.4} vs {:.4} (surface {:.4} vs {:.4})",
            far(0),
            far(1),
            sfar(0),
            sfar(1)
        ));
    }
    let ok = wins >= 2 && zero_grad;
    report(8, "ablation trend", ok, format!("{}; PWV head idle at 0: {zero_grad}", lines.join(", ")), t);
    assert!(ok);
}

fn close(a: Option<f64>, b: f64) -> bool {
    a.is_some_and(|a| (a - b).abs() <= 1e-12)
}

#[test]
fn c09_metrics() {
    let t = Instant::now();
    let mut fails = Vec::new();
    let c = continuous_metrics(&[0.0, 1.0, 2.0, 3.0], &[0.0, 2.0, 4.0, 6.0], None).unwrap();
    if !(close(c.cc, 1.0) && close(Some(c.bias), -1.5) && close(Some(c.rmse), 3.5f64.sqrt()) && close(Some(c.mae), 1.5)) {
        fails.push(format!("continuous {c:?}"));
    }
    let same = continuous_metrics(&[0.3, 1.0, 7.0], &[0.3, 1.0, 7.0], None).unwrap();
    if !(close(same.cc, 1.0) && same.bias == 0.0 && same.rmse == 0.0 && same.mae == 0.0) {
        fails.push(format!("identity {same:?}"));
    }
    let k = categorical_metrics(&[1.0, 0.0, 1.0, 0.0], &[1.0, 1.0, 0.0, 0.0], 0.1, None).unwrap();
    if !(k.table.hits == 1 && k.table.misses == 1 && k.table.false_alarms == 1)
        || !(close(k.pod, 0.5) && close(k.far, 0.5) && close(k.csi, 1.0 / 3.0))
    {
        fails.push(format!("categorical {k:?}"));
    }
    let none = categorical_metrics(&[0.0; 4], &[0.0; 4], 0.1, None).unwrap();
    if none.pod.is_some() || none.far.is_some() || none.csi.is_some() {
        fails.push("degenerate table not flagged".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10_000 {
        let t = ContingencyTable {
            hits: rng.random_range(0..1000),
            misses: rng.random_range(0..1000),
            false_alarms: rng.random_range(0..1000),
            correct_negatives: rng.random_range(0..1000),
        };
        if let (Some(csi), Some(pod), Some(far)) = (t.csi(), t.pod(), t.far()) {
            if csi > pod + 1e-15 || csi > 1.0 - far + 1e-15 {
                fails.push(format!("{t:?}"));
            }
        }
    }
    let ok = fails.is_empty();
    report(9, "metrics", ok, "hand examples and 10000 random tables".into(), t);
    assert!(ok, "{fails:?}");
}

#[test]
fn c10_revisit_gaps() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut fails = Vec::new();
    for inst in 0..50 {
        let n_cells = rng.random_range(1..200);
        let n_pass = rng.random_range(0..60);
        let mut times: Vec<f64> = (0..n_pass).map(|_| rng.random_range(0..40 * 86_400) as f64).collect();
        times.sort_by(f64::total_cmp);
        let overpasses: Vec<Overpass> = times
            .iter()
            .map(|&time| {
                let start = rng.random_range(0..n_cells);
                let width = rng.random_range(1..=n_cells);
                let coverage = (0..n_cells).map(|c| (c + n_cells - start) % n_cells < width && rng.random_bool(0.9)).collect();
                Overpass { time, coverage }
            })
            .collect();
        let threshold = rng.random_range(1..20) as f64 * 86_400.0;
        let got = revisit_gaps(&overpasses, n_cells, threshold).unwrap();

        let mut means = Vec::new();
        let mut maxes = Vec::new();
        let mut flagged = 0;
        for c in 0..n_cells {
            let seen: Vec<f64> = overpasses.iter().filter(|o| o.coverage[c]).map(|o| o.time).collect();
            let gaps: Vec<f64> = seen.windows(2).map(|w| w[1] - w[0]).collect();
            let cell = &got.cells[c];
            if seen.len() < 2 {
                flagged += 1;
                if cell.visits != seen.len() || cell.mean_gap.is_some() || cell.max_gap.is_some() {
                    fails.push(format!("instance {inst} cell {c}: {cell:?}"));
                }
                continue;
            }
            let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
            let max = gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if cell.visits != seen.len() || cell.mean_gap != Some(mean) || cell.max_gap != Some(max) {
                fails.push(format!("instance {inst} cell {c}: {cell:?} vs {mean} {max}"));
            }
            means.push(mean);
            maxes.push(max);
        }
        let want_mean = (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64);
        let want_max = maxes.iter().cloned().reduce(f64::max);
        let want_frac =
            (!maxes.is_empty()).then(|| maxes.iter().filter(|&&m| m > threshold).count() as f64 / maxes.len() as f64);
        if got.mean_gap != want_mean || got.max_gap != want_max || got.fraction_over_threshold != want_frac || got.flagged != flagged {
            fails.push(format!("instance {inst}: summary differs"));
        }
    }
    let ok = fails.is_empty();
    report(10, "revisit gaps", ok, "50 random swath instances".into(), t);
    assert!(ok, "{fails:?}");
}
