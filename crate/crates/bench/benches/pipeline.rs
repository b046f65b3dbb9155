use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use volprecip_bench::records;
use volprecip_core::collocate::{match_points, Cell, MatchConfig, NativeProfile, ObsPoint};
use volprecip_core::fields::SpectralScene;
use volprecip_core::losses::LossConfig;
use volprecip_core::model::{forward, init, ModelConfig};
use volprecip_core::pwv::{integrate_layer_pwv, PressureProfile};
use volprecip_core::train::{batch_gradient, Targets};

fn pwv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let profiles: Vec<PressureProfile> = (0..1024)
        .map(|_| PressureProfile::standard((0..19).map(|_| rng.random_range(0.0..0.02)).collect()))
        .collect();
    c.bench_function("pwv/1024 columns", |b| {
        b.iter(|| {
            for p in &profiles {
                black_box(integrate_layer_pwv(p).unwrap());
            }
        })
    });
}

fn collocation(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let profile = NativeProfile {
        heights_m: vec![0.0, 5000.0],
        rates: vec![2.0, 0.0],
    };
    let points: Vec<ObsPoint> = (0..2000)
        .map(|_| ObsPoint {
            lat: rng.random_range(10.0..11.0),
            lon: rng.random_range(100.0..101.0),
            time: rng.random_range(0.0..3600.0),
            profile: profile.clone(),
        })
        .collect();
    let cells: Vec<Cell> = (0..1024)
        .map(|_| Cell {
            lat: rng.random_range(10.0..11.0),
            lon: rng.random_range(100.0..101.0),
            time: 1800.0,
        })
        .collect();
    c.bench_function("collocate/2000 points x 1024 cells", |b| {
        b.iter(|| black_box(match_points(&cells, &points, &MatchConfig::default()).unwrap()))
    });
}

fn model(c: &mut Criterion) {
    let params = init(&ModelConfig::default(), 3).unwrap();
    let recs = records(32, 4);
    let scenes: Vec<&SpectralScene> = recs.iter().map(|r| &r.scene).collect();
    c.bench_function("model/forward 4x32x32", |b| b.iter(|| black_box(forward(&params, &scenes).unwrap())));

    let cfg = LossConfig::default();
    let targets: Vec<Targets> = recs.iter().map(|r| Targets::new(r, &cfg).unwrap()).collect();
    let tg: Vec<&Targets> = targets.iter().collect();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("gradient 4x32x32", |b| {
        b.iter_batched(
            || params.clone(),
            |p| black_box(batch_gradient(&p, &scenes, &tg, &cfg).unwrap().loss),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, pwv, collocation, model);
criterion_main!(benches);
