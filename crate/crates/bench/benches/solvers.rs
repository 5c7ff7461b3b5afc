use std::hint::black_box;

use cevkmv_bench::st_panel;
use cevkmv_core::cev::{cev_default_probability, hagan_woodward_vol, CevParams, GridSettings};
use cevkmv_core::estimation::{fit_equivalent_vol, fit_fixed_effects, CalibrationSettings};
use cevkmv_core::market_model::{forward_equity, invert_kmv, FirmQuarterObservation, Group};
use cevkmv_core::mc::VolLaw;
use cevkmv_core::Quarter;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn inversion(c: &mut Criterion) {
    let (equity_value, equity_vol) = forward_equity(8.55e9, 0.21, 4.9e9, 0.03, 1.0).unwrap();
    let obs = FirmQuarterObservation {
        firm_id: "ST0001".into(),
        quarter: Quarter::new(2021, 1).unwrap(),
        equity_value,
        equity_vol,
        default_point: 4.9e9,
        rate: 0.03,
        horizon: 1.0,
        group: Group::St,
    };
    c.bench_function("invert_kmv", |b| {
        b.iter(|| invert_kmv(black_box(&obs)).unwrap())
    });
}

fn probability(c: &mut Criterion) {
    let mut group = c.benchmark_group("cev_default_probability");
    let params = CevParams::from_local_vol(0.3, 100.0, 0.7).unwrap();
    for num_space in [200, 400, 800] {
        let settings = GridSettings {
            num_space,
            num_time: num_space / 2,
            check_convergence: false,
            ..GridSettings::default()
        };
        let grid = settings.grid_for(100.0, 80.0, 0.03, 1.0, params);
        group.bench_with_input(BenchmarkId::from_parameter(num_space), &grid, |b, grid| {
            b.iter(|| {
                cev_default_probability(black_box(100.0), params, 80.0, 0.03, 1.0, grid).unwrap()
            })
        });
    }
    group.finish();
    c.bench_function("hagan_woodward_vol", |b| {
        b.iter(|| hagan_woodward_vol(black_box(100.0), 80.0, 0.03, 1.0, params).unwrap())
    });
}

fn calibration(c: &mut Criterion) {
    let local = st_panel(186, 9, VolLaw::Local);
    let equivalent = st_panel(186, 9, VolLaw::Equivalent);
    let settings = CalibrationSettings::default();
    c.bench_function("fit_fixed_effects/186x9", |b| {
        b.iter(|| fit_fixed_effects(black_box(&local)).unwrap())
    });
    let mut group = c.benchmark_group("fit_equivalent_vol");
    group.sample_size(10);
    group.bench_function("186x9", |b| {
        b.iter(|| fit_equivalent_vol(black_box(&equivalent), &settings).unwrap())
    });
    group.finish();
}

criterion_group!(benches, inversion, probability, calibration);
criterion_main!(benches);
