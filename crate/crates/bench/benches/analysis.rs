use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use eaa_bench::{filled_store, noisy_profile, random_grid};
use eaa_core::analysis::{gaussian_fit, phase_correlate, render_image_plot, Extent, RegistrationOptions};
use eaa_core::beamline::VirtualBeamline;

fn fitting(c: &mut Criterion) {
    let profile = noisy_profile(1, 181);
    c.bench_function("gaussian_fit/181", |b| b.iter(|| gaussian_fit(&profile).unwrap()));
}

fn registration(c: &mut Criterion) {
    for size in [64, 128] {
        let a = random_grid(2, size);
        let moved = a.circular_shift(5, -3);
        c.bench_function(&format!("phase_correlate/{size}"), |b| {
            b.iter(|| phase_correlate(&a, &moved, &RegistrationOptions::default()).unwrap())
        });
    }
    let a = random_grid(3, 64);
    let moved = a.circular_shift(2, 1);
    let subpixel = RegistrationOptions::for_scans(0.5);
    c.bench_function("phase_correlate/64/subpixel", |b| b.iter(|| phase_correlate(&a, &moved, &subpixel).unwrap()));
}

fn simulation(c: &mut Criterion) {
    c.bench_function("acquire_2d/roi", |b| {
        b.iter_batched(
            VirtualBeamline::desk,
            |mut beamline| {
                let roi = beamline.scenario().focusing.roi;
                let step = beamline.scenario().focusing.roi_step;
                let (x, y) = roi.center();
                beamline.acquire_2d(x, y, roi.width(), roi.height(), step).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
    c.bench_function("scan_line/181", |b| {
        b.iter_batched(
            VirtualBeamline::desk,
            |mut beamline| beamline.scan_line((21.0, 40.0), (39.0, 40.0), 181).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn rendering(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let grid = random_grid(4, 64);
    let extent = Extent::new(0.0, 32.0, 0.0, 32.0);
    let path = dir.path().join("bench.png");
    c.bench_function("render_image_plot/64", |b| {
        b.iter(|| render_image_plot(&grid, &extent, Some((16.0, 16.0)), "bench", &path).unwrap())
    });
}

fn retrieval(c: &mut Criterion) {
    let store = filled_store(5, 1000);
    c.bench_function("memory_retrieve/1000", |b| b.iter(|| store.retrieve("focus the zone plate on the star", 5)));
}

criterion_group!(benches, fitting, registration, simulation, rendering, retrieval);
criterion_main!(benches);
