use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use eaa_core::analysis::{
    gaussian_fit, phase_correlate, render_image_plot, render_profile_plot, Extent, Grid2D, Profile1D,
    RegistrationOptions,
};
use eaa_core::beamline::{NoiseConfig, NoiseKind, Scenario, VirtualBeamline};
use eaa_core::context::ToolCall;
use eaa_core::runtime::{AutoApprove, ToolRegistry};
use eaa_core::tools::{beamline_tools, lock_beamline, share, ImageSink};

fn random_pattern(seed: u64, n: usize) -> Grid2D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Grid2D::from_fn(n, n, |_, _| rng.random::<f64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn integer_circular_shifts_are_recovered_exactly(seed in any::<u64>(), dx in -16i64..=16, dy in -16i64..=16) {
        let a = random_pattern(seed, 64);
        let b = a.circular_shift(dx, dy);
        let off = phase_correlate(&a, &b, &RegistrationOptions::default()).unwrap();
        prop_assert_eq!((off.dx, off.dy), (dx as f64, dy as f64));
        prop_assert!(!off.is_low_confidence());
    }

    #[test]
    fn renders_are_byte_deterministic(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions: Vec<f64> = (0..40).map(|i| i as f64 * 0.25).collect();
        let mu = rng.random_range(2.0..8.0);
        let intensities: Vec<f64> = positions.iter().map(|x| (-(x - mu) * (x - mu) / 2.0).exp() + 0.01 * rng.random::<f64>()).collect();
        let profile = Profile1D::new(positions, intensities);
        let fit = gaussian_fit(&profile).ok();
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        render_profile_plot(&profile, fit.as_ref(), "t", &p1).unwrap();
        render_profile_plot(&profile, fit.as_ref(), "t", &p2).unwrap();
        prop_assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let grid = random_pattern(seed, 24);
        let extent = Extent::new(-5.0, 7.0, 1.0, 13.0);
        render_image_plot(&grid, &extent, Some((0.0, 5.0)), "g", &p1).unwrap();
        render_image_plot(&grid, &extent, Some((0.0, 5.0)), "g", &p2).unwrap();
        prop_assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}

/// FWHM of a horizontal scan across the focusing reference line, following
/// its drift.
fn line_fwhm(b: &mut VirtualBeamline) -> f64 {
    let setup = b.scenario().focusing.clone();
    let (dx, dy) = b.state().accumulated_drift;
    let x = setup.line_x + dx;
    let y = setup.roi.center().1 + dy;
    let rec = b.scan_line((x - 9.0, y), (x + 9.0, y), 181).unwrap();
    rec.fit.expect("peak found").fwhm
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fwhm_grows_with_defocus(offsets in prop::collection::btree_set(1u32..130, 2..8), signs in prop::collection::vec(any::<bool>(), 8)) {
        // |z - z_focus| in 0.05 mm steps up to 6.5 mm, so all values are distinct.
        let mut b = VirtualBeamline::desk();
        let z_focus = b.state().z_focus;
        let mut measured = Vec::new();
        for (i, &o) in offsets.iter().enumerate() {
            let d = o as f64 * 0.05;
            let z = if signs[i] { z_focus + d } else { z_focus - d };
            b.set_zone_plate_z(z).unwrap();
            measured.push((d, line_fwhm(&mut b)));
        }
        measured.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        prop_assert!(measured.windows(2).all(|w| w[0].1 < w[1].1), "{measured:?}");
    }

    #[test]
    fn registration_matches_the_drift_model(z0 in -198.0f64..-190.0, dz in prop_oneof![-3.0f64..-0.5, 0.5f64..3.0]) {
        let mut scenario = Scenario::desk();
        scenario.optics.z_start = z0;
        let coeff = scenario.optics.drift_coeff;
        let mut b = VirtualBeamline::new(scenario).unwrap();
        let roi = b.scenario().focusing.roi;
        let step = b.scenario().focusing.roi_step;
        let (cx, cy) = roi.center();
        let first = b.acquire_2d(cx, cy, roi.width(), roi.height(), step).unwrap();
        b.set_zone_plate_z(z0 + dz).unwrap();
        let second = b.acquire_2d(cx, cy, roi.width(), roi.height(), step).unwrap();
        let off = phase_correlate(first.image().unwrap(), second.image().unwrap(), &RegistrationOptions::for_scans(step)).unwrap();
        prop_assert!((off.dx - coeff.0 * dz).abs() <= step, "{off:?} dz={dz}");
        prop_assert!((off.dy - coeff.1 * dz).abs() <= step, "{off:?} dz={dz}");
    }

    #[test]
    fn failed_operations_restore_the_previous_state(ops in prop::collection::vec((0u8..3, -260.0f64..-130.0, -6000.0f64..6000.0), 1..12)) {
        let mut b = VirtualBeamline::desk();
        for (kind, z, s) in ops {
            let before = b.snapshot();
            let result = match kind {
                0 => b.set_zone_plate_z(z).map(|_| ()),
                1 => b.move_stage(s, -s / 2.0),
                _ => b.acquire_2d(s, 0.0, 10.0, 10.0, 0.5).map(|_| ()),
            };
            let state = b.state();
            let l = &state.limits;
            prop_assert!(state.zone_plate_z >= l.z.0 && state.zone_plate_z <= l.z.1);
            prop_assert!(state.stage_x >= l.x.0 && state.stage_x <= l.x.1);
            if result.is_err() {
                prop_assert_eq!(b.snapshot(), before);
            }
        }
    }

    #[test]
    fn seeded_simulation_is_reproducible(seed in any::<u64>(), x in -20.0f64..20.0) {
        let mut scenario = Scenario::desk();
        scenario.seed = seed;
        scenario.optics.noise = Some(NoiseConfig { kind: NoiseKind::Gaussian, snr: 30.0 });
        let run = || {
            let mut b = VirtualBeamline::new(scenario.clone()).unwrap();
            let a = b.acquire_2d(x, 0.0, 6.0, 6.0, 0.5).unwrap().data;
            let l = b.scan_line((x, 0.0), (x + 5.0, 0.0), 40).unwrap().data;
            (a, l)
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn image_tools_return_existing_pngs_and_state_persists_between_calls() {
    let dir = tempfile::tempdir().unwrap();
    let beamline = share(VirtualBeamline::desk());
    let mut registry = ToolRegistry::new();
    for tool in beamline_tools(&beamline, &ImageSink::new(dir.path())) {
        registry.register(tool).unwrap();
    }
    let calls = [
        ToolCall::new("a", "acquire_image_2d", json!({"x": 30, "y": 40, "width": 10, "height": 10, "step": 0.5})),
        ToolCall::new("b", "scan_line_1d", json!({"x_start": 25, "y_start": 40, "x_end": 35, "y_end": 40, "n_points": 50})),
        ToolCall::new("c", "acquire_image_2d", json!({"x": 31, "y": 40, "width": 10, "height": 10, "step": 0.5})),
    ];
    let results = registry.execute_calls(&calls, &AutoApprove);
    for r in &results {
        assert!(!r.is_error, "{r:?}");
        assert!(!r.image_paths.is_empty());
        for p in &r.image_paths {
            assert!(std::fs::read(p).unwrap().starts_with(b"\x89PNG\r\n\x1a\n"));
        }
    }
    let b = lock_beamline(&beamline);
    let (prev, cur) = b.last_two_images().unwrap();
    assert_eq!(prev.extent.center(), (30.0, 40.0));
    assert_eq!(cur.extent.center(), (31.0, 40.0));
}

#[test]
fn guardrail_rejections_leave_the_simulator_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let beamline = share(VirtualBeamline::desk());
    let mut registry = ToolRegistry::new();
    for tool in beamline_tools(&beamline, &ImageSink::new(dir.path())) {
        registry.register(tool).unwrap();
    }
    let before = lock_beamline(&beamline).snapshot();
    let calls = [
        ToolCall::new("1", "set_zone_plate_z", json!({"z": -250.0})),
        ToolCall::new("2", "set_zone_plate_z", json!({"z": -150.0})),
        ToolCall::new("3", "move_stage", json!({"x": 9000.0, "y": 0.0})),
        ToolCall::new("4", "move_stage", json!({"x": 0.0, "y": -9000.0})),
    ];
    let results = registry.execute_calls(&calls, &AutoApprove);
    assert!(results.iter().all(|r| r.is_error && !r.denied), "{results:?}");
    let after = lock_beamline(&beamline).snapshot();
    assert_eq!(
        serde_json::to_vec(&after).unwrap(),
        serde_json::to_vec(&before).unwrap()
    );
}
