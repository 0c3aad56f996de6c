//! The hybrid focusing workflow.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::hooks::registration_hook;
use super::{last_assistant_text, results_of, LoopConfig, LoopStatus, SequenceGuard, Session};
use crate::beamline::{FocusingSetup, Scenario};
use crate::tools::{beamline_tool, field_f64, lock_beamline, parse_fields, ImageSink, SharedBeamline, BEAMLINE_TOOLS};

pub const FOCUSING_SEQUENCE: [&str; 3] = ["scan_line_1d", "set_zone_plate_z", "acquire_image_2d"];

#[derive(Debug, Clone, PartialEq)]
pub struct FocusingParams {
    pub setup: FocusingSetup,
    pub max_rounds: usize,
}

impl FocusingParams {
    pub fn from_scenario(scenario: &Scenario) -> Self {
        FocusingParams {
            setup: scenario.focusing.clone(),
            max_rounds: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocusPoint {
    pub z: f64,
    pub fwhm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusingReport {
    pub workflow: String,
    pub status: LoopStatus,
    pub rounds: usize,
    /// `(z, fwhm)` of every line scan in order; `None` when no peak was found.
    pub trajectory: Vec<(f64, Option<f64>)>,
    #[serde(rename = "final")]
    pub final_point: Option<FocusPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl FocusingReport {
    /// Smallest measured FWHM and its z.
    pub fn best_measured(&self) -> Option<(f64, f64)> {
        self.trajectory
            .iter()
            .filter_map(|(z, f)| f.map(|f| (*z, f)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }
}

pub fn focusing_prompt(setup: &FocusingSetup, z_start: f64) -> String {
    let r = &setup.roi;
    let (cx, cy) = r.center();
    let h = setup.scan_half_length;
    format!(
        "Find the zone plate z position that gives the sharpest image. The zone plate is at z = {z_start:.3} mm; \
         keep z within [{zlo:.1}, {zhi:.1}] mm. Follow this procedure:\n\
         1. Acquire a 2D image of the region of operation: acquire_image_2d with x={cx:.3}, y={cy:.3}, \
         width={w:.3}, height={hgt:.3}, step={step:.3}.\n\
         2. Perform a horizontal line scan across {feature} with scan_line_1d from x={x0:.3} to x={x1:.3} \
         at y={y:.3} with n_points={n}.\n\
         3. The line scan tool fits a Gaussian to the profile and reports its FWHM. Note down the FWHM.\n\
         4. Change the zone plate position with set_zone_plate_z. This makes the field of view drift.\n\
         5. Acquire a new 2D image at the same coordinates as in step 1. You will be told the offset between \
         this image and the previous one.\n\
         6. Go back to step 2, adding the accumulated offsets to the line scan coordinates so that the peak of the \
         line stays at the same place in the profile. Repeat until you find the z with the minimal FWHM.\n\
         If a line scan shows no discernible peak, repeat it with a longer line. When you are done, move the zone \
         plate to the best z, report it as `z = <value> mm` and say TERMINATE.",
        zlo = setup.z_bounds.0,
        zhi = setup.z_bounds.1,
        w = r.width(),
        hgt = r.height(),
        step = setup.roi_step,
        feature = setup.feature,
        x0 = setup.line_x - h,
        x1 = setup.line_x + h,
        y = setup.line_y,
        n = setup.scan_points,
    )
}

static DECLARED_Z: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\bz\s*=\s*(-?\d+(?:\.\d+)?)\s*mm").unwrap());

/// Runs the focusing workflow on a session. Missing beamline tools are added
/// to the session's registry.
pub fn run_focusing(session: &mut Session, beamline: &SharedBeamline, sink: &ImageSink, params: &FocusingParams) -> FocusingReport {
    for name in BEAMLINE_TOOLS {
        if !session.registry.contains(name) {
            let tool = beamline_tool(name, beamline, sink).expect("built-in tool");
            session.registry.register(tool).expect("name checked above");
        }
    }
    let z_start = lock_beamline(beamline).state().zone_plate_z;
    let mut config = LoopConfig::with_prompt(focusing_prompt(&params.setup, z_start));
    config.max_rounds = params.max_rounds;
    config.expected_sequence = Some(SequenceGuard::new(&FOCUSING_SEQUENCE).starting_at("acquire_image_2d"));
    config.hooks.push(registration_hook(beamline.clone(), sink.clone()));
    let outcome = session.run_loop(&mut config);

    let trajectory: Vec<(f64, Option<f64>)> = results_of(&outcome.transcript, "scan_line_1d")
        .into_iter()
        .filter_map(|r| {
            let fields = parse_fields(&r.text);
            Some((field_f64(&fields, "zone_plate_z")?, field_f64(&fields, "FWHM")))
        })
        .collect();
    let declared = (outcome.status == LoopStatus::Terminated)
        .then(|| last_assistant_text(&outcome.transcript))
        .flatten()
        .and_then(|t| DECLARED_Z.captures_iter(&t).last().and_then(|c| c[1].parse::<f64>().ok()));
    let mut report = FocusingReport {
        workflow: "focusing".into(),
        status: outcome.status,
        rounds: outcome.rounds,
        trajectory,
        final_point: None,
        error: outcome.error,
    };
    report.final_point = match declared {
        Some(z) => Some(FocusPoint {
            z,
            fwhm: report
                .trajectory
                .iter()
                .rev()
                .find(|(tz, f)| (tz - z).abs() < 5e-4 && f.is_some())
                .and_then(|(_, f)| *f),
        }),
        None => report.best_measured().map(|(z, f)| FocusPoint { z, fwhm: Some(f) }),
    };
    report
}
