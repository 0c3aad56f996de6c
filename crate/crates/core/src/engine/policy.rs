//! Deterministic stand-ins for a vision model that drive the built-in
//! workflows. They read only what a model would see: the context, including
//! tool texts and the rendered images.

use std::path::{Path, PathBuf};

use serde_json::json;

use super::hooks::{parse_offset, OVERLAP_QUESTION, TRACKING_PROMPT};
use crate::analysis::{phase_correlate, read_image_plot, Extent, PlotArea, RegistrationOptions};
use crate::beamline::{FeatureSearchSetup, FocusingSetup};
use crate::context::{Context, Message, Role, ToolCall, ToolResult};
use crate::model::{ChatModel, ModelError, ModelResponse};
use crate::runtime::ToolSchema;
use crate::tools::{field_f64, parse_fields};

fn tool_name(context: &Context, call_id: &str) -> Option<String> {
    super::tool_name_of(context, call_id)
}

fn calls(context: &Context, specs: Vec<(&str, serde_json::Value)>) -> Vec<ToolCall> {
    let first: usize = context.messages.iter().map(|m| m.tool_calls.len()).sum();
    specs
        .into_iter()
        .enumerate()
        .map(|(i, (name, args))| ToolCall::new(format!("call_{}", first + i + 1), name, args))
        .collect()
}

fn last_calling_assistant(context: &Context) -> Option<&Message> {
    context
        .messages
        .iter()
        .rev()
        .find(|m| m.role == Role::Assistant && !m.tool_calls.is_empty())
}

fn results<'a>(context: &'a Context, tool: &str) -> Vec<&'a ToolResult> {
    context
        .messages
        .iter()
        .filter_map(|m| m.tool_result.as_ref())
        .filter(|r| !r.is_error && tool_name(context, &r.call_id).as_deref() == Some(tool))
        .collect()
}

fn first_user(context: &Context) -> Option<&Message> {
    context.messages.iter().find(|m| m.role == Role::User)
}

fn extent_of(fields: &std::collections::BTreeMap<String, String>) -> Option<Extent> {
    Some(Extent::new(
        field_f64(fields, "x_min")?,
        field_f64(fields, "x_max")?,
        field_f64(fields, "y_min")?,
        field_f64(fields, "y_max")?,
    ))
}

/// Plot image and extent of an `acquire_image_2d` result.
pub(crate) fn plotted_image(result: &ToolResult) -> Option<(PathBuf, Extent)> {
    Some((result.image_paths.first()?.clone(), extent_of(&parse_fields(&result.text))?))
}

fn gray_image(path: &Path, extent: &Extent) -> Option<(crate::analysis::Grid2D, f64)> {
    let grid = read_image_plot(path, extent)?;
    let pixel = extent.width() / PlotArea::for_image(extent).width as f64;
    Some((grid, pixel))
}

/// Next step of a coarse-then-fine search over z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Plan {
    Measure(f64),
    Done(f64),
}

const COARSE_STEP: f64 = 2.0;
const FINE_START: f64 = 1.0;
const FINE_STOP: f64 = 0.25;

/// Replays the search over the measurements taken so far and returns the
/// next z to measure, or the best z once the search has converged.
///
/// Coarse steps of 2 mm go towards +z (reversing if the first step is worse)
/// until the FWHM rises; a pattern search from the best point then halves
/// its step after two failures in a row and stops below 0.25 mm.
pub(crate) fn plan_focus(measured: &[(f64, f64)], bounds: (f64, f64)) -> Plan {
    let lookup = |z: f64| {
        measured
            .iter()
            .rev()
            .find(|(mz, _)| (mz - z).abs() < 1e-6)
            .map(|(_, f)| *f)
    };
    macro_rules! f {
        ($z:expr) => {
            match lookup($z) {
                Some(v) => v,
                None => return Plan::Measure($z),
            }
        };
    }
    let Some(&(z0, f0)) = measured.first() else {
        return Plan::Done(f64::NAN);
    };
    let clamp = |z: f64| z.clamp(bounds.0, bounds.1);
    let better = |a: f64, b: f64| a < b * (1.0 - 1e-9);
    let (mut best_z, mut best_f) = (z0, f0);

    let mut dir = 1.0;
    let z1 = clamp(z0 + COARSE_STEP);
    if z1 != z0 {
        let f1 = f!(z1);
        if better(f1, f0) {
            (best_z, best_f) = (z1, f1);
        } else {
            dir = -1.0;
        }
    } else {
        dir = -1.0;
    }
    loop {
        let z = clamp(best_z + dir * COARSE_STEP);
        if z == best_z {
            break;
        }
        let fz = f!(z);
        if better(fz, best_f) {
            (best_z, best_f) = (z, fz);
        } else {
            break;
        }
    }

    let mut h = FINE_START;
    let mut failures = 0;
    while h >= FINE_STOP {
        let z = clamp(best_z + dir * h);
        let fz = if z == best_z { best_f } else { f!(z) };
        if better(fz, best_f) {
            (best_z, best_f) = (z, fz);
            failures = 0;
        } else {
            dir = -dir;
            failures += 1;
            if failures == 2 {
                h /= 2.0;
                failures = 0;
            }
        }
    }
    Plan::Done(best_z)
}

/// Plays the agent's part in the focusing workflow.
#[derive(Debug, Clone)]
pub struct FocusingPolicy {
    setup: FocusingSetup,
}

impl FocusingPolicy {
    pub fn new(setup: FocusingSetup) -> Self {
        FocusingPolicy { setup }
    }

    fn roi_call(&self) -> (&'static str, serde_json::Value) {
        let r = &self.setup.roi;
        let (x, y) = r.center();
        (
            "acquire_image_2d",
            json!({"x": x, "y": y, "width": r.width(), "height": r.height(), "step": self.setup.roi_step}),
        )
    }

    fn drift(context: &Context) -> (f64, f64) {
        context
            .messages
            .iter()
            .filter(|m| m.role == Role::Auto)
            .map(|m| m.text())
            .filter(|t| t.starts_with("Offset vs previous image") || t.starts_with("Sub-task"))
            .filter_map(|t| parse_offset(&t))
            .fold((0.0, 0.0), |(ax, ay), (dx, dy)| (ax + dx, ay + dy))
    }

    fn line_call(&self, context: &Context, half: f64) -> (&'static str, serde_json::Value) {
        let (dx, dy) = Self::drift(context);
        let s = &self.setup;
        let (x, y) = (s.line_x + dx, s.line_y + dy);
        (
            "scan_line_1d",
            json!({"x_start": x - half, "y_start": y, "x_end": x + half, "y_end": y, "n_points": s.scan_points}),
        )
    }

    /// `(z, fwhm, scanned length)` of each line scan; no peak counts as an
    /// infinite FWHM.
    fn scans(context: &Context) -> Vec<(f64, f64, f64)> {
        results(context, "scan_line_1d")
            .into_iter()
            .filter_map(|r| {
                let f = parse_fields(&r.text);
                let len = (field_f64(&f, "x_end")? - field_f64(&f, "x_start")?).abs();
                Some((field_f64(&f, "zone_plate_z")?, field_f64(&f, "FWHM").unwrap_or(f64::INFINITY), len))
            })
            .collect()
    }

    fn track(&self, context: &Context) -> ModelResponse {
        let Some(prompt) = first_user(context) else {
            return ModelResponse::text("NEED HUMAN");
        };
        let acquired = results(context, "acquire_image_2d");
        let fields = parse_fields(&prompt.text());
        let Some(region) = extent_of(&fields) else {
            return ModelResponse::text("I cannot read the region of the reference image. NEED HUMAN");
        };
        let Some(latest) = acquired.last() else {
            let (x, y) = region.center();
            let step = field_f64(&fields, "step").unwrap_or(self.setup.roi_step);
            return ModelResponse::with_calls(
                "I will image the same region again to find the reference features.",
                calls(
                    context,
                    vec![(
                        "acquire_image_2d",
                        json!({"x": x, "y": y, "width": region.width(), "height": region.height(), "step": step}),
                    )],
                ),
            );
        };
        let reference = prompt.image_paths().next().map(PathBuf::from);
        let measured = reference.zip(plotted_image(latest)).and_then(|(ref_path, (new_path, new_extent))| {
            let (a, pixel) = gray_image(&ref_path, &region)?;
            let (b, _) = gray_image(&new_path, &new_extent)?;
            phase_correlate(&a, &b, &RegistrationOptions::for_scans(pixel)).ok()
        });
        match measured {
            Some(o) => {
                // shift of the acquisition window itself is part of the offset
                let (rx, ry) = region.center();
                let (nx, ny) = extent_of(&parse_fields(&latest.text)).map(|e| e.center()).unwrap_or((rx, ry));
                ModelResponse::text(format!(
                    "The features are found again. offset: dx={:.3}, dy={:.3} TERMINATE",
                    o.dx + nx - rx,
                    o.dy + ny - ry
                ))
            }
            None => ModelResponse::text("I could not match the images. NEED HUMAN"),
        }
    }
}

impl ChatModel for FocusingPolicy {
    fn complete(&self, context: &Context, _schemas: &[ToolSchema]) -> Result<ModelResponse, ModelError> {
        if first_user(context).is_some_and(|m| m.text().starts_with(TRACKING_PROMPT)) {
            return Ok(self.track(context));
        }
        if let Some(last) = context.last() {
            let text = last.text();
            if last.role == Role::Auto && (text.contains(OVERLAP_QUESTION) || text.contains("yes or no")) {
                return Ok(ModelResponse::text("yes"));
            }
        }
        let Some(previous) = last_calling_assistant(context) else {
            return Ok(ModelResponse::with_calls(
                "First I acquire a 2D image of the region of operation.",
                calls(context, vec![self.roi_call()]),
            ));
        };
        let last_tool = previous.tool_calls.last().map(|c| c.tool_name.as_str()).unwrap_or_default();
        let base = self.setup.scan_half_length;
        match last_tool {
            "acquire_image_2d" => {
                let (dx, dy) = Self::drift(context);
                Ok(ModelResponse::with_calls(
                    format!("Scanning across the reference line, shifted by the accumulated offset ({dx:.3}, {dy:.3})."),
                    calls(context, vec![self.line_call(context, base)]),
                ))
            }
            "scan_line_1d" => {
                let scans = Self::scans(context);
                let Some(&(z, fwhm, len)) = scans.last() else {
                    return Ok(ModelResponse::text("The line scan failed. NEED HUMAN"));
                };
                if fwhm.is_infinite() && len <= 2.0 * base + 1e-6 {
                    return Ok(ModelResponse::with_calls(
                        format!("No discernible peak at z = {z:.3} mm. I repeat the line scan with a longer line."),
                        calls(context, vec![self.line_call(context, 2.0 * base)]),
                    ));
                }
                let measured: Vec<(f64, f64)> = scans.iter().map(|&(z, f, _)| (z, f)).collect();
                let noted = if fwhm.is_finite() { format!("{fwhm:.4}") } else { "not measurable".into() };
                match plan_focus(&measured, self.setup.z_bounds) {
                    Plan::Measure(next) => Ok(ModelResponse::with_calls(
                        format!("FWHM at z = {z:.3} mm: {noted}. Next I move the zone plate to {next:.3} mm and image the region again."),
                        calls(
                            context,
                            vec![("set_zone_plate_z", json!({"z": next})), self.roi_call()],
                        ),
                    )),
                    Plan::Done(best) => Ok(ModelResponse::with_calls(
                        format!("FWHM at z = {z:.3} mm: {noted}. The minimum FWHM was measured at {best:.3} mm; moving there."),
                        calls(context, vec![("set_zone_plate_z", json!({"z": best}))]),
                    )),
                }
            }
            "set_zone_plate_z" => {
                let z = previous.tool_calls[0]
                    .arguments()
                    .and_then(|a| a.get("z").and_then(|v| v.as_f64()))
                    .unwrap_or(f64::NAN);
                Ok(ModelResponse::text(format!(
                    "The zone plate is at the position of minimal FWHM, z = {z:.3} mm. TERMINATE"
                )))
            }
            _ => Ok(ModelResponse::text("I do not know how to continue. NEED HUMAN")),
        }
    }

    fn name(&self) -> String {
        "policy:focusing".into()
    }
}

/// Plays the agent's part in the feature search: a row-major grid of fields
/// of view, then moves towards the bright part of the image once something
/// appears.
#[derive(Debug, Clone)]
pub struct FeatureSearchPolicy {
    setup: FeatureSearchSetup,
    contrast_threshold: f64,
    max_refinements: usize,
}

impl FeatureSearchPolicy {
    pub fn new(setup: FeatureSearchSetup) -> Self {
        FeatureSearchPolicy {
            setup,
            contrast_threshold: 0.25,
            max_refinements: 3,
        }
    }

    fn axis(&self, lo: f64, hi: f64) -> Vec<f64> {
        let half = self.setup.fov / 2.0;
        let (first, last) = (lo + half, (hi - half).max(lo + half));
        let step = self.setup.coarse_step.max(1e-9);
        let mut out = Vec::new();
        let mut v = first;
        while v <= last + 1e-9 {
            out.push(v);
            v += step;
        }
        out
    }

    /// Field-of-view centres of the grid, row by row; later passes are
    /// offset by half a step.
    pub fn grid_point(&self, index: usize) -> (f64, f64) {
        let b = &self.setup.bounds;
        let (xs, ys) = (self.axis(b.x_min, b.x_max), self.axis(b.y_min, b.y_max));
        let per_pass = xs.len() * ys.len();
        let pass = index / per_pass;
        let i = index % per_pass;
        let shift = (pass as f64 * self.setup.coarse_step / 2.0) % self.setup.coarse_step;
        self.clamp((xs[i % xs.len()] + shift, ys[i / xs.len()] + shift))
    }

    pub fn clamp(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let b = &self.setup.bounds;
        let half = self.setup.fov / 2.0;
        let fit = |v: f64, lo: f64, hi: f64| if lo + half <= hi - half { v.clamp(lo + half, hi - half) } else { (lo + hi) / 2.0 };
        (fit(x, b.x_min, b.x_max), fit(y, b.y_min, b.y_max))
    }

    fn acquire(&self, context: &Context, (x, y): (f64, f64), why: String) -> ModelResponse {
        let fov = self.setup.fov;
        ModelResponse::with_calls(
            why,
            calls(
                context,
                vec![("acquire_image_2d", json!({"x": x, "y": y, "width": fov, "height": fov, "step": self.setup.step}))],
            ),
        )
    }

    /// Centroid of the bright pixels of a plotted image, in sample units.
    fn bright_centroid(result: &ToolResult) -> Option<(f64, f64)> {
        let (path, extent) = plotted_image(result)?;
        let (grid, _) = gray_image(&path, &extent)?;
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                if grid.get(r, c) > 0.6 {
                    sx += extent.x_min + (c as f64 + 0.5) / grid.cols as f64 * extent.width();
                    sy += extent.y_min + (r as f64 + 0.5) / grid.rows as f64 * extent.height();
                    n += 1.0;
                }
            }
        }
        (n > 0.0).then(|| (sx / n, sy / n))
    }
}

impl ChatModel for FeatureSearchPolicy {
    fn complete(&self, context: &Context, _schemas: &[ToolSchema]) -> Result<ModelResponse, ModelError> {
        let visits: Vec<(&ToolResult, (f64, f64), bool)> = results(context, "acquire_image_2d")
            .into_iter()
            .filter_map(|r| {
                let f = parse_fields(&r.text);
                let center = (field_f64(&f, "x_center")?, field_f64(&f, "y_center")?);
                let contrast = field_f64(&f, "intensity_max")? - field_f64(&f, "intensity_min")?;
                Some((r, center, contrast > self.contrast_threshold))
            })
            .collect();
        let misses = visits.iter().filter(|v| !v.2).count();
        let n_points = {
            let b = &self.setup.bounds;
            self.axis(b.x_min, b.x_max).len() * self.axis(b.y_min, b.y_max).len()
        };
        match visits.last() {
            Some(&(result, center, true)) => {
                let refinements = visits.iter().rev().take_while(|v| v.2).count();
                let Some(target) = Self::bright_centroid(result) else {
                    return Ok(ModelResponse::text("I cannot read the last image. NEED HUMAN"));
                };
                let target = self.clamp(target);
                let moved = ((target.0 - center.0).powi(2) + (target.1 - center.1).powi(2)).sqrt();
                if moved <= self.setup.fov / 8.0 || refinements > self.max_refinements {
                    return Ok(ModelResponse::text(format!(
                        "The feature is centred in the field of view. x = {:.2}, y = {:.2} TERMINATE",
                        target.0, target.1
                    )));
                }
                Ok(self.acquire(
                    context,
                    target,
                    format!(
                        "Part of the feature is visible around ({:.2}, {:.2}). I move the field of view there to centre it.",
                        target.0, target.1
                    ),
                ))
            }
            _ => {
                let point = self.grid_point(misses);
                Ok(self.acquire(
                    context,
                    point,
                    format!(
                        "Grid search position {} of {n_points}: no target seen yet, so I image the field of view centred at ({:.1}, {:.1}).",
                        misses % n_points + 1,
                        point.0,
                        point.1
                    ),
                ))
            }
        }
    }

    fn name(&self) -> String {
        "policy:feature-search".into()
    }
}
