//! Beamline operations exposed as agent tools.
//!
//! Every tool here is stateful: the beamline behind it persists between
//! calls, so the 2D images acquired by one call are available to the
//! registration hook that runs after the next one. Results are `key=value`
//! lines followed by a short sentence of prose; [`parse_fields`] reads them
//! back.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use serde_json::{Map, Value};

use crate::analysis::{render_image_plot, render_profile_plot, Extent, Grid2D};
use crate::beamline::{BeamlineError, Limits, VirtualBeamline};
use crate::runtime::tool::{arg_f64, arg_usize};
use crate::runtime::{ParamDecl, Tool, ToolError, ToolOutput, ToolSpec};

pub type SharedBeamline = Arc<Mutex<VirtualBeamline>>;

pub fn share(beamline: VirtualBeamline) -> SharedBeamline {
    Arc::new(Mutex::new(beamline))
}

/// Locks a shared beamline, recovering from a poisoned mutex.
pub fn lock_beamline(beamline: &SharedBeamline) -> MutexGuard<'_, VirtualBeamline> {
    beamline.lock().unwrap_or_else(|e| e.into_inner())
}

/// Names of the beamline tools in registration order.
pub const BEAMLINE_TOOLS: [&str; 5] = [
    "acquire_image_2d",
    "scan_line_1d",
    "set_zone_plate_z",
    "move_stage",
    "get_beamline_status",
];

/// Directory and counter for the images produced by tools of one session.
#[derive(Debug, Clone)]
pub struct ImageSink {
    dir: PathBuf,
    counter: Arc<AtomicU64>,
}

impl ImageSink {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ImageSink {
            dir: dir.into(),
            counter: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Next file path, `{dir}/{n:04}_{tool}.png`.
    pub fn next_path(&self, tool: &str) -> Result<PathBuf, ToolError> {
        std::fs::create_dir_all(&self.dir)
            .map_err(|e| ToolError::Failed(format!("cannot create image directory {}: {e}", self.dir.display())))?;
        let n = self.counter.fetch_add(1, Ordering::SeqCst) + 1;
        Ok(self.dir.join(format!("{n:04}_{tool}.png")))
    }
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn fail(e: BeamlineError) -> ToolError {
    ToolError::Failed(e.to_string())
}

fn render_fail(e: impl std::fmt::Display) -> ToolError {
    ToolError::Failed(format!("rendering failed: {e}"))
}

/// Reads the `key=value` pairs of a tool result. Pairs may share a line when
/// separated by `", "`; lines without `=` are skipped.
pub fn parse_fields(text: &str) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        for pair in line.split(", ") {
            if let Some((k, v)) = pair.split_once('=') {
                let k = k.trim();
                if !k.is_empty() && !k.contains(' ') {
                    out.insert(k.to_string(), v.trim().to_string());
                }
            }
        }
    }
    out
}

/// Leading number of a field value such as `"-198.000 mm"`.
pub fn field_f64(fields: &BTreeMap<String, String>, key: &str) -> Option<f64> {
    fields.get(key)?.split_whitespace().next()?.parse().ok()
}

fn span((lo, hi): (f64, f64)) -> f64 {
    (hi - lo).max(f64::MIN_POSITIVE)
}

pub struct AcquireImage2d {
    beamline: SharedBeamline,
    sink: ImageSink,
    limits: Limits,
}

impl AcquireImage2d {
    pub fn new(beamline: SharedBeamline, sink: ImageSink) -> Self {
        let limits = lock_beamline(&beamline).state().limits;
        AcquireImage2d { beamline, sink, limits }
    }
}

impl Tool for AcquireImage2d {
    fn spec(&self) -> ToolSpec {
        let l = self.limits;
        ToolSpec::new(
            "acquire_image_2d",
            "Acquire a 2D raster scan centred at (x, y) in sample coordinates (um). \
             Returns a plot of the image with axis ticks in sample coordinates; row 0 is the smallest y \
             and y increases upward in the plot.",
            vec![
                ParamDecl::number("x", "x coordinate of the scan centre (um)").with_range(l.x.0, l.x.1),
                ParamDecl::number("y", "y coordinate of the scan centre (um)").with_range(l.y.0, l.y.1),
                ParamDecl::number("width", "scan width along x (um)").with_range(0.0, span(l.x)),
                ParamDecl::number("height", "scan height along y (um)").with_range(0.0, span(l.y)),
                ParamDecl::number("step", "pixel size (um)").with_range(0.0, span(l.x).min(span(l.y))),
            ],
        )
        .producing_images()
    }

    fn call(&mut self, args: &Map<String, Value>) -> Result<ToolOutput, ToolError> {
        let (x, y) = (arg_f64(args, "x")?, arg_f64(args, "y")?);
        let (w, h, step) = (arg_f64(args, "width")?, arg_f64(args, "height")?, arg_f64(args, "step")?);
        let mut beamline = lock_beamline(&self.beamline);
        let record = beamline.acquire_2d(x, y, w, h, step).map_err(fail)?;
        let grid = record.image().expect("2d scan holds an image");
        let e = record.extent;
        let path = self.sink.next_path("acquire_image_2d")?;
        let title = format!("2D scan  z={:.3} mm  step={:.3}", record.zone_plate_z, step);
        render_image_plot(grid, &e, None, &title, &path).map_err(render_fail)?;
        beamline.set_rendered_path(record.seq, path.clone());
        let (lo, hi, mean) = stats(grid);
        let text = format!(
            "x_center={x:.3}, y_center={y:.3}\n\
             x_min={:.3}, x_max={:.3}, y_min={:.3}, y_max={:.3}\n\
             step={step:.3}, pixels={}x{}\n\
             zone_plate_z={:.3} mm\n\
             intensity_min={lo:.4}, intensity_max={hi:.4}, intensity_mean={mean:.4}\n\
             image_file={}\n\
             Acquired a {}x{} image; the plot shows y increasing upward.",
            e.x_min,
            e.x_max,
            e.y_min,
            e.y_max,
            grid.cols,
            grid.rows,
            record.zone_plate_z,
            file_name(&path),
            grid.cols,
            grid.rows,
        );
        Ok(ToolOutput::with_images(text, vec![path]))
    }
}

fn stats(grid: &Grid2D) -> (f64, f64, f64) {
    let lo = grid.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi, grid.data.iter().sum::<f64>() / grid.data.len() as f64)
}

pub struct ScanLine1d {
    beamline: SharedBeamline,
    sink: ImageSink,
    limits: Limits,
    max_points: usize,
}

impl ScanLine1d {
    pub fn new(beamline: SharedBeamline, sink: ImageSink) -> Self {
        let (limits, max_points) = {
            let b = lock_beamline(&beamline);
            (b.state().limits, b.state().max_points)
        };
        ScanLine1d {
            beamline,
            sink,
            limits,
            max_points,
        }
    }
}

impl Tool for ScanLine1d {
    fn spec(&self) -> ToolSpec {
        let l = self.limits;
        ToolSpec::new(
            "scan_line_1d",
            "Scan a straight line from (x_start, y_start) to (x_end, y_end) in sample coordinates (um). \
             The intensity profile is fitted with a Gaussian; the plot and the result text report the FWHM.",
            vec![
                ParamDecl::number("x_start", "x of the first point (um)").with_range(l.x.0, l.x.1),
                ParamDecl::number("y_start", "y of the first point (um)").with_range(l.y.0, l.y.1),
                ParamDecl::number("x_end", "x of the last point (um)").with_range(l.x.0, l.x.1),
                ParamDecl::number("y_end", "y of the last point (um)").with_range(l.y.0, l.y.1),
                ParamDecl::integer("n_points", "number of points along the line").with_range(8.0, self.max_points as f64),
            ],
        )
        .producing_images()
    }

    fn call(&mut self, args: &Map<String, Value>) -> Result<ToolOutput, ToolError> {
        let start = (arg_f64(args, "x_start")?, arg_f64(args, "y_start")?);
        let end = (arg_f64(args, "x_end")?, arg_f64(args, "y_end")?);
        let n = arg_usize(args, "n_points")?;
        let mut beamline = lock_beamline(&self.beamline);
        let record = beamline.scan_line(start, end, n).map_err(fail)?;
        let profile = record.profile().expect("line scan holds a profile");
        let path = self.sink.next_path("scan_line_1d")?;
        let title = format!("Line scan  z={:.3} mm", record.zone_plate_z);
        render_profile_plot(profile, record.fit.as_ref(), &title, &path).map_err(render_fail)?;
        let fit_text = match &record.fit {
            Some(f) => format!(
                "FWHM={:.6}, center={:.4}, amplitude={:.4}, baseline={:.4}",
                f.fwhm, f.center, f.amplitude, f.baseline
            ),
            None => "FWHM=none (no discernible peak)".to_string(),
        };
        let prose = match &record.fit {
            Some(f) => format!("The fitted Gaussian has a FWHM of {:.4} um.", f.fwhm),
            None => "The profile has no discernible peak; no FWHM could be measured.".to_string(),
        };
        let text = format!(
            "{fit_text}\n\
             x_start={:.3}, y_start={:.3}, x_end={:.3}, y_end={:.3}, n_points={n}\n\
             zone_plate_z={:.3} mm\n\
             image_file={}\n\
             {prose}",
            start.0,
            start.1,
            end.0,
            end.1,
            record.zone_plate_z,
            file_name(&path),
        );
        Ok(ToolOutput::with_images(text, vec![path]))
    }
}

pub struct SetZonePlateZ {
    beamline: SharedBeamline,
    limits: (f64, f64),
}

impl SetZonePlateZ {
    pub fn new(beamline: SharedBeamline) -> Self {
        let limits = lock_beamline(&beamline).state().limits.z;
        SetZonePlateZ { beamline, limits }
    }
}

impl Tool for SetZonePlateZ {
    fn spec(&self) -> ToolSpec {
        ToolSpec::new(
            "set_zone_plate_z",
            "Move the zone plate to the given z position (mm). Changing z changes the focus and makes the image drift.",
            vec![ParamDecl::number("z", "zone plate z position (mm)").with_range(self.limits.0, self.limits.1)],
        )
    }

    fn call(&mut self, args: &Map<String, Value>) -> Result<ToolOutput, ToolError> {
        let z = arg_f64(args, "z")?;
        let previous = lock_beamline(&self.beamline).set_zone_plate_z(z).map_err(fail)?;
        Ok(ToolOutput::text(format!(
            "zone_plate_z = {z:.3} mm\nprevious_z={previous:.3} mm\nThe zone plate was moved."
        )))
    }
}

pub struct MoveStage {
    beamline: SharedBeamline,
    limits: Limits,
}

impl MoveStage {
    pub fn new(beamline: SharedBeamline) -> Self {
        let limits = lock_beamline(&beamline).state().limits;
        MoveStage { beamline, limits }
    }
}

impl Tool for MoveStage {
    fn spec(&self) -> ToolSpec {
        let l = self.limits;
        ToolSpec::new(
            "move_stage",
            "Move the sample stage to (x, y) in sample coordinates (um).",
            vec![
                ParamDecl::number("x", "stage x (um)").with_range(l.x.0, l.x.1),
                ParamDecl::number("y", "stage y (um)").with_range(l.y.0, l.y.1),
            ],
        )
    }

    fn call(&mut self, args: &Map<String, Value>) -> Result<ToolOutput, ToolError> {
        let (x, y) = (arg_f64(args, "x")?, arg_f64(args, "y")?);
        lock_beamline(&self.beamline).move_stage(x, y).map_err(fail)?;
        Ok(ToolOutput::text(format!("stage_x={x:.3}, stage_y={y:.3}\nThe stage was moved.")))
    }
}

/// Reports the observable instrument state. The focus position and the
/// drift are deliberately not disclosed.
pub struct GetBeamlineStatus {
    beamline: SharedBeamline,
}

impl GetBeamlineStatus {
    pub fn new(beamline: SharedBeamline) -> Self {
        GetBeamlineStatus { beamline }
    }
}

impl Tool for GetBeamlineStatus {
    fn spec(&self) -> ToolSpec {
        ToolSpec::new(
            "get_beamline_status",
            "Report the current stage position, zone plate position and motion limits.",
            vec![],
        )
    }

    fn call(&mut self, _args: &Map<String, Value>) -> Result<ToolOutput, ToolError> {
        let b = lock_beamline(&self.beamline);
        let s = b.state();
        Ok(ToolOutput::text(format!(
            "stage_x={:.3}, stage_y={:.3}\n\
             zone_plate_z={:.3} mm\n\
             x_limits=[{}, {}], y_limits=[{}, {}], z_limits=[{}, {}]\n\
             max_points={}",
            s.stage_x, s.stage_y, s.zone_plate_z, s.limits.x.0, s.limits.x.1, s.limits.y.0, s.limits.y.1, s.limits.z.0,
            s.limits.z.1, s.max_points
        )))
    }
}

/// One recorded `dummy_acquire` call: `(x, y, width, height)`.
pub type AcquireCall = (f64, f64, f64, f64);

/// Image acquisition stand-in that records its calls and returns a canned
/// gray image.
pub struct DummyAcquire {
    calls: Arc<Mutex<Vec<AcquireCall>>>,
    sink: ImageSink,
}

impl DummyAcquire {
    pub fn new(sink: ImageSink) -> Self {
        DummyAcquire {
            calls: Arc::default(),
            sink,
        }
    }

    /// Handle on the call log, usable after the tool moved into a registry.
    pub fn log(&self) -> Arc<Mutex<Vec<AcquireCall>>> {
        self.calls.clone()
    }
}

impl Tool for DummyAcquire {
    fn spec(&self) -> ToolSpec {
        ToolSpec::new(
            "dummy_acquire",
            "Acquire an image at (x, y) with the given width and height, all in pixels.",
            vec![
                ParamDecl::number("x", "x position of the image (pixels)"),
                ParamDecl::number("y", "y position of the image (pixels)"),
                ParamDecl::number("width", "image width (pixels)"),
                ParamDecl::number("height", "image height (pixels)"),
            ],
        )
        .producing_images()
    }

    fn call(&mut self, args: &Map<String, Value>) -> Result<ToolOutput, ToolError> {
        let call = (
            arg_f64(args, "x")?,
            arg_f64(args, "y")?,
            arg_f64(args, "width")?,
            arg_f64(args, "height")?,
        );
        self.calls.lock().unwrap_or_else(|e| e.into_inner()).push(call);
        let path = self.sink.next_path("dummy_acquire")?;
        let (w, h) = (call.2.max(1.0), call.3.max(1.0));
        let gray = Grid2D::from_fn(16, 16, |_, _| 0.5);
        let extent = Extent::new(call.0, call.0 + w, call.1, call.1 + h);
        render_image_plot(&gray, &extent, None, "dummy image", &path).map_err(render_fail)?;
        Ok(ToolOutput::with_images(
            format!(
                "x={:.1}, y={:.1}, width={:.1}, height={:.1}\nimage_file={}\nImage acquired.",
                call.0,
                call.1,
                call.2,
                call.3,
                file_name(&path)
            ),
            vec![path],
        ))
    }
}

/// High-risk code-execution tool. Running code is out of scope for this
/// runtime, so an approved call only records the submitted source.
pub struct PythonExec {
    submitted: Arc<Mutex<Vec<String>>>,
}

impl PythonExec {
    pub fn new() -> Self {
        PythonExec {
            submitted: Arc::default(),
        }
    }

    pub fn log(&self) -> Arc<Mutex<Vec<String>>> {
        self.submitted.clone()
    }
}

impl Default for PythonExec {
    fn default() -> Self {
        Self::new()
    }
}

impl Tool for PythonExec {
    fn spec(&self) -> ToolSpec {
        ToolSpec::new(
            "python_exec",
            "Run a Python snippet. Requires human approval.",
            vec![ParamDecl::string("code", "Python source to run")],
        )
        .high_risk()
    }

    fn call(&mut self, args: &Map<String, Value>) -> Result<ToolOutput, ToolError> {
        let code = args
            .get("code")
            .and_then(Value::as_str)
            .ok_or_else(|| ToolError::InvalidArguments("missing string parameter 'code'".into()))?;
        self.submitted.lock().unwrap_or_else(|e| e.into_inner()).push(code.to_string());
        Ok(ToolOutput::text(format!(
            "accepted_bytes={}\nCode execution is disabled in this runtime; the snippet was recorded only.",
            code.len()
        )))
    }
}

/// Builds one beamline tool by name.
pub fn beamline_tool(name: &str, beamline: &SharedBeamline, sink: &ImageSink) -> Option<Box<dyn Tool>> {
    let b = beamline.clone();
    Some(match name {
        "acquire_image_2d" => Box::new(AcquireImage2d::new(b, sink.clone())),
        "scan_line_1d" => Box::new(ScanLine1d::new(b, sink.clone())),
        "set_zone_plate_z" => Box::new(SetZonePlateZ::new(b)),
        "move_stage" => Box::new(MoveStage::new(b)),
        "get_beamline_status" => Box::new(GetBeamlineStatus::new(b)),
        _ => return None,
    })
}

/// All beamline tools, in [`BEAMLINE_TOOLS`] order.
pub fn beamline_tools(beamline: &SharedBeamline, sink: &ImageSink) -> Vec<Box<dyn Tool>> {
    BEAMLINE_TOOLS
        .iter()
        .map(|n| beamline_tool(n, beamline, sink).expect("known tool"))
        .collect()
}
