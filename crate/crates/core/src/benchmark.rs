//! Model benchmarks: the four-image grid tool-calling task and the
//! marker-reading task.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::{Arc, LazyLock, Mutex};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{render_image_plot, Extent, Grid2D};
use crate::beamline::Scenario;
use crate::context::{Clock, Context};
use crate::engine::{LoopConfig, Session};
use crate::model::{ChatModel, ModelError, ModelResponse};
use crate::runtime::{ToolRegistry, ToolSchema};
use crate::tools::{DummyAcquire, ImageSink};

pub const GRID_PROMPT: &str = "Using the tool given to you, please acquire 4 images at 4 different locations in the sample. The 4 locations are arranged in a square grid. The top left image is at x = 0, y = 0, and the images are separated by 100 pixels in x or y. Each image should have a size of (256, 256) pixels. **IMPORTANT**: When making tool calls, make only one call at a time. Do not make multiple calls at once. When you finish acquiring the 4 images, say \"TERMINATE\".";

pub const MARKER_PROMPT: &str = "The image in this message has a reticle marker. Read out the coordinates of the center of the reticle using the axis ticks. Report your answer in the format of x = <x_coord>, y = <y_coord> (for example, x = 20, y = 30). Only respond with the coordinates, no other text.";

/// `(x, y, width, height)` of the four expected acquisitions.
pub const GRID_EXPECTED: [(f64, f64, f64, f64); 4] = [
    (0.0, 0.0, 256.0, 256.0),
    (100.0, 0.0, 256.0, 256.0),
    (0.0, 100.0, 256.0, 256.0),
    (100.0, 100.0, 256.0, 256.0),
];

/// Extent of the marker images, in sample units.
pub const MARKER_EXTENT: (f64, f64, f64, f64) = (0.0, 100.0, 0.0, 100.0);

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("cannot prepare benchmark files: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkTask {
    Grid,
    Marker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    /// Grid task: expected calls that were made.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hits: Option<usize>,
    /// Marker task: Euclidean error, absent when the reply was unparseable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub task: BenchmarkTask,
    pub model: String,
    pub trials: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hit_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hit_rate_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hits: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_calls: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_std: Option<f64>,
    pub failures: usize,
    pub failure_rate: f64,
    /// Model response time per trial (s); not meaningful for scripted models.
    pub latency_mean: f64,
    pub latency_std: f64,
    pub per_trial: Vec<TrialRecord>,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Sums the response latency of every completion made through it.
struct Timed {
    inner: Arc<dyn ChatModel>,
    total: Mutex<f64>,
}

impl ChatModel for Timed {
    fn complete(&self, context: &Context, schemas: &[ToolSchema]) -> Result<ModelResponse, ModelError> {
        let started = Instant::now();
        let out = self.inner.complete(context, schemas);
        *self.total.lock().unwrap_or_else(|e| e.into_inner()) += started.elapsed().as_secs_f64();
        out
    }

    fn name(&self) -> String {
        self.inner.name()
    }
}

fn key(c: &(f64, f64, f64, f64)) -> (i64, i64, i64, i64) {
    let r = |v: f64| (v * 1000.0).round() as i64;
    (r(c.0), r(c.1), r(c.2), r(c.3))
}

/// Expected calls present in `recorded`, counted as a set.
pub fn grid_hits(recorded: &[(f64, f64, f64, f64)]) -> usize {
    let made: BTreeSet<_> = recorded.iter().map(key).collect();
    GRID_EXPECTED.iter().filter(|e| made.contains(&key(e))).count()
}

/// Runs the grid task. Each trial uses a fresh context and tool; model
/// failures count as misses.
pub fn run_grid_benchmark(model: Arc<dyn ChatModel>, trials: usize, work_dir: &Path) -> Result<BenchmarkReport, BenchmarkError> {
    if trials == 0 {
        return Err(BenchmarkError::NoTrials);
    }
    let mut records = Vec::with_capacity(trials);
    for trial in 0..trials {
        let tool = DummyAcquire::new(ImageSink::new(work_dir.join(format!("grid-{trial:03}"))));
        let log = tool.log();
        let mut registry = ToolRegistry::new();
        registry.register(Box::new(tool)).expect("single tool");
        let timed = Arc::new(Timed {
            inner: model.clone(),
            total: Mutex::new(0.0),
        });
        let mut session = Session::new(&format!("grid-{trial}"), timed.clone())
            .with_clock(Clock::logical())
            .with_registry(registry);
        let mut config = LoopConfig::with_prompt(GRID_PROMPT);
        config.max_rounds = 16;
        let outcome = session.run_loop(&mut config);
        if let Some(e) = &outcome.error {
            log::info!("grid trial {trial}: {e}");
        }
        let recorded = log.lock().unwrap_or_else(|e| e.into_inner()).clone();
        let latency = *timed.total.lock().unwrap_or_else(|e| e.into_inner());
        records.push(TrialRecord {
            trial,
            hits: Some(grid_hits(&recorded)),
            error: None,
            truth: None,
            reply: None,
            latency,
        });
    }
    let hits: usize = records.iter().filter_map(|r| r.hits).sum();
    let rates: Vec<f64> = records.iter().map(|r| r.hits.unwrap_or(0) as f64 / 4.0).collect();
    let (_, rate_std) = mean_std(&rates);
    let (lat_mean, lat_std) = mean_std(&records.iter().map(|r| r.latency).collect::<Vec<_>>());
    let expected = 4 * trials;
    Ok(BenchmarkReport {
        task: BenchmarkTask::Grid,
        model: model.name(),
        trials,
        hit_rate: Some(hits as f64 / expected as f64),
        hit_rate_std: Some(rate_std),
        hits: Some(hits),
        expected_calls: Some(expected),
        mean_error: None,
        error_std: None,
        failures: records.iter().filter(|r| r.hits != Some(4)).count(),
        failure_rate: records.iter().filter(|r| r.hits != Some(4)).count() as f64 / trials as f64,
        latency_mean: lat_mean,
        latency_std: lat_std,
        per_trial: records,
    })
}

/// Seeded marker positions, one per trial, rounded to 0.1.
pub fn marker_truths(seed: u64, trials: usize) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x0, x1, y0, y1) = MARKER_EXTENT;
    let margin = 10.0;
    (0..trials)
        .map(|_| {
            let x: f64 = rng.random_range(x0 + margin..x1 - margin);
            let y: f64 = rng.random_range(y0 + margin..y1 - margin);
            ((x * 10.0).round() / 10.0, (y * 10.0).round() / 10.0)
        })
        .collect()
}

static COORDS: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"x\s*=\s*(-?\d+(?:\.\d+)?)\s*,\s*y\s*=\s*(-?\d+(?:\.\d+)?)").unwrap()
});

/// Reads `x = <num>, y = <num>` from a reply.
pub fn parse_coordinates(text: &str) -> Option<(f64, f64)> {
    let c = COORDS.captures(text)?;
    Some((c[1].parse().ok()?, c[2].parse().ok()?))
}

/// Renders the sample texture with a red reticle at `truth`.
pub fn render_marker_image(truth: (f64, f64), path: &Path) -> Result<PathBuf, BenchmarkError> {
    let (x0, x1, y0, y1) = MARKER_EXTENT;
    let extent = Extent::new(x0, x1, y0, y1);
    let pattern = Scenario::desk().pattern;
    let n = 100;
    let grid = Grid2D::from_fn(n, n, |r, c| {
        let x = x0 + (c as f64 + 0.5) * (x1 - x0) / n as f64 - 50.0;
        let y = y0 + (r as f64 + 0.5) * (y1 - y0) / n as f64 - 50.0;
        pattern.blurred(x, y, 0.8)
    });
    render_image_plot(&grid, &extent, Some(truth), "marker", path).map_err(|e| BenchmarkError::Io(e.to_string()))?;
    Ok(path.to_path_buf())
}

/// Runs the marker task with `marker_truths(seed, trials)`. Unparseable
/// replies are failures and do not enter the mean error.
pub fn run_marker_benchmark(
    model: Arc<dyn ChatModel>,
    trials: usize,
    seed: u64,
    work_dir: &Path,
) -> Result<BenchmarkReport, BenchmarkError> {
    if trials == 0 {
        return Err(BenchmarkError::NoTrials);
    }
    std::fs::create_dir_all(work_dir).map_err(|e| BenchmarkError::Io(e.to_string()))?;
    let mut records = Vec::with_capacity(trials);
    for (trial, truth) in marker_truths(seed, trials).into_iter().enumerate() {
        let image = render_marker_image(truth, &work_dir.join(format!("marker-{trial:03}.png")))?;
        let mut session = Session::new(&format!("marker-{trial}"), model.clone()).with_clock(Clock::logical());
        session
            .post_user(MARKER_PROMPT, &[image])
            .map_err(|e| BenchmarkError::Io(e.to_string()))?;
        let started = Instant::now();
        let reply = model.complete(&session.context, &[]);
        let latency = started.elapsed().as_secs_f64();
        let text = match reply {
            Ok(r) => r.text,
            Err(e) => {
                log::info!("marker trial {trial}: {e}");
                String::new()
            }
        };
        let error = parse_coordinates(&text).map(|(x, y)| ((x - truth.0).powi(2) + (y - truth.1).powi(2)).sqrt());
        records.push(TrialRecord {
            trial,
            hits: None,
            error,
            truth: Some(truth),
            reply: Some(text),
            latency,
        });
    }
    let errors: Vec<f64> = records.iter().filter_map(|r| r.error).collect();
    let failures = trials - errors.len();
    let (mean, std) = mean_std(&errors);
    let (lat_mean, lat_std) = mean_std(&records.iter().map(|r| r.latency).collect::<Vec<_>>());
    Ok(BenchmarkReport {
        task: BenchmarkTask::Marker,
        model: model.name(),
        trials,
        hit_rate: None,
        hit_rate_std: None,
        hits: None,
        expected_calls: None,
        mean_error: (!errors.is_empty()).then_some(mean),
        error_std: (!errors.is_empty()).then_some(std),
        failures,
        failure_rate: failures as f64 / trials as f64,
        latency_mean: lat_mean,
        latency_std: lat_std,
        per_trial: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::ToolCall;
    use crate::model::ScriptedModel;
    use serde_json::json;

    fn acquire(id: &str, x: f64, y: f64) -> ToolCall {
        ToolCall::new(id, "dummy_acquire", json!({"x": x, "y": y, "width": 256, "height": 256}))
    }

    fn perfect() -> Vec<ModelResponse> {
        let mut script: Vec<ModelResponse> = GRID_EXPECTED
            .iter()
            .enumerate()
            .map(|(i, e)| ModelResponse::with_calls("", vec![acquire(&format!("c{i}"), e.0, e.1)]))
            .collect();
        script.push(ModelResponse::text("TERMINATE"));
        script
    }

    #[test]
    fn perfect_script_hits_everything() {
        let dir = tempfile::tempdir().unwrap();
        let model = Arc::new(ScriptedModel::new(perfect()).repeating());
        let report = run_grid_benchmark(model, 10, dir.path()).unwrap();
        assert_eq!(report.hit_rate, Some(1.0));
        assert_eq!(report.hits, Some(40));
        assert_eq!(report.failures, 0);
    }

    #[test]
    fn partial_and_batched_scripts() {
        let dir = tempfile::tempdir().unwrap();
        let mut three = perfect();
        three.remove(3);
        let report = run_grid_benchmark(Arc::new(ScriptedModel::new(three)), 1, dir.path()).unwrap();
        assert_eq!(report.hits, Some(3));
        assert_eq!(report.hit_rate, Some(0.75));

        let calls = GRID_EXPECTED.iter().enumerate().map(|(i, e)| acquire(&format!("b{i}"), e.0, e.1)).collect();
        let batched = vec![ModelResponse::with_calls("", calls), ModelResponse::text("TERMINATE")];
        let report = run_grid_benchmark(Arc::new(ScriptedModel::new(batched)), 1, dir.path()).unwrap();
        assert_eq!(report.hits, Some(4));

        // a failing model only loses hits
        let report = run_grid_benchmark(Arc::new(ScriptedModel::new(Vec::<ModelResponse>::new())), 2, dir.path()).unwrap();
        assert_eq!(report.hit_rate, Some(0.0));
    }

    fn replies(seed: u64, n: usize, dx: f64, dy: f64) -> Vec<ModelResponse> {
        marker_truths(seed, n)
            .into_iter()
            .map(|(x, y)| ModelResponse::text(format!("x = {}, y = {}", x + dx, y + dy)))
            .collect()
    }

    #[test]
    fn marker_errors() {
        let dir = tempfile::tempdir().unwrap();
        let echo = run_marker_benchmark(Arc::new(ScriptedModel::new(replies(5, 10, 0.0, 0.0))), 10, 5, dir.path()).unwrap();
        assert_eq!(echo.mean_error, Some(0.0));
        let off = run_marker_benchmark(Arc::new(ScriptedModel::new(replies(5, 10, 3.0, 4.0))), 10, 5, dir.path()).unwrap();
        assert!((off.mean_error.unwrap() - 5.0).abs() < 1e-9);
        let mut mixed = replies(5, 3, 0.0, 0.0);
        mixed[1] = ModelResponse::text("around the middle");
        let r = run_marker_benchmark(Arc::new(ScriptedModel::new(mixed)), 3, 5, dir.path()).unwrap();
        assert_eq!(r.failures, 1);
        assert_eq!(r.mean_error, Some(0.0));
    }

    #[test]
    fn truths_are_seeded() {
        assert_eq!(marker_truths(9, 5), marker_truths(9, 5));
        assert_ne!(marker_truths(9, 5), marker_truths(10, 5));
        assert_eq!(parse_coordinates("x = 20, y = 30"), Some((20.0, 30.0)));
        assert_eq!(parse_coordinates("x=-1.5,y=2"), Some((-1.5, 2.0)));
    }

    #[test]
    fn reports_are_deterministic_apart_from_latency() {
        let dir = tempfile::tempdir().unwrap();
        let run = || {
            let mut r = run_marker_benchmark(Arc::new(ScriptedModel::new(replies(2, 4, 1.0, 0.0))), 4, 2, dir.path()).unwrap();
            r.latency_mean = 0.0;
            r.latency_std = 0.0;
            r.per_trial.iter_mut().for_each(|t| t.latency = 0.0);
            r
        };
        assert_eq!(run(), run());
    }
}
