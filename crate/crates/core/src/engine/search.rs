//! The agent-driven feature search workflow.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{last_assistant_text, results_of, LoopConfig, LoopStatus, Session};
use crate::analysis::Extent;
use crate::beamline::Scenario;
use crate::tools::{beamline_tool, field_f64, parse_fields, ImageSink, SharedBeamline};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSearchParams {
    pub feature: String,
    pub bounds: Extent,
    pub fov: f64,
    pub step: f64,
    pub coarse_step: f64,
    pub max_rounds: usize,
}

impl FeatureSearchParams {
    pub fn from_scenario(scenario: &Scenario) -> Self {
        let s = &scenario.feature_search;
        FeatureSearchParams {
            feature: s.feature.clone(),
            bounds: s.bounds,
            fov: s.fov,
            step: s.step,
            coarse_step: s.coarse_step,
            max_rounds: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSearchReport {
    pub workflow: String,
    pub status: LoopStatus,
    pub rounds: usize,
    /// Visited field-of-view centres in order.
    pub trajectory: Vec<(f64, f64)>,
    #[serde(rename = "final")]
    pub final_center: Option<(f64, f64)>,
    pub found: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn feature_search_prompt(params: &FeatureSearchParams) -> String {
    let b = &params.bounds;
    format!(
        "Look for this feature in the sample: {feature}\n\
         The search range is x in [{x0}, {x1}] and y in [{y0}, {y1}] (um). Use acquire_image_2d with a field of view \
         of {fov} x {fov} um (width = height = {fov}) and step = {step}. Start with a grid search whose neighbouring \
         fields of view are {coarse} um apart, beginning at the corner ({gx}, {gy}) and going row by row. When a part \
         of the feature appears in the field of view, close in on it with whatever direction and step size you find \
         appropriate. Keep every field of view inside the search range. Explain every tool call you make. When the \
         feature is centred in the field of view, report its position as `x = <x>, y = <y>` and say TERMINATE.",
        feature = params.feature,
        x0 = b.x_min,
        x1 = b.x_max,
        y0 = b.y_min,
        y1 = b.y_max,
        fov = params.fov,
        step = params.step,
        coarse = params.coarse_step,
        gx = b.x_min + params.fov / 2.0,
        gy = b.y_min + params.fov / 2.0,
    )
}

static POSITION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"x\s*=\s*(-?\d+(?:\.\d+)?)\s*,\s*y\s*=\s*(-?\d+(?:\.\d+)?)").unwrap());

/// The last `x = …, y = …` pair in a text.
pub fn parse_position(text: &str) -> Option<(f64, f64)> {
    let c = POSITION.captures_iter(text).last()?;
    Some((c[1].parse().ok()?, c[2].parse().ok()?))
}

/// Runs the feature search on a session, adding `acquire_image_2d` to its
/// registry when missing.
pub fn run_feature_search(
    session: &mut Session,
    beamline: &SharedBeamline,
    sink: &ImageSink,
    params: &FeatureSearchParams,
) -> FeatureSearchReport {
    if !session.registry.contains("acquire_image_2d") {
        let tool = beamline_tool("acquire_image_2d", beamline, sink).expect("built-in tool");
        session.registry.register(tool).expect("name checked above");
    }
    let mut config = LoopConfig::with_prompt(feature_search_prompt(params));
    config.max_rounds = params.max_rounds;
    let outcome = session.run_loop(&mut config);

    let trajectory = results_of(&outcome.transcript, "acquire_image_2d")
        .into_iter()
        .filter_map(|r| {
            let f = parse_fields(&r.text);
            Some((field_f64(&f, "x_center")?, field_f64(&f, "y_center")?))
        })
        .collect();
    let final_center = (outcome.status == LoopStatus::Terminated)
        .then(|| last_assistant_text(&outcome.transcript))
        .flatten()
        .and_then(|t| parse_position(&t));
    FeatureSearchReport {
        workflow: "feature_search".into(),
        status: outcome.status,
        rounds: outcome.rounds,
        trajectory,
        found: final_center.is_some(),
        note: final_center.is_none().then(|| "not found".to_string()),
        final_center,
        error: outcome.error,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamline::VirtualBeamline;
    use crate::context::Clock;
    use crate::engine::FeatureSearchPolicy;
    use crate::tools::share;
    use std::sync::Arc;

    fn run(scenario: Scenario) -> FeatureSearchReport {
        let dir = tempfile::tempdir().unwrap();
        let beamline = share(VirtualBeamline::new(scenario.clone()).unwrap());
        let sink = ImageSink::new(dir.path());
        let policy = FeatureSearchPolicy::new(scenario.feature_search.clone());
        let mut session = Session::new("search", Arc::new(policy)).with_clock(Clock::logical());
        run_feature_search(&mut session, &beamline, &sink, &FeatureSearchParams::from_scenario(&scenario))
    }

    #[test]
    fn position_parsing() {
        assert_eq!(parse_position("at x = 132.5, y = 87 TERMINATE"), Some((132.5, 87.0)));
        assert_eq!(parse_position("x=1,y=-2"), Some((1.0, -2.0)));
        assert_eq!(parse_position("nothing"), None);
    }

    #[test]
    fn star_is_found_within_a_quarter_fov() {
        let scenario = Scenario::star_search();
        let (sx, sy) = scenario.pattern.star_center().unwrap();
        let fov = scenario.feature_search.fov;
        let report = run(scenario.clone());
        assert_eq!(report.status, LoopStatus::Terminated, "{report:?}");
        let (fx, fy) = report.final_center.unwrap();
        assert!(((fx - sx).powi(2) + (fy - sy).powi(2)).sqrt() <= fov / 4.0, "{report:?}");
        let (lx, ly) = *report.trajectory.last().unwrap();
        assert!(((lx - sx).powi(2) + (ly - sy).powi(2)).sqrt() <= fov / 4.0);
        let b = scenario.feature_search.bounds;
        for (x, y) in &report.trajectory {
            assert!(*x - fov / 2.0 >= b.x_min && *x + fov / 2.0 <= b.x_max);
            assert!(*y - fov / 2.0 >= b.y_min && *y + fov / 2.0 <= b.y_max);
        }
    }

    #[test]
    fn empty_sample_is_not_found() {
        let report = run(Scenario::empty_search());
        assert_eq!(report.status, LoopStatus::RoundCap);
        assert!(!report.found);
        assert_eq!(report.note.as_deref(), Some("not found"));
        assert_eq!(report.trajectory.len(), 64);
    }
}
