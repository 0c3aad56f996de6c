//! Image registration after each 2D acquisition, the overlap question and
//! sub-agents.

use std::path::{Path, PathBuf};
use std::sync::{Arc, LazyLock};

use regex::Regex;

use super::{EngineError, Hook, LoopConfig, LoopOutcome, Session, Trigger};
use super::policy::plotted_image;
use crate::analysis::{phase_correlate, read_image_plot, Extent, Grid2D, Offset2D, RegistrationOptions};
use crate::context::{ContentPart, ImageOrigin, Message, Role, ToolResult};
use crate::runtime::{ApprovalSource, ToolRegistry};
use crate::tools::{beamline_tool, field_f64, lock_beamline, parse_fields, ImageSink, SharedBeamline};

pub const OVERLAP_QUESTION: &str = "Do the two images overlap? Answer yes or no.";
const OVERLAP_RETRY: &str = "Please answer with exactly one word: yes or no.";

pub fn offset_message(dx: f64, dy: f64) -> String {
    format!(
        "Offset vs previous image: dx={dx:.3}, dy={dy:.3} (sample units). Apply this to your next line-scan coordinates."
    )
}

static OFFSET: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"dx\s*=\s*(-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)\s*,\s*dy\s*=\s*(-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)").unwrap()
});

/// The last `dx=…, dy=…` pair in a text.
pub fn parse_offset(text: &str) -> Option<(f64, f64)> {
    let caps = OFFSET.captures_iter(text).last()?;
    Some((caps[1].parse().ok()?, caps[2].parse().ok()?))
}

/// `Some(true)` for yes, `Some(false)` for no, ignoring case, whitespace,
/// quotes and punctuation.
pub fn parse_yes_no(text: &str) -> Option<bool> {
    let word: String = text
        .trim()
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation() && !matches!(c, '“' | '”' | '‘' | '’'))
        .collect();
    match word.trim() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Asks the model a yes/no question with no tools offered. An unclear answer
/// is re-asked once and then read as no. Tool calls in a reply are answered
/// with error results.
pub fn ask_yes_no(session: &mut Session, question: &str, images: &[PathBuf]) -> Result<bool, EngineError> {
    let mut parts = vec![ContentPart::text(question)];
    parts.extend(images.iter().map(|p| ContentPart::image(p.clone(), ImageOrigin::Workflow)));
    session.push(Message::with_parts(Role::Auto, parts))?;
    for attempt in 0..2 {
        if attempt == 1 {
            session.push(Message::auto(OVERLAP_RETRY))?;
        }
        let reply = session.model().complete(&session.context, &[])?;
        session.push(Message::assistant(reply.text.clone(), reply.tool_calls.clone()))?;
        for call in &reply.tool_calls {
            session.push(Message::tool(ToolResult::error(
                call.id.clone(),
                "Tools are not available for this question. Answer with yes or no.",
            )))?;
        }
        if reply.tool_calls.is_empty() {
            if let Some(answer) = parse_yes_no(&reply.text) {
                return Ok(answer);
            }
        }
    }
    Ok(false)
}

pub struct SubtaskSpec {
    pub id: String,
    pub registry: ToolRegistry,
    pub config: LoopConfig,
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SubtaskOutcome {
    /// Seq of the summary message appended to the parent.
    pub summary_seq: u64,
    pub outcome: LoopOutcome,
}

/// Runs a child agent with its own context and tools, the parent's model and
/// approval source, and appends one summary message to the parent.
pub fn spawn_subtask(parent: &mut Session, mut spec: SubtaskSpec) -> Result<SubtaskOutcome, EngineError> {
    let model = parent.model().clone();
    let approvals: Arc<dyn ApprovalSource> = parent.approvals().clone();
    let mut child = Session::new(&spec.id, model)
        .with_context(parent.context.child(spec.id.clone()))
        .with_registry(spec.registry)
        .with_approvals(approvals);
    if !spec.images.is_empty() {
        let prompt = spec.config.initial_prompt.take().unwrap_or_default();
        child.post_user(&prompt, &spec.images)?;
    }
    let outcome = child.run_loop(&mut spec.config);
    let final_text = super::last_assistant_text(&outcome.transcript).unwrap_or_default();
    let summary = format!(
        "Sub-task {} finished with status {} after {} rounds. Result: {}",
        spec.id,
        outcome.status,
        outcome.rounds,
        final_text.trim()
    );
    let summary_seq = parent.push(Message::auto(summary))?;
    Ok(SubtaskOutcome { summary_seq, outcome })
}

/// Tools of the feature-tracking sub-agent.
pub fn feature_tracking_registry(beamline: &SharedBeamline, sink: &ImageSink) -> ToolRegistry {
    let mut registry = ToolRegistry::new();
    for name in ["acquire_image_2d", "move_stage"] {
        let tool = beamline_tool(name, beamline, sink).expect("built-in tool");
        registry.register(tool).expect("distinct names");
    }
    registry
}

pub const TRACKING_PROMPT: &str = "Feature tracking task.";

/// Starts a sub-agent that re-locates the reference image's features and
/// reports their offset as `offset: dx=…, dy=…`.
pub fn spawn_feature_tracking(
    parent: &mut Session,
    beamline: &SharedBeamline,
    sink: &ImageSink,
    reference: PathBuf,
    region: &str,
) -> Result<SubtaskOutcome, EngineError> {
    let n = parent.context.messages.len();
    let prompt = format!(
        "{TRACKING_PROMPT} The attached image was acquired over this region:\n{region}\n\
         The sample has drifted since. Acquire images to find the same features, then report how far they moved \
         as `offset: dx=<dx>, dy=<dy>` in sample units and say TERMINATE."
    );
    let mut config = LoopConfig::with_prompt(prompt);
    config.max_rounds = 8;
    spawn_subtask(
        parent,
        SubtaskSpec {
            id: format!("{}-tracking-{n}", parent.id()),
            registry: feature_tracking_registry(beamline, sink),
            config,
            images: vec![reference],
        },
    )
}

/// After each successful 2D acquisition, registers the new image against the
/// previous one and tells the model the offset. When the match is weak the
/// model is asked whether the images overlap; if not, a tracking sub-agent
/// measures the offset.
pub fn registration_hook(beamline: SharedBeamline, sink: ImageSink) -> Hook {
    Hook::new("registration", Trigger::AfterTool("acquire_image_2d".into()), move |session, result| {
        let Some(result) = result.filter(|r| !r.is_error) else {
            return Ok(Vec::new());
        };
        let local = {
            let b = lock_beamline(&beamline);
            match b.last_two_images() {
                Some((prev, cur)) => match (prev.image(), cur.image()) {
                    (Some(a), Some(c)) => {
                        let offset =
                            phase_correlate(a, c, &RegistrationOptions::for_scans(cur.step)).map_err(|e| e.to_string())?;
                        Some((offset, prev.rendered_path.clone(), cur.rendered_path.clone()))
                    }
                    _ => None,
                },
                None => None,
            }
        };
        // Acquisitions served by a remote tool never reach the local
        // simulator; register the plots the model was shown instead.
        let Some((offset, previous, current)) = local.or_else(|| register_plots(session, result)) else {
            return Ok(Vec::new());
        };
        log::debug!("registration offset {offset:?}");
        if !offset.is_low_confidence() {
            return Ok(vec![Message::auto(offset_message(offset.dx, offset.dy))]);
        }
        let images: Vec<PathBuf> = previous.iter().chain(current.iter()).cloned().collect();
        let overlap = ask_yes_no(session, OVERLAP_QUESTION, &images).map_err(|e| e.to_string())?;
        if overlap {
            return Ok(vec![Message::auto(offset_message(offset.dx, offset.dy))]);
        }
        let Some(reference) = previous else {
            return Err("previous image was not rendered".into());
        };
        let region: String = result
            .text
            .lines()
            .filter(|l| l.starts_with("x_center") || l.starts_with("x_min") || l.starts_with("step"))
            .collect::<Vec<_>>()
            .join("\n");
        spawn_feature_tracking(session, &beamline, &sink, reference, &region).map_err(|e| e.to_string())?;
        Ok(Vec::new())
    })
}

/// Offset between the plots of the previous `acquire_image_2d` result in
/// the context and `current`, read back from the rendered images.
fn register_plots(session: &Session, current: &ToolResult) -> Option<(Offset2D, Option<PathBuf>, Option<PathBuf>)> {
    let context = &session.context;
    let acquisitions: Vec<&ToolResult> = context
        .messages
        .iter()
        .filter_map(|m| m.tool_result.as_ref())
        .filter(|r| !r.is_error && super::tool_name_of(context, &r.call_id).as_deref() == Some("acquire_image_2d"))
        .collect();
    let at = acquisitions.iter().position(|r| r.call_id == current.call_id)?;
    let previous = acquisitions.get(at.checked_sub(1)?)?;
    let (prev_path, prev_extent) = plotted_image(previous)?;
    let (cur_path, cur_extent) = plotted_image(current)?;
    let fields = parse_fields(&current.text);
    let step = field_f64(&fields, "step")?;
    let (cols, rows) = fields.get("pixels")?.split_once('x')?;
    let (rows, cols) = (rows.parse().ok()?, cols.parse().ok()?);
    let a = scan_grid(&prev_path, &prev_extent, rows, cols)?;
    let c = scan_grid(&cur_path, &cur_extent, rows, cols)?;
    let offset = phase_correlate(&a, &c, &RegistrationOptions::for_plots(step)).ok()?;
    Some((offset, Some(prev_path), Some(cur_path)))
}

/// The plot at `path` sampled at the centres of a `rows`×`cols` scan.
fn scan_grid(path: &Path, extent: &Extent, rows: usize, cols: usize) -> Option<Grid2D> {
    let plot = read_image_plot(path, extent)?;
    if rows == 0 || cols == 0 || plot.rows == 0 || plot.cols == 0 {
        return None;
    }
    Some(Grid2D::from_fn(rows, cols, |r, c| {
        let pr = ((r as f64 + 0.5) * plot.rows as f64 / rows as f64) as usize;
        let pc = ((c as f64 + 0.5) * plot.cols as f64 / cols as f64) as usize;
        plot.get(pr.min(plot.rows - 1), pc.min(plot.cols - 1))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::Clock;
    use crate::engine::LoopStatus;
    use crate::model::{ModelResponse, ScriptedModel};
    use crate::context::ToolCall;
    use serde_json::json;

    #[test]
    fn yes_no_parsing() {
        assert_eq!(parse_yes_no(" Yes."), Some(true));
        assert_eq!(parse_yes_no("\"no\""), Some(false));
        assert_eq!(parse_yes_no("NO!"), Some(false));
        assert_eq!(parse_yes_no("maybe"), None);
        assert_eq!(parse_yes_no("yes, they do"), None);
    }

    #[test]
    fn offset_parsing() {
        assert_eq!(parse_offset("offset: dx=1.25, dy=-0.5 TERMINATE"), Some((1.25, -0.5)));
        assert_eq!(parse_offset(&offset_message(0.1234, -2.0)), Some((0.123, -2.0)));
        assert_eq!(parse_offset("nothing"), None);
    }

    #[test]
    fn unclear_answer_is_asked_again_then_no() {
        let model = ScriptedModel::new(vec![
            ModelResponse::with_calls("", vec![ToolCall::new("c1", "move_stage", json!({"x": 0, "y": 0}))]),
            ModelResponse::text("perhaps"),
        ]);
        let mut s = Session::new("q", Arc::new(model)).with_clock(Clock::logical());
        assert!(!ask_yes_no(&mut s, OVERLAP_QUESTION, &[]).unwrap());
        let roles: Vec<Role> = s.context.messages.iter().map(|m| m.role).collect();
        assert_eq!(roles, [Role::Auto, Role::Assistant, Role::Tool, Role::Auto, Role::Assistant]);

        let model = ScriptedModel::new(vec![ModelResponse::text("Yes")]);
        let mut s = Session::new("q", Arc::new(model));
        assert!(ask_yes_no(&mut s, OVERLAP_QUESTION, &[]).unwrap());
    }

    #[test]
    fn subtask_adds_one_summary_with_disjoint_seqs() {
        let model = ScriptedModel::new(vec![
            ModelResponse::text("hello"),
            ModelResponse::text("offset: dx=1.000, dy=2.000 TERMINATE"),
        ]);
        let mut parent = Session::new("p", Arc::new(model)).with_clock(Clock::logical());
        parent.post_user("start", &[]).unwrap();
        let before = parent.context.len();
        let out = spawn_subtask(
            &mut parent,
            SubtaskSpec {
                id: "child".into(),
                registry: ToolRegistry::new(),
                config: LoopConfig::with_prompt("track"),
                images: Vec::new(),
            },
        )
        .unwrap();
        assert_eq!(out.outcome.status, LoopStatus::Terminated);
        assert_eq!(parent.context.len(), before + 1);
        let summary = parent.context.last().unwrap();
        assert_eq!(summary.seq, out.summary_seq);
        assert_eq!(parse_offset(&summary.text()), Some((1.0, 2.0)));
        let child_seqs: Vec<u64> = out.outcome.transcript.messages.iter().map(|m| m.seq).collect();
        for m in &parent.context.messages {
            assert!(!child_seqs.contains(&m.seq));
        }
        assert_eq!(out.outcome.transcript.session_id, "child");
    }
}
