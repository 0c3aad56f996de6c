//! Headless workflow runs, the terminal chat loop, the MCP server command and
//! benchmarks.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, Context as _, Result};
use serde_json::Value;

use eaa_core::beamline::{Scenario, VirtualBeamline};
use eaa_core::benchmark::{run_grid_benchmark, run_marker_benchmark, BenchmarkReport};
use eaa_core::context::{Clock, Role};
use eaa_core::engine::{
    run_feature_search, run_focusing, FeatureSearchParams, FocusingParams, LoopConfig, LoopStatus, Session,
    SessionEvent,
};
use eaa_core::mcp::{connect_command, McpServer};
use eaa_core::model::{ChatModel, RecordingModel};
use eaa_core::runtime::{ApprovalDecision, ApprovalRequest, ApprovalSource, ChannelApprovals, ToolRegistry};
use eaa_core::tools::{beamline_tools, share, ImageSink, PythonExec, SharedBeamline};

use crate::config::AppConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Workflow {
    Focusing,
    FeatureSearch,
}

impl Workflow {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "focusing" => Some(Workflow::Focusing),
            "feature_search" | "feature-search" => Some(Workflow::FeatureSearch),
            _ => None,
        }
    }
}

/// Beamline tools plus `python_exec`, with the configured guardrails.
pub fn local_registry(beamline: &SharedBeamline, sink: &ImageSink, config: &AppConfig) -> Result<ToolRegistry> {
    let mut registry = ToolRegistry::new();
    for tool in beamline_tools(beamline, sink) {
        registry.register(tool)?;
    }
    registry.register(Box::new(PythonExec::new()))?;
    config.guardrail.apply(&mut registry)?;
    Ok(registry)
}

/// Registers the tools of every `--mcp-connect` server.
pub fn connect_remote(registry: &mut ToolRegistry, commands: &[String], image_dir: &Path) -> Result<()> {
    for (i, command) in commands.iter().enumerate() {
        let dir = image_dir.join(format!("mcp-{i}"));
        std::fs::create_dir_all(&dir)?;
        let names = connect_command(command, registry, dir).with_context(|| format!("cannot connect to `{command}`"))?;
        log::info!("connected to `{command}`: {}", names.join(", "));
    }
    Ok(())
}

/// Runs a workflow and returns its report. The session is built by the
/// caller so that the service can reuse the same code.
pub fn run_workflow_on(
    kind: Workflow,
    session: &mut Session,
    beamline: &SharedBeamline,
    sink: &ImageSink,
    scenario: &Scenario,
) -> (Value, LoopStatus) {
    match kind {
        Workflow::Focusing => {
            let report = run_focusing(session, beamline, sink, &FocusingParams::from_scenario(scenario));
            let status = report.status;
            (serde_json::to_value(report).expect("report serializes"), status)
        }
        Workflow::FeatureSearch => {
            let report = run_feature_search(session, beamline, sink, &FeatureSearchParams::from_scenario(scenario));
            let status = report.status;
            (serde_json::to_value(report).expect("report serializes"), status)
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorkflowOptions {
    pub work_dir: PathBuf,
    pub report: Option<PathBuf>,
    /// Save the model's responses as a script file replayable with `scripted:`.
    pub record: Option<PathBuf>,
    pub logical_clock: bool,
    pub mcp_connect: Vec<String>,
}

/// Headless `run-focusing` / `run-feature-search`. Writes the transcript to
/// `{work_dir}/{workflow}.jsonl` and the report to `--report` or
/// `{work_dir}/report.json`.
pub fn run_workflow(
    kind: Workflow,
    config: &AppConfig,
    model: Arc<dyn ChatModel>,
    scenario: &Scenario,
    opts: &WorkflowOptions,
) -> Result<(Value, LoopStatus)> {
    let session_id = match kind {
        Workflow::Focusing => "focusing",
        Workflow::FeatureSearch => "feature_search",
    };
    let image_dir = opts.work_dir.join("images");
    std::fs::create_dir_all(&image_dir).with_context(|| format!("cannot create {}", image_dir.display()))?;
    let transcript = opts.work_dir.join(format!("{session_id}.jsonl"));
    if transcript.exists() {
        std::fs::remove_file(&transcript)?;
    }

    let beamline = share(VirtualBeamline::new(scenario.clone())?);
    let sink = ImageSink::new(&image_dir);
    let mut registry = ToolRegistry::new();
    connect_remote(&mut registry, &opts.mcp_connect, &image_dir)?;
    for tool in beamline_tools(&beamline, &sink) {
        if !registry.contains(&tool.spec().name) {
            registry.register(tool)?;
        }
    }
    config.guardrail.apply(&mut registry)?;

    let recorder = opts.record.as_ref().map(|_| Arc::new(RecordingModel::new(model.clone())));
    let model: Arc<dyn ChatModel> = match &recorder {
        Some(r) => r.clone(),
        None => model,
    };
    let mut session = Session::new(session_id, model)
        .with_registry(registry)
        .with_approvals(Arc::new(ChannelApprovals::new(Some(config.guardrail.timeout()))))
        .with_transcript(&transcript);
    if opts.logical_clock {
        session = session.with_clock(Clock::logical());
    }
    if let Some((store, rules, k)) = config.memory()? {
        session = session.with_memory(store, rules, k);
    }

    let (report, status) = run_workflow_on(kind, &mut session, &beamline, &sink, scenario);

    let report_path = opts.report.clone().unwrap_or_else(|| opts.work_dir.join("report.json"));
    write_json(&report_path, &report)?;
    if let (Some(path), Some(recorder)) = (&opts.record, &recorder) {
        write_json(path, &serde_json::to_value(recorder.script())?)?;
    }
    Ok((report, status))
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// `serve-mcp`: exposes the selected local tools over stdio.
pub fn serve_mcp(
    config: &AppConfig,
    scenario: &Scenario,
    tools: &[String],
    image_dir: &Path,
    exit_on_call: Option<u64>,
    input: impl BufRead,
    output: impl Write,
) -> Result<()> {
    std::fs::create_dir_all(image_dir)?;
    let beamline = share(VirtualBeamline::new(scenario.clone())?);
    let mut candidates = beamline_tools(&beamline, &ImageSink::new(image_dir));
    candidates.push(Box::new(PythonExec::new()));
    let available: Vec<String> = candidates.iter().map(|t| t.spec().name).collect();
    if let Some(missing) = tools.iter().find(|t| !available.contains(t)) {
        return Err(anyhow!("unknown tool `{missing}`; available: {}", available.join(", ")));
    }
    let mut registry = ToolRegistry::new();
    for tool in candidates {
        if tools.is_empty() || tools.contains(&tool.spec().name) {
            registry.register(tool)?;
        }
    }
    config.guardrail.apply(&mut registry)?;
    let mut server = McpServer::new(registry);
    server.exit_on_call = exit_on_call;
    server.serve(input, output)?;
    Ok(())
}

pub enum BenchmarkKind {
    Grid,
    Marker,
}

pub fn benchmark(kind: BenchmarkKind, model: Arc<dyn ChatModel>, trials: usize, seed: u64, work_dir: &Path) -> Result<BenchmarkReport> {
    Ok(match kind {
        BenchmarkKind::Grid => run_grid_benchmark(model, trials, work_dir)?,
        BenchmarkKind::Marker => run_marker_benchmark(model, trials, seed, work_dir)?,
    })
}

type SharedOut = Arc<Mutex<Box<dyn Write + Send>>>;
type SharedIn = Arc<Mutex<Box<dyn BufRead + Send>>>;

fn say(out: &SharedOut, text: &str) {
    let mut out = out.lock().unwrap_or_else(|e| e.into_inner());
    let _ = writeln!(out, "{text}");
    let _ = out.flush();
}

fn read_line(input: &SharedIn) -> Option<String> {
    let mut line = String::new();
    match input.lock().unwrap_or_else(|e| e.into_inner()).read_line(&mut line) {
        Ok(0) | Err(_) => None,
        Ok(_) => Some(line.trim_end_matches(['\n', '\r']).to_string()),
    }
}

/// Asks on the terminal; anything but `y`/`yes` denies.
struct TerminalApprovals {
    input: SharedIn,
    output: SharedOut,
}

impl ApprovalSource for TerminalApprovals {
    fn decide(&self, request: &ApprovalRequest) -> ApprovalDecision {
        say(
            &self.output,
            &format!("approval needed for `{}` with arguments\n{}\napprove? [y/N]", request.tool_name, request.arguments),
        );
        let answer = read_line(&self.input).unwrap_or_default().trim().to_lowercase();
        ApprovalDecision::new(&request.call_id, answer == "y" || answer == "yes", "terminal")
    }
}

pub struct ChatOptions {
    pub work_dir: PathBuf,
    pub mcp_connect: Vec<String>,
    pub logical_clock: bool,
}

const CHAT_HELP: &str = "commands: /attach <png> (adds an image to the next message), /focus, /search, /quit";

/// Interactive loop. Each line is a user message; the agent runs until it
/// hands control back.
pub fn chat(
    config: &AppConfig,
    model: Arc<dyn ChatModel>,
    scenario: &Scenario,
    opts: &ChatOptions,
    input: Box<dyn BufRead + Send>,
    output: Box<dyn Write + Send>,
) -> Result<()> {
    let input: SharedIn = Arc::new(Mutex::new(input));
    let output: SharedOut = Arc::new(Mutex::new(output));
    let image_dir = opts.work_dir.join("images");
    std::fs::create_dir_all(&image_dir)?;
    let beamline = share(VirtualBeamline::new(scenario.clone())?);
    let sink = ImageSink::new(&image_dir);
    let mut registry = local_registry(&beamline, &sink, config)?;
    connect_remote(&mut registry, &opts.mcp_connect, &image_dir)?;
    config.guardrail.apply(&mut registry)?;

    let printer = output.clone();
    let mut session = Session::new("chat", model)
        .with_registry(registry)
        .with_approvals(Arc::new(TerminalApprovals {
            input: input.clone(),
            output: output.clone(),
        }))
        .with_transcript(opts.work_dir.join("chat.jsonl"))
        .with_events(Arc::new(move |event: &SessionEvent| {
            if let Some(line) = describe(event) {
                say(&printer, &line);
            }
        }));
    if opts.logical_clock {
        session = session.with_clock(Clock::logical());
    }
    if let Some((store, rules, k)) = config.memory()? {
        session = session.with_memory(store, rules, k);
    }

    say(&output, CHAT_HELP);
    let mut attachments: Vec<PathBuf> = Vec::new();
    while let Some(line) = read_line(&input) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "/quit" {
            break;
        }
        if let Some(path) = line.strip_prefix("/attach ") {
            let path = PathBuf::from(path.trim());
            if path.is_file() {
                attachments.push(path);
            } else {
                say(&output, &format!("no such file: {}", path.display()));
            }
            continue;
        }
        let workflow = match line {
            "/focus" => Some(Workflow::Focusing),
            "/search" => Some(Workflow::FeatureSearch),
            _ => None,
        };
        if let Some(kind) = workflow {
            let (report, _) = run_workflow_on(kind, &mut session, &beamline, &sink, scenario);
            say(&output, &serde_json::to_string_pretty(&report)?);
            continue;
        }
        if line.starts_with('/') {
            say(&output, CHAT_HELP);
            continue;
        }
        session.post_user(line, &attachments)?;
        attachments.clear();
        let mut loop_config = LoopConfig {
            require_signal_or_tool: false,
            ..LoopConfig::default()
        };
        let outcome = session.run_loop(&mut loop_config);
        if let Some(error) = outcome.error {
            say(&output, &format!("error: {error}"));
        }
    }
    Ok(())
}

fn describe(event: &SessionEvent) -> Option<String> {
    match event {
        SessionEvent::MessageAppended { message } => match message.role {
            Role::Assistant => {
                let mut text = format!("assistant: {}", message.text());
                for call in &message.tool_calls {
                    text.push_str(&format!("\n  -> {}({})", call.tool_name, call.arguments_json));
                }
                Some(text)
            }
            Role::Tool => {
                let images: Vec<String> = message.image_paths().map(|p| p.display().to_string()).collect();
                let mut text = format!("tool: {}", message.text());
                if !images.is_empty() {
                    text.push_str(&format!("\n  images: {}", images.join(", ")));
                }
                Some(text)
            }
            Role::System | Role::User => None,
            Role::Auto => Some(format!("auto: {}", message.text())),
        },
        SessionEvent::StatusChanged { status } if status != "running" => Some(format!("[{status}]")),
        _ => None,
    }
}
