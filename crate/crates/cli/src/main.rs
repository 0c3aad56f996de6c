use std::io::{BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use eaa_cli::config::AppConfig;
use eaa_cli::service::{self, AppState, ServiceOptions};
use eaa_cli::workflows::{self, BenchmarkKind, ChatOptions, Workflow, WorkflowOptions};
use eaa_core::engine::LoopStatus;

#[derive(Parser)]
#[command(name = "eaa", version, about = "Agentic control of a (virtual) scanning X-ray microscope")]
struct Cli {
    /// Config file (TOML, or JSON by extension). Defaults to $EAA_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// openai[:<name>], scripted:<file>, policy:focusing or policy:feature-search
    #[arg(long)]
    model: Option<String>,
    /// Scenario file or built-in name (desk, star, empty).
    #[arg(long)]
    scenario: Option<String>,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Directory for the transcript and images.
    #[arg(long, default_value = "eaa-work")]
    work_dir: PathBuf,
    /// Report path; defaults to <work-dir>/report.json.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Save the model's responses as a replayable script.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Timestamps derived from seq numbers, for reproducible transcripts.
    #[arg(long)]
    logical_clock: bool,
    /// Also use the tools of this MCP server command (repeatable).
    #[arg(long = "mcp-connect")]
    mcp_connect: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Interactive terminal chat with the agent.
    Chat {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "eaa-work")]
        work_dir: PathBuf,
        #[arg(long = "mcp-connect")]
        mcp_connect: Vec<String>,
        #[arg(long)]
        logical_clock: bool,
    },
    /// Headless zone-plate focusing; writes a JSON report.
    RunFocusing(RunArgs),
    /// Headless feature search; writes a JSON report.
    RunFeatureSearch(RunArgs),
    /// HTTP session service.
    Serve {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Expose local tools as an MCP server on stdin/stdout.
    ServeMcp {
        /// Comma-separated tool names; all tools when omitted.
        #[arg(long, value_delimiter = ',')]
        tools: Vec<String>,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        image_dir: Option<PathBuf>,
        /// Exit without answering the n-th tools/call request.
        #[arg(long, hide = true)]
        fault_exit_on_call: Option<u64>,
    },
    /// Model benchmarks.
    Benchmark {
        #[arg(value_enum)]
        task: Task,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long)]
        model: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "eaa-work/benchmark")]
        work_dir: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Grid,
    Marker,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Config(anyhow::Error),
    Workflow(String),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Config(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Workflow(msg)) => {
            eprintln!("workflow failed: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = AppConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Chat {
            model,
            work_dir,
            mcp_connect,
            logical_clock,
        } => {
            let scenario = config.scenario(model.scenario.as_deref())?;
            let chat_model = config.model(model.model.as_deref(), &scenario)?;
            let opts = ChatOptions {
                work_dir,
                mcp_connect,
                logical_clock,
            };
            let input = Box::new(BufReader::new(std::io::stdin()));
            workflows::chat(&config, chat_model, &scenario, &opts, input, Box::new(std::io::stdout()))?;
        }
        Command::RunFocusing(args) => run_headless(Workflow::Focusing, &config, args)?,
        Command::RunFeatureSearch(args) => run_headless(Workflow::FeatureSearch, &config, args)?,
        Command::Serve { model, bind, data_dir } => {
            let scenario = config.scenario(model.scenario.as_deref())?;
            let model_spec = model.model.or_else(|| config.model.spec.clone());
            // Fail early on an unusable model instead of on the first session.
            config.model(model_spec.as_deref(), &scenario)?;
            let bind = bind.unwrap_or_else(|| config.service.bind.clone());
            let data_dir = data_dir.unwrap_or_else(|| config.service.data_dir.clone());
            let app = AppState::new(ServiceOptions {
                config,
                scenario,
                model_spec,
                data_dir,
            })?;
            let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            runtime.block_on(service::serve(app, &bind))?;
        }
        Command::ServeMcp {
            tools,
            scenario,
            image_dir,
            fault_exit_on_call,
        } => {
            let scenario = config.scenario(scenario.as_deref())?;
            let image_dir = image_dir.unwrap_or_else(|| std::env::temp_dir().join(format!("eaa-mcp-{}", std::process::id())));
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            workflows::serve_mcp(&config, &scenario, &tools, &image_dir, fault_exit_on_call, stdin.lock(), stdout.lock())?;
        }
        Command::Benchmark {
            task,
            trials,
            model,
            seed,
            work_dir,
            report,
        } => {
            let scenario = config.scenario(None)?;
            let bench_model = config.model(model.as_deref(), &scenario)?;
            let kind = match task {
                Task::Grid => BenchmarkKind::Grid,
                Task::Marker => BenchmarkKind::Marker,
            };
            let result = workflows::benchmark(kind, bench_model, trials, seed, &work_dir)?;
            let value = serde_json::to_value(&result).context("serializing report")?;
            if let Some(path) = report {
                workflows::write_json(&path, &value)?;
            }
            print_json(&value)?;
        }
    }
    Ok(())
}

fn run_headless(kind: Workflow, config: &AppConfig, args: RunArgs) -> Result<(), Failure> {
    let scenario = config.scenario(args.model.scenario.as_deref())?;
    let model = config.model(args.model.model.as_deref(), &scenario)?;
    let opts = WorkflowOptions {
        work_dir: args.work_dir,
        report: args.report,
        record: args.record,
        logical_clock: args.logical_clock,
        mcp_connect: args.mcp_connect,
    };
    let (report, status) = workflows::run_workflow(kind, config, model, &scenario, &opts)?;
    print_json(&report)?;
    if status == LoopStatus::Error {
        let reason = report["error"].as_str().unwrap_or("unknown error").to_string();
        return Err(Failure::Workflow(reason));
    }
    Ok(())
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}
