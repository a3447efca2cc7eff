//! Command-line and HTTP front ends for the learning pipeline.

pub mod http;

use std::io::Read;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use loom_core::config::LoomConfig;
use loom_core::graph::SelfReportKind;
use loom_core::service::{BackgroundMode, ServiceError};
use loom_core::{ConversationId, CourseId, Loom, ProposalId, ProposalStatus, Trigger};

#[derive(Debug, Parser)]
#[command(
    name = "loom",
    version,
    about = "Turns everyday chats into short personalized courses"
)]
pub struct Cli {
    /// Directory holding the journals; overrides the config file.
    #[arg(long, global = true, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,

    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Use the mock provider, optionally with a JSON reply script.
    #[arg(long, global = true, num_args = 0..=1, value_name = "SCRIPT")]
    pub mock: Option<Option<PathBuf>>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RunTrigger {
    Manual,
    Scheduled,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReportKind {
    Known,
    Irrelevant,
    Unmark,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StatusFilter {
    Proposed,
    Accepted,
    Dismissed,
}

impl From<StatusFilter> for ProposalStatus {
    fn from(s: StatusFilter) -> Self {
        match s {
            StatusFilter::Proposed => ProposalStatus::Proposed,
            StatusFilter::Accepted => ProposalStatus::Accepted,
            StatusFilter::Dismissed => ProposalStatus::Dismissed,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Import chats from an export document ("-" reads stdin).
    Import {
        file: PathBuf,
    },
    /// Write every conversation as an export document.
    ExportChats {
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Add a goal umbrella carried over from prior learning.
    SeedGoal {
        label: String,
    },
    /// Send one chat message and print the reply.
    Chat {
        #[arg(long)]
        conversation: Option<String>,
        text: String,
    },
    /// List conversations with their activity status.
    ListChats,
    /// Run summarize → decide now.
    RunPipeline {
        #[arg(long, value_enum, default_value = "manual")]
        trigger: RunTrigger,
    },
    ListProposals {
        #[arg(long, value_enum)]
        status: Option<StatusFilter>,
    },
    /// Accept a proposal and generate its course.
    Accept {
        proposal_id: String,
        #[arg(long)]
        idempotency_key: Option<String>,
    },
    Dismiss {
        proposal_id: String,
    },
    ListCourses,
    /// Write a course as a portable JSON document.
    ExportCourse {
        course_id: String,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Grade a module quiz; answers are option indices.
    SubmitQuiz {
        course_id: String,
        module: usize,
        #[arg(value_delimiter = ',', num_args = 0..)]
        answers: Vec<usize>,
        #[arg(long)]
        idempotency_key: Option<String>,
    },
    SelfReport {
        course_id: String,
        module: usize,
        #[arg(value_enum)]
        kind: ReportKind,
    },
    /// Print the learner graph view.
    Graph {
        /// Print the raw versioned snapshot instead.
        #[arg(long)]
        snapshot: bool,
    },
    /// Finish work a previous process left pending.
    Resume,
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// Run a scheduled pipeline every N minutes.
        #[arg(long, value_name = "N")]
        schedule_minutes: Option<u64>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub fn load_config(cli: &Cli) -> Result<LoomConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => LoomConfig::load(path).map_err(|e| CliError::Usage(e.to_string()))?,
        None => LoomConfig::default(),
    };
    if let Some(dir) = &cli.data_dir {
        config.data_dir = dir.clone();
    }
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

pub fn open(cli: &Cli, config: &LoomConfig, background: BackgroundMode) -> Result<Loom, CliError> {
    let mock = cli.mock.as_ref().map(|m| m.as_deref());
    Ok(Loom::from_config(config, mock, background)?)
}

fn to_json(value: impl serde::Serialize) -> Value {
    serde_json::to_value(value).expect("response serializes")
}

fn write_output(path: Option<&PathBuf>, text: &str) -> Result<Option<Value>, CliError> {
    match path {
        Some(path) => {
            std::fs::write(path, text).map_err(|e| CliError::io(path, e))?;
            Ok(Some(json!({"written": path})))
        }
        None => {
            println!("{text}");
            Ok(None)
        }
    }
}

/// Runs one command. `Ok(Some(v))` is printed as JSON by the caller.
pub fn execute(cli: Cli) -> Result<Option<Value>, CliError> {
    let config = load_config(&cli)?;
    if let Command::Serve {
        port,
        bind,
        schedule_minutes,
    } = &cli.command
    {
        let loom = Arc::new(open(&cli, &config, BackgroundMode::Queued)?);
        serve(loom, bind, port.unwrap_or(config.port), *schedule_minutes)?;
        return Ok(None);
    }
    let loom = open(&cli, &config, BackgroundMode::Inline)?;
    let out = match cli.command {
        Command::Import { file } => {
            let text = if file.as_os_str() == "-" {
                let mut s = String::new();
                std::io::stdin()
                    .read_to_string(&mut s)
                    .map_err(|e| CliError::io(&file, e))?;
                s
            } else {
                std::fs::read_to_string(&file).map_err(|e| CliError::io(&file, e))?
            };
            let report = loom.import_conversations(&text)?;
            json!({
                "imported": report.imported.iter().map(|c| &c.id).collect::<Vec<_>>(),
                "skipped": report.skipped,
            })
        }
        Command::ExportChats { output } => {
            return write_output(output.as_ref(), &loom.export_conversations())
        }
        Command::SeedGoal { label } => {
            json!({"goal_id": loom.seed_goal(&label)?, "label": label.trim()})
        }
        Command::Chat { conversation, text } => {
            to_json(loom.chat_turn(conversation.map(ConversationId).as_ref(), &text)?)
        }
        Command::ListChats => to_json(loom.chat_listing()),
        Command::RunPipeline { trigger } => to_json(loom.run_pipeline(match trigger {
            RunTrigger::Manual => Trigger::Manual,
            RunTrigger::Scheduled => Trigger::Scheduled,
        })),
        Command::ListProposals { status } => {
            let status = status.map(ProposalStatus::from);
            to_json(
                loom.list_proposals()
                    .into_iter()
                    .filter(|p| status.is_none_or(|s| p.status == s))
                    .collect::<Vec<_>>(),
            )
        }
        Command::Accept {
            proposal_id,
            idempotency_key,
        } => {
            let course =
                loom.accept_proposal(&ProposalId(proposal_id), idempotency_key.as_deref())?;
            json!({
                "course_id": course.id,
                "title": course.title,
                "modules": course.modules.iter().map(|m| &m.title).collect::<Vec<_>>(),
            })
        }
        Command::Dismiss { proposal_id } => {
            to_json(loom.dismiss_proposal(&ProposalId(proposal_id))?)
        }
        Command::ListCourses => to_json(
            loom.list_courses()
                .iter()
                .map(|c| json!({"id": c.id, "title": c.title, "modules": c.modules.len()}))
                .collect::<Vec<_>>(),
        ),
        Command::ExportCourse { course_id, output } => {
            let id = CourseId(course_id);
            let course = loom.course(&id).ok_or(ServiceError::UnknownCourse(id))?;
            return write_output(output.as_ref(), &course.to_document());
        }
        Command::SubmitQuiz {
            course_id,
            module,
            answers,
            idempotency_key,
        } => to_json(loom.submit_quiz(
            &CourseId(course_id),
            module,
            &answers,
            idempotency_key.as_deref(),
        )?),
        Command::SelfReport {
            course_id,
            module,
            kind,
        } => {
            let id = CourseId(course_id);
            to_json(match kind {
                ReportKind::Known => loom.self_report(&id, module, SelfReportKind::Known)?,
                ReportKind::Irrelevant => {
                    loom.self_report(&id, module, SelfReportKind::Irrelevant)?
                }
                ReportKind::Unmark => loom.unmark_self_report(&id, module)?,
            })
        }
        Command::Graph { snapshot } => {
            if snapshot {
                return write_output(None, &loom.graph_snapshot());
            }
            to_json(loom.graph_view())
        }
        Command::Resume => json!({"run": loom.resume()}),
        Command::Serve { .. } => unreachable!("handled above"),
    };
    Ok(Some(out))
}

/// Spawns the background worker that drains queued jobs.
pub fn spawn_worker(loom: Arc<Loom>, schedule: Option<Duration>) -> std::thread::JoinHandle<()> {
    std::thread::spawn(move || {
        if let Some(run) = loom.resume() {
            tracing::info!(run = %run.id, "resumed pending regroups");
        }
        let mut last_scheduled = std::time::Instant::now();
        loop {
            if loom.wait_for_jobs(Duration::from_secs(1)) {
                loom.run_pending_jobs();
            }
            if let Some(every) = schedule {
                if last_scheduled.elapsed() >= every {
                    last_scheduled = std::time::Instant::now();
                    let run = loom.run_pipeline(Trigger::Scheduled);
                    tracing::info!(run = %run.id, outcome = ?run.outcome, "scheduled pipeline run");
                }
            }
        }
    })
}

fn serve(
    loom: Arc<Loom>,
    bind: &str,
    port: u16,
    schedule_minutes: Option<u64>,
) -> Result<(), CliError> {
    spawn_worker(
        Arc::clone(&loom),
        schedule_minutes.map(|m| Duration::from_secs(m * 60)),
    );
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start runtime: {e}")))?;
    let addr = format!("{bind}:{port}");
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Usage(format!("cannot bind {addr}: {e}")))?;
        tracing::info!(%addr, "listening");
        eprintln!("listening on http://{addr}");
        axum::serve(listener, http::router(loom))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Usage(format!("server error: {e}")))
    })
}
