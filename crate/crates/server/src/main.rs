//! `crskit` command line: serve pipelines, write demo artifacts, push to a hub.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};
use crskit::demo;
use crskit::generator::GenStyle;
use crskit::module::Module;
use crskit::pipeline::{Pipeline, PipelineConfig, PipelineKind};
use crskit::{push_to_hub, save_pretrained};
use crskit_server::config::PipelineEntry;
use crskit_server::{router, spawn_sweeper, AppState, ServerConfig};

#[derive(Debug, Parser)]
#[command(name = "crskit", version, about = "Conversational recommender pipelines as a chat service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load the configured pipelines and serve the chat API.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Force prompted generators onto their offline template fallback.
        #[arg(long)]
        offline: bool,
        /// Static files (for example a built chat UI) served under `/`.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
    /// Write demo pipeline artifacts and a matching config file.
    InitDemo {
        #[arg(long, default_value = "demo")]
        out: PathBuf,
        /// Also write a pipeline whose generator calls this chat-completion endpoint.
        #[arg(long)]
        llm_url: Option<String>,
        #[arg(long, default_value = "gpt-4o-mini")]
        llm_model: String,
    },
    /// Upload a saved artifact directory to a hub.
    Push {
        dir: PathBuf,
        #[arg(long)]
        hub: String,
        #[arg(long, env = "CRSKIT_HUB_TOKEN", hide_env_values = true)]
        token: String,
    },
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    match Cli::parse().command {
        Command::Serve {
            config,
            port,
            host,
            offline,
            ui_dir,
        } => serve(&config, SocketAddr::new(host, port), offline, ui_dir).await,
        Command::InitDemo {
            out,
            llm_url,
            llm_model,
        } => init_demo(&out, llm_url.as_deref(), &llm_model),
        Command::Push { dir, hub, token } => {
            let name = push_to_hub(&dir, &hub, &token).await?;
            println!("pushed {name} to {hub}");
            Ok(())
        }
    }
}

async fn serve(config: &Path, addr: SocketAddr, offline: bool, ui_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = ServerConfig::read(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let pipelines = cfg.load_pipelines(base, offline).await?;
    tracing::info!(count = pipelines.len(), offline, "pipelines loaded");
    let state = Arc::new(AppState::new(pipelines, cfg.session_ttl()));
    spawn_sweeper(state.clone());
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state, ui_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn init_demo(out: &Path, llm_url: Option<&str>, llm_model: &str) -> anyhow::Result<()> {
    let artifacts = out.join("artifacts");
    let mut pipelines = vec![
        ("expansion", demo::template_pipeline(PipelineKind::Expansion)),
        ("fillblank", demo::template_pipeline(PipelineKind::Fillblank)),
    ];
    if let Some(url) = llm_url {
        let template = demo::template_pipeline(PipelineKind::Expansion);
        let gen: Arc<dyn Module> = Arc::new(demo::llm_generator("demo-llm-gen", GenStyle::Expansion, url, llm_model));
        let llm = Pipeline::new(
            "demo-llm-expansion",
            PipelineConfig::new(PipelineKind::Expansion),
            template.rec().clone(),
            gen,
            template.proc().cloned(),
        )?;
        pipelines.push(("llm-expansion", llm));
    }
    let mut entries = Vec::new();
    for (id, p) in &pipelines {
        save_pretrained(p, artifacts.join(p.name()))?;
        entries.push(PipelineEntry {
            id: id.to_string(),
            reference: format!("artifacts/{}", p.name()),
        });
    }
    let cfg = ServerConfig {
        hub_url: None,
        cache_dir: None,
        session_ttl_secs: crskit_server::config::DEFAULT_SESSION_TTL_SECS,
        pipelines: entries,
    };
    let path = out.join("crskit.toml");
    std::fs::write(&path, toml::to_string(&cfg)?)?;
    println!("wrote {} pipelines and {}", pipelines.len(), path.display());
    if llm_url.is_some() {
        println!("set {} for the prompted generator, or serve with --offline", demo::API_KEY_ENV);
    }
    Ok(())
}
