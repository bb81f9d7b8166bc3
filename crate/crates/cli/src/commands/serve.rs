use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::Args;
use prefqrels_core::tasking::{read_tasks, ExclusionList};
use prefqrels_service::{approval_qualification, Service, ServiceConfig, SystemClock};

use crate::artifact::{self, Ctx};

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "PREFQRELS_TASKS")]
    pub tasks: PathBuf,
    #[arg(long, env = "PREFQRELS_LOG")]
    pub log: PathBuf,
    #[arg(long, env = "PREFQRELS_EXCLUSIONS")]
    pub exclusions: PathBuf,
    #[arg(long, env = "PREFQRELS_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "PREFQRELS_PORT", default_value_t = 8080)]
    pub port: u16,
    /// Idle minutes before a session's task returns to the queue.
    #[arg(long, env = "PREFQRELS_TIMEOUT_MINUTES", default_value_t = 60)]
    pub timeout_minutes: u64,
    #[arg(long, default_value_t = 1)]
    pub replicas: u32,
    /// Minimum approval rate; enables qualification screening.
    #[arg(long)]
    pub min_approval: Option<f64>,
    /// Accepted locales (with --min-approval).
    #[arg(long, num_args = 1.., requires = "min_approval")]
    pub locale: Vec<String>,
    /// Allow cross-origin requests from any origin.
    #[arg(long)]
    pub cors: bool,
}

pub fn serve(_ctx: &Ctx, a: ServeArgs) -> Result<()> {
    let tasks = read_tasks(artifact::open(&a.tasks)?, &a.tasks.display().to_string())?;
    let log = artifact::open_log(&a.log, a.replicas)?;
    let exclusions =
        ExclusionList::load(&a.exclusions).with_context(|| format!("reading {}", a.exclusions.display()))?;
    let config = ServiceConfig {
        session_timeout: a.timeout_minutes * 60,
        qualification: a.min_approval.map(|r| approval_qualification(r, a.locale.clone())),
    };
    let service = Arc::new(Service::new(tasks, log, exclusions, Arc::new(SystemClock), config));
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .with_context(|| format!("bad listen address {}:{}", a.host, a.port))?;

    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        let p = service.progress();
        eprintln!(
            "listening on {addr}: {} tasks queued of {}",
            p.tasks_queued, p.tasks_total
        );
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        prefqrels_service::serve(listener, service, a.cors, shutdown).await?;
        Ok(())
    })
}
