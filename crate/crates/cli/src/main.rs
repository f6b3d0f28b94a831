use std::io::{BufRead, BufReader, Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use peros_cli::engine::add_to_registry;
use peros_cli::{http, planner, Config, Gateway, HttpPlanner, LocalPlanner};
use peros_core::actuator::{revert, ExecutionJournal, Workspace};
use peros_core::storage::trace::{RANDOM_FIXTURE, SEQUENTIAL_FIXTURE, TIERING_INSTANCE};
use peros_core::storage::{generate, simulate_csv, SimConfig, Workload};

const LISTENING: &str = "peros listening on http://";

#[derive(Parser)]
#[command(name = "peros", version, about = "Natural-language operations over a sandboxed workspace")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArg {
    /// Gateway config file (TOML).
    #[arg(long, env = "PEROS_CONFIG")]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the HTTP gateway.
    Serve {
        #[command(flatten)]
        config: ConfigArg,
        /// Run the planner as a separate process reached over HTTP.
        #[arg(long)]
        split: bool,
        /// Overrides the configured listen address.
        #[arg(long)]
        listen: Option<SocketAddr>,
    },
    /// Evaluate the pipeline on a corpus and apply the retraining policy.
    Eval {
        /// `base`, `ext`, `all` or a corpus file.
        #[arg(long, default_value = "base")]
        corpus: String,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Replay an access trace through the storage simulator.
    Sim {
        #[arg(long)]
        trace: PathBuf,
        /// Simulator parameters (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Manage the operation registry.
    Registry {
        #[command(subcommand)]
        cmd: RegistryCmd,
    },
    /// Show an execution journal, optionally reverting it.
    Replay {
        #[arg(long)]
        journal: PathBuf,
        #[arg(long)]
        revert: bool,
    },
    /// Run a single component process.
    Component {
        #[command(subcommand)]
        cmd: ComponentCmd,
    },
    /// Access trace utilities.
    Trace {
        #[command(subcommand)]
        cmd: TraceCmd,
    },
}

#[derive(Subcommand)]
enum RegistryCmd {
    /// Register API specs from a JSON file (one object or an array).
    Add {
        file: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
}

#[derive(Subcommand)]
enum ComponentCmd {
    /// Interpreter and director behind the planner protocol.
    Planner {
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: SocketAddr,
        #[command(flatten)]
        config: ConfigArg,
        /// Exit when stdin closes, so the component dies with its parent.
        #[arg(long, hide = true)]
        exit_on_eof: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum WorkloadArg {
    Sequential,
    Random,
    ReadHeavy,
    WriteHeavy,
    Tiering,
}

impl WorkloadArg {
    fn workload(self) -> Workload {
        match self {
            WorkloadArg::Sequential => SEQUENTIAL_FIXTURE.0,
            WorkloadArg::Random => RANDOM_FIXTURE.0,
            WorkloadArg::ReadHeavy => Workload::read_heavy(),
            WorkloadArg::WriteHeavy => Workload::write_heavy(),
            WorkloadArg::Tiering => TIERING_INSTANCE,
        }
    }
}

#[derive(Subcommand)]
enum TraceCmd {
    /// Generate a synthetic trace as CSV.
    Gen {
        #[arg(long, value_enum)]
        workload: WorkloadArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).init();
    match Cli::parse().cmd {
        Cmd::Serve { config, split, listen } => serve(config.config.as_deref(), split, listen),
        Cmd::Eval { corpus, config } => {
            let gw = Gateway::local(Config::load(config.config.as_deref())?)?;
            let outcome = gw.run_eval(&corpus)?;
            println!("{}", serde_json::to_string_pretty(&outcome)?);
            Ok(())
        }
        Cmd::Sim { trace, config } => {
            let cfg: SimConfig = match config {
                Some(p) => toml::from_str(&std::fs::read_to_string(&p).with_context(|| p.display().to_string())?)?,
                None => SimConfig::default(),
            };
            let text = std::fs::read_to_string(&trace).with_context(|| trace.display().to_string())?;
            println!("{}", serde_json::to_string_pretty(&simulate_csv(&text, &cfg)?)?);
            Ok(())
        }
        Cmd::Registry { cmd: RegistryCmd::Add { file, config } } => {
            let cfg = Config::load(config.config.as_deref())?;
            let text = std::fs::read_to_string(&file).with_context(|| file.display().to_string())?;
            let reg = add_to_registry(&cfg.registry_path(), &text)?;
            println!("registry version {} ({})", reg.version(), cfg.registry_path().display());
            Ok(())
        }
        Cmd::Replay { journal, revert: undo } => replay(&journal, undo),
        Cmd::Component { cmd: ComponentCmd::Planner { listen, config, exit_on_eof } } => {
            let cfg = Config::load(config.config.as_deref())?;
            component(cfg, listen, exit_on_eof)
        }
        Cmd::Trace { cmd: TraceCmd::Gen { workload, seed, out } } => {
            let csv = generate(&workload.workload(), seed).to_csv();
            match out {
                Some(p) => std::fs::write(&p, csv).with_context(|| p.display().to_string())?,
                None => std::io::stdout().write_all(csv.as_bytes())?,
            }
            Ok(())
        }
    }
}

fn announce(addr: SocketAddr) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{LISTENING}{addr}")?;
    out.flush()?;
    Ok(())
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

/// Planner child process, killed when the gateway exits.
struct ChildGuard(Child);

impl Drop for ChildGuard {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn_planner(config: Option<&Path>) -> anyhow::Result<(ChildGuard, String)> {
    let mut cmd = Command::new(std::env::current_exe()?);
    cmd.args(["component", "planner", "--listen", "127.0.0.1:0", "--exit-on-eof"]);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::inherit());
    let mut child = ChildGuard(cmd.spawn().context("starting planner component")?);
    let stdout = child.0.stdout.take().expect("piped stdout");
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line)?;
    let Some(addr) = line.trim().strip_prefix(LISTENING) else {
        bail!("planner component did not report an address (got `{}`)", line.trim());
    };
    Ok((child, format!("http://{addr}")))
}

fn serve(config: Option<&Path>, split: bool, listen: Option<SocketAddr>) -> anyhow::Result<()> {
    let cfg = Config::load(config)?;
    let (child, gw) = if split {
        let (child, url) = spawn_planner(config)?;
        tracing::info!("planner component at {url}");
        let planner = Arc::new(HttpPlanner::new(url));
        (Some(child), Gateway::open(cfg, planner)?)
    } else {
        (None, Gateway::local(cfg)?)
    };
    let gw = Arc::new(gw);
    let addr = match listen {
        Some(a) => a,
        None => gw.config().listen.parse().with_context(|| format!("listen address `{}`", gw.config().listen))?,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        announce(listener.local_addr()?)?;
        let poller = http::spawn_poller(gw.clone());
        axum::serve(listener, http::router(gw)).with_graceful_shutdown(shutdown_signal()).await?;
        poller.abort();
        anyhow::Ok(())
    })?;
    drop(child);
    Ok(())
}

fn component(cfg: Config, listen: SocketAddr, exit_on_eof: bool) -> anyhow::Result<()> {
    let local = Arc::new(LocalPlanner::open(&cfg)?);
    if exit_on_eof {
        std::thread::spawn(|| {
            let mut sink = Vec::new();
            let _ = std::io::stdin().read_to_end(&mut sink);
            std::process::exit(0);
        });
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(listen).await?;
        announce(listener.local_addr()?)?;
        axum::serve(listener, planner::component_router(local)).with_graceful_shutdown(shutdown_signal()).await?;
        anyhow::Ok(())
    })
}

fn replay(path: &Path, undo: bool) -> anyhow::Result<()> {
    let mut journal = ExecutionJournal::load(path).with_context(|| path.display().to_string())?;
    println!("plan {} in {}", journal.plan_id, journal.root.display());
    for e in &journal.entries {
        println!("  step {} {} {:?} ({} ms)", e.step, e.api, e.outcome, e.finished_ms.saturating_sub(e.started_ms));
        for c in &e.changes {
            let mark = match (&c.before, &c.after) {
                (None, Some(_)) => "+",
                (Some(_), None) => "-",
                _ => "~",
            };
            println!("    {mark} {}", c.path);
        }
        if let Some(err) = &e.error {
            println!("    error: {err}");
        }
    }
    if journal.reverted {
        println!("reverted");
    } else if undo {
        let ws = Workspace::open(&journal.root)?;
        revert(&mut journal, &ws)?;
        println!("reverted now");
    }
    Ok(())
}
