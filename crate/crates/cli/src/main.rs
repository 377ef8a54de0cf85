use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use daes_client::{BatchState, Client};
use daes_core::acquisition::Strategy;
use daes_core::al_loop::{pretrain_encoder, Engine, PreparedData, SimulatedOracle};
use daes_core::api::{LabelEntry, LabelSubmission, Phase};
use daes_core::bandit::{compare_policies, LinearBanditEnv};
use daes_core::config::{load_config, ExperimentConfig, OracleMode};
use daes_core::ensemble::{EnsembleMode, RetrainMode};
use daes_core::metrics::{append_jsonl, read_jsonl, summarize, write_summary_csv};
use daes_service::{AppState, Settings};

#[derive(Parser)]
#[command(name = "daes", version, about = "Deep active ensemble sampling experiments and annotation service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulated-oracle experiment and append its metrics.
    Run(RunArgs),
    /// Compare exact Thompson sampling with ensemble sampling on the benchmark bandit.
    Bandit(BanditArgs),
    /// Pretrain and save a frozen encoder.
    SslPretrain(SslArgs),
    /// Serve the annotation API.
    Serve(ServeArgs),
    /// Summarize metrics files across seeds.
    Report(ReportArgs),
    /// Talk to a running annotation service.
    #[command(subcommand)]
    Session(SessionCommand),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    ensemble_size: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<EnsembleMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long, value_parser = parse_retrain)]
    retrain_mode: Option<RetrainMode>,
    /// Metrics file (JSON lines, appended).
    #[arg(long, default_value = "metrics.jsonl")]
    metrics: PathBuf,
    /// Save state here after every step and resume from it if present.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct BanditArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 30)]
    ensemble_size: usize,
    #[arg(long, default_value = "regret.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct SslArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "encoder.ckpt")]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    /// Experiment config to open as a session at startup.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "DAES_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "DAES_HOST", default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    #[arg(long, env = "DAES_CHECKPOINT_DIR")]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long, env = "DAES_STATIC_DIR")]
    static_dir: Option<PathBuf>,
    /// Base for relative dataset paths.
    #[arg(long, env = "DAES_DATA_ROOT", default_value = ".")]
    data_root: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    metrics: Vec<PathBuf>,
    #[arg(long, default_value = "summary.csv")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum SessionCommand {
    /// Start a session from a config file; prints the session id.
    Create {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "DAES_SERVER", default_value = "http://127.0.0.1:8080")]
        server: String,
    },
    Status {
        id: String,
        #[arg(long, env = "DAES_SERVER", default_value = "http://127.0.0.1:8080")]
        server: String,
    },
    /// Print the outstanding batch without images.
    Batch {
        id: String,
        #[arg(long, env = "DAES_SERVER", default_value = "http://127.0.0.1:8080")]
        server: String,
    },
    /// Submit labels given as `index=label` pairs for the outstanding batch.
    Label {
        id: String,
        #[arg(long)]
        batch_id: String,
        #[arg(required = true, value_parser = parse_pair)]
        labels: Vec<(usize, usize)>,
        #[arg(long, env = "DAES_SERVER", default_value = "http://127.0.0.1:8080")]
        server: String,
    },
}

fn parse_mode(s: &str) -> Result<EnsembleMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .map_err(|_| "expected shared_prior_joint or independent_classical".to_owned())
}

fn parse_retrain(s: &str) -> Result<RetrainMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|_| "expected scratch or incremental".to_owned())
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (i, l) = s.split_once('=').ok_or("expected index=label")?;
    Ok((
        i.trim().parse().map_err(|e| format!("index: {e}"))?,
        l.trim().parse().map_err(|e| format!("label: {e}"))?,
    ))
}

fn config_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    load_config(path).with_context(|| format!("loading {}", path.display()))
}

fn run(args: RunArgs) -> Result<()> {
    let mut config = load(&args.config)?;
    if let Some(s) = args.strategy {
        config.strategy = s;
    }
    if let Some(m) = args.ensemble_size {
        config.model.ensemble_size = m;
    }
    if let Some(m) = args.mode {
        config.model.mode = m;
    }
    if let Some(e) = args.epochs {
        config.model.epochs = e;
    }
    if let Some(r) = args.rounds {
        config.schedule.rounds = r;
    }
    if let Some(r) = args.retrain_mode {
        config.schedule.retrain_mode = r;
    }
    config.oracle = OracleMode::Simulated;
    config.validate()?;
    let dataset = config.dataset.load(Some(&config_base(&args.config)))?;
    let truth = dataset.train_y.clone();
    let mut engine = match &args.checkpoint {
        Some(dir) if dir.join("engine.json").exists() => {
            eprintln!("resuming from {}", dir.display());
            Engine::resume(dir, dataset)?
        }
        _ => {
            let data = PreparedData::prepare(dataset, config.ssl.as_ref(), args.seed)?;
            Engine::new(config, Arc::new(data), args.seed)?
        }
    };
    let mut oracle = SimulatedOracle { labels: &truth };
    let mut written = engine.metrics().len();
    loop {
        match engine.phase() {
            Phase::Training => {
                engine.advance()?;
                let new = &engine.metrics()[written..];
                for r in new {
                    eprintln!("round {:>2}  labeled {:>5}  accuracy {:.4}", r.round, r.labeled, r.accuracy);
                }
                append_jsonl(&args.metrics, new)?;
                written = engine.metrics().len();
            }
            Phase::AwaitingLabels => {
                let batch = engine.pending().expect("pending batch").clone();
                let labels = daes_core::al_loop::Oracle::label(&mut oracle, &batch.indices)?;
                let pairs: Vec<(usize, usize)> = batch.indices.iter().copied().zip(labels).collect();
                engine.ingest(&batch.id, &pairs)?;
            }
            Phase::Finished => break,
        }
        if let Some(dir) = &args.checkpoint {
            engine.save(dir)?;
        }
    }
    Ok(())
}

fn bandit(args: BanditArgs) -> Result<()> {
    if args.seeds == 0 || args.steps == 0 {
        bail!("--seeds and --steps must be positive");
    }
    let env = LinearBanditEnv::benchmark();
    let mut writer = csv::Writer::from_path(&args.out)?;
    let ens_col = format!("regret_ensemble_{}", args.ensemble_size);
    writer.write_record(["seed", "t", "regret_exact_ts", ens_col.as_str()])?;
    let mut mean_ts = vec![0.0; args.steps];
    let mut mean_es = vec![0.0; args.steps];
    for seed in 0..args.seeds {
        let (ts, es) = compare_policies(&env, args.ensemble_size, args.steps, seed)?;
        for t in 0..args.steps {
            writer.write_record([seed.to_string(), (t + 1).to_string(), ts[t].to_string(), es[t].to_string()])?;
            mean_ts[t] += ts[t] / args.seeds as f64;
            mean_es[t] += es[t] / args.seeds as f64;
        }
    }
    for t in 0..args.steps {
        writer.write_record(["mean".to_owned(), (t + 1).to_string(), mean_ts[t].to_string(), mean_es[t].to_string()])?;
    }
    writer.flush()?;
    let last = args.steps - 1;
    eprintln!(
        "mean cumulative regret at t={}: exact TS {:.3}, ensemble(M={}) {:.3}",
        args.steps, mean_ts[last], args.ensemble_size, mean_es[last]
    );
    Ok(())
}

fn ssl_pretrain(args: SslArgs) -> Result<()> {
    let config = load(&args.config)?;
    let ssl = config.ssl.clone().context("config has no \"ssl\" section")?;
    let dataset = config.dataset.load(Some(&config_base(&args.config)))?;
    let (encoder, report) = pretrain_encoder(&dataset, &ssl, args.seed)?;
    encoder.save(&args.out)?;
    eprintln!(
        "held-out loss {:.4} -> {:.4}; encoder saved to {}",
        report.initial_holdout_loss,
        report.final_holdout_loss,
        args.out.display()
    );
    Ok(())
}

async fn serve(args: ServeArgs) -> Result<()> {
    let state = AppState::new(Settings {
        data_root: args.data_root,
        checkpoint_dir: args.checkpoint_dir,
        static_dir: args.static_dir,
    });
    let restored = state.restore().await?;
    if restored > 0 {
        tracing::info!("restored {restored} sessions");
    }
    let addr = SocketAddr::new(args.host, args.port);
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    let local = listener.local_addr()?;
    tracing::info!("listening on http://{local}");
    if let Some(path) = args.config {
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let client = Client::new(format!("http://{local}"));
        let server = tokio::spawn(daes_service::serve(listener, state));
        let created = client.create_session(&text).await?;
        println!("{}", created.id);
        server.await??;
    } else {
        daes_service::serve(listener, state).await?;
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let mut records = Vec::new();
    for path in &args.metrics {
        records.extend(read_jsonl(path).with_context(|| format!("reading {}", path.display()))?);
    }
    let rows = summarize(&records);
    write_summary_csv(&args.out, &rows)?;
    println!("round  labeled_fraction  accuracy_mean  accuracy_std");
    for r in &rows {
        println!(
            "{:>5}  {:>16.4}  {:>13.4}  {:>12.4}",
            r.round, r.labeled_fraction, r.accuracy_mean, r.accuracy_std
        );
    }
    Ok(())
}

async fn session(command: SessionCommand) -> Result<()> {
    match command {
        SessionCommand::Create { config, server } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let created = Client::new(server).create_session(&text).await?;
            println!("{}", created.id);
        }
        SessionCommand::Status { id, server } => {
            let status = Client::new(server).status(&id).await?;
            println!("{}", serde_json::to_string_pretty(&status)?);
        }
        SessionCommand::Batch { id, server } => match Client::new(server).batch(&id).await? {
            BatchState::Ready(batch) => {
                println!("batch {} (round {})", batch.batch_id, batch.round);
                for item in &batch.items {
                    println!("{:>7}  {:.6}", item.index, item.score);
                }
            }
            BatchState::Training => println!("training; try again shortly"),
            BatchState::Finished => println!("finished"),
        },
        SessionCommand::Label {
            id,
            batch_id,
            labels,
            server,
        } => {
            let submission = LabelSubmission {
                batch_id,
                labels: labels.into_iter().map(|(index, label)| LabelEntry { index, label }).collect(),
            };
            let summary = Client::new(server).submit(&id, &submission).await?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Run(args) => tokio::task::spawn_blocking(move || run(args)).await?,
        Command::Bandit(args) => bandit(args),
        Command::SslPretrain(args) => tokio::task::spawn_blocking(move || ssl_pretrain(args)).await?,
        Command::Serve(args) => serve(args).await,
        Command::Report(args) => report(args),
        Command::Session(command) => session(command).await,
    }
}
