use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use aserv::commands::{self, Target};
use aserv::config::{Config, CONFIG_ENV};
use aserv::queries::QueryRequest;

#[derive(Parser)]
#[command(name = "aserv", version, about = "Scientific event ingestion and analysis")]
struct Cli {
    /// Config file (TOML). Falls back to $ASERV_CONFIG, then defaults.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, ingest, and serve the API; prints one line per cycle.
    Run {
        #[arg(long)]
        cycles: Option<u64>,
        #[arg(long)]
        bind: Option<String>,
        /// Keep serving after the last cycle until interrupted.
        #[arg(long)]
        linger: bool,
    },
    /// Write catalog and Eset files only.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cycles: Option<u64>,
        /// Write the small hand-made night instead of a generated one.
        #[arg(long)]
        fixture: bool,
    },
    /// Run one query against a running instance or a data directory.
    Query {
        #[command(subcommand)]
        kind: QueryKind,
    },
    /// Fit the overhead line from training data and predict latencies.
    Fit {
        #[arg(long)]
        training: Option<PathBuf>,
        #[arg(long, default_value_t = 19)]
        k: u32,
        #[arg(long)]
        ct: Option<f64>,
        /// Also time each workload on 1/k of the configured night.
        #[arg(long)]
        measure: bool,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Ingest a night unpaced and print latency and accuracy summaries.
    Report {
        #[arg(long, default_value_t = 100)]
        queries: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct Source {
    /// Base URL of a running instance.
    #[arg(long, conflicts_with = "data_dir")]
    url: Option<String>,
    /// Directory of catalog and Eset files to ingest first.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct Window {
    #[arg(long)]
    ts: u64,
    #[arg(long)]
    te: u64,
    #[arg(long, allow_hyphen_values = true)]
    x: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    y: Option<f64>,
    #[arg(long)]
    r: Option<f64>,
}

#[derive(Subcommand)]
enum QueryKind {
    Probe {
        #[command(flatten)]
        window: Window,
        #[command(flatten)]
        source: Source,
    },
    List {
        #[command(flatten)]
        window: Window,
        #[command(flatten)]
        source: Source,
    },
    Stretch {
        #[arg(long)]
        eid: String,
        #[arg(long, default_value_t = 0)]
        dt1: u64,
        #[arg(long, default_value_t = 0)]
        dt2: u64,
        #[command(flatten)]
        source: Source,
    },
    Accuracy {
        #[command(flatten)]
        window: Window,
        #[command(flatten)]
        source: Source,
    },
}

fn window_params(w: &Window) -> BTreeMap<String, String> {
    let mut p = BTreeMap::new();
    p.insert("ts".into(), w.ts.to_string());
    p.insert("te".into(), w.te.to_string());
    for (k, v) in [("x", w.x), ("y", w.y), ("r", w.r)] {
        if let Some(v) = v {
            p.insert(k.into(), v.to_string());
        }
    }
    p
}

fn run_query(cfg: &Config, kind: QueryKind) -> anyhow::Result<()> {
    let (name, params, source) = match kind {
        QueryKind::Probe { window, source } => ("probe", window_params(&window), source),
        QueryKind::List { window, source } => ("list", window_params(&window), source),
        QueryKind::Accuracy { window, source } => ("accuracy", window_params(&window), source),
        QueryKind::Stretch { eid, dt1, dt2, source } => {
            let p = [("eid", eid), ("dt1", dt1.to_string()), ("dt2", dt2.to_string())]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect();
            ("stretch", p, source)
        }
    };
    let req = QueryRequest::from_params(name, &params).map_err(|e| anyhow::anyhow!("{e}"))?;
    let target = match (&source.url, &source.data_dir) {
        (Some(url), _) => Target::Url(url),
        (None, Some(dir)) => Target::DataDir(dir),
        (None, None) => anyhow::bail!("give --url or --data-dir"),
    };
    println!("{}", commands::query(cfg, target, &req)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Run { cycles, bind, linger } => {
            if let Some(b) = bind {
                cfg.bind = b;
            }
            let cycles = cycles.unwrap_or(cfg.gen.cycles);
            tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?
                .block_on(commands::run(cfg, cycles, linger, std::io::stdout()))
        }
        Command::Gen { out, cycles, fixture } => {
            let n = commands::generate(&cfg, &out, cycles, fixture)?;
            println!("wrote {n} cycles to {}", out.display());
            Ok(())
        }
        Command::Query { kind } => run_query(&cfg, kind),
        Command::Fit { training, k, ct, measure, reps } => {
            let ct = ct.unwrap_or(cfg.gen.ct);
            if let Some(path) = training {
                for line in commands::fit(&path, k, ct)? {
                    println!("{line}");
                }
            }
            if measure {
                let m = commands::measure(&cfg, k, reps).context("measuring")?;
                println!("{}", serde_json::to_string(&m)?);
            }
            Ok(())
        }
        Command::Report { queries, seed } => {
            let report = commands::report(&cfg, queries, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}
