use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fiberctl::config::Config;
use fiberctl::teleop::{mode_table_json, replay_session, serve, ServeOptions, SessionParams};
use fiberctl::thermal::ActuationNoise;
use fiberctl::twin::{Scene, DEFAULT_DT};

#[derive(Parser)]
#[command(name = "teleop", about = "Telemanipulation server for the digital twin")]
struct Cli {
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the newline-delimited JSON protocol over TCP.
    Serve {
        /// Scene file (TOML).
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long, default_value_t = 7878)]
        port: u16,
        /// Directory for session.jsonl and telemetry.jsonl.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Seed of the actuation noise (FIBERCTL_SEED also sets it).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0.0)]
        noise_sigma_mm: f64,
        #[arg(long, default_value_t = DEFAULT_DT)]
        dt: f64,
        /// Simulated seconds per wall-clock second; 0 runs unthrottled.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        #[arg(long)]
        max_ticks: Option<u64>,
    },
    /// Re-run a recorded session and print its telemetry.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Write telemetry here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the mode table fixture.
    Table,
}

fn main() -> Result<()> {
    env_logger::init();
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(p) => {
            let (c, warnings) = Config::load(p).with_context(|| format!("loading {}", p.display()))?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            c
        }
        None => Config::default(),
    };
    match cli.command {
        Command::Serve {
            scene,
            bind,
            port,
            log,
            seed,
            noise_sigma_mm,
            dt,
            speed,
            max_ticks,
        } => {
            let scene = match scene {
                Some(p) => Scene::load(&p).with_context(|| format!("loading {}", p.display()))?,
                None => Scene::default(),
            };
            let env_seed = std::env::var("FIBERCTL_SEED").ok().map(|v| v.parse::<u64>()).transpose()?;
            let opts = ServeOptions {
                bind: SocketAddr::new(bind.parse().context("bind address")?, port),
                params: SessionParams {
                    seed: seed.or(env_seed).unwrap_or(0),
                    dt,
                    noise: ActuationNoise { sigma: noise_sigma_mm },
                },
                speed,
                max_ticks,
                log_dir: log,
            };
            let handle = serve(config, scene, opts)?;
            eprintln!("listening on {}", handle.local_addr());
            let summary = handle.join()?;
            eprintln!("stopped after {} ticks in {:?}", summary.ticks, summary.final_mode);
        }
        Command::Replay { log, out } => {
            let text = std::fs::read_to_string(&log).with_context(|| format!("reading {}", log.display()))?;
            let replay = replay_session(&text)?;
            match out {
                Some(p) => std::fs::write(&p, replay.telemetry_jsonl())?,
                None => print!("{}", replay.telemetry_jsonl()),
            }
        }
        Command::Table => print!("{}", mode_table_json()),
    }
    Ok(())
}
