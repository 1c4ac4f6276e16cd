use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fiberctl::config::Config;
use fiberctl::planner::{coverage, plan_scan_with, PlanOptions, DEFAULT_COVERAGE_RESOLUTION};
use fiberctl::scenario::{parse_telemetry, run_scenario, spots_from_telemetry, Scenario};
use fiberctl::twin::Scene;

#[derive(Parser)]
#[command(name = "twin", about = "Run, score and replay digital-twin scenarios")]
struct Cli {
    /// Device configuration (TOML); defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario and write telemetry.jsonl, summary.json and scene.json.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario seed (as does FIBERCTL_SEED).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute lesion coverage from a telemetry log.
    Coverage {
        #[arg(long)]
        log: PathBuf,
        /// Scene file (JSON or TOML); defaults to scene.json next to the log.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Print a telemetry log paced in simulated time.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Simulated seconds per wall-clock second; 0 prints at once.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
    /// Plan a scan for the lesion of a scene and print it as JSON.
    Plan {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        overlap: Option<f64>,
    },
}

fn load_config(path: Option<&Path>) -> Result<Option<Config>> {
    let Some(path) = path else { return Ok(None) };
    let (cfg, warnings) = Config::load(path).with_context(|| format!("loading {}", path.display()))?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(Some(cfg))
}

fn load_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let scene = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        Scene::from_toml_str(&text)?
    };
    Ok(scene)
}

fn main() -> Result<()> {
    env_logger::init();
    let cli = Cli::parse();
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Run { scenario, out, seed } => {
            let mut s = Scenario::load(&scenario).with_context(|| format!("loading {}", scenario.display()))?;
            if let Some(c) = config {
                s.config = c;
            }
            if let Ok(v) = std::env::var("FIBERCTL_SEED") {
                s.seed = v.parse().context("FIBERCTL_SEED must be an unsigned integer")?;
            }
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let run = run_scenario(&s)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("telemetry.jsonl"), run.telemetry_jsonl())?;
            std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&run.summary)? + "\n")?;
            std::fs::write(out.join("scene.json"), serde_json::to_string_pretty(&s.scene)? + "\n")?;
            if let Some(plan) = &run.plan {
                std::fs::write(out.join("plan.json"), plan.to_json() + "\n")?;
            }
            println!("{}", serde_json::to_string_pretty(&run.summary)?);
        }
        Command::Coverage { log, scene } => {
            let cfg = config.unwrap_or_default();
            let text = std::fs::read_to_string(&log).with_context(|| format!("reading {}", log.display()))?;
            let records = parse_telemetry(&text).map_err(|(line, e)| anyhow::anyhow!("{}:{line}: {e}", log.display()))?;
            let scene_path = scene.unwrap_or_else(|| log.with_file_name("scene.json"));
            let scene = load_scene(&scene_path)?;
            let Some(lesion) = scene.lesion else {
                bail!("{} has no lesion", scene_path.display());
            };
            let spots = spots_from_telemetry(&records, &cfg);
            let c = coverage(&lesion, &spots, DEFAULT_COVERAGE_RESOLUTION);
            println!("{}", serde_json::json!({ "coverage": c, "spots": spots.len(), "ticks": records.len() }));
        }
        Command::Replay { log, speed } => {
            let text = std::fs::read_to_string(&log).with_context(|| format!("reading {}", log.display()))?;
            let records = parse_telemetry(&text).map_err(|(line, e)| anyhow::anyhow!("{}:{line}: {e}", log.display()))?;
            let start = Instant::now();
            let t0 = records.first().map_or(0.0, |r| r.t);
            let mut out = std::io::stdout().lock();
            for r in &records {
                if speed > 0.0 {
                    let due = Duration::from_secs_f64((r.t - t0).max(0.0) / speed);
                    if let Some(wait) = due.checked_sub(start.elapsed()) {
                        std::thread::sleep(wait);
                    }
                }
                // a closed pipe ends the replay quietly
                if writeln!(out, "{}", r.to_json_line()).and_then(|_| out.flush()).is_err() {
                    break;
                }
            }
        }
        Command::Plan { scene, overlap } => {
            let cfg = config.unwrap_or_default();
            let scene = load_scene(&scene)?;
            let Some(lesion) = scene.lesion else { bail!("scene has no lesion") };
            let mut options = PlanOptions::default();
            if let Some(o) = overlap {
                options.tile_overlap = o;
            }
            println!("{}", plan_scan_with(&lesion, &cfg, &options)?.to_json());
        }
    }
    Ok(())
}
