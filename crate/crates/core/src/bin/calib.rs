use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fiberctl::calibration::{
    check_linearity, fit_alpha_with_range, fit_svg, fit_tendon, track_red_dot, CharacterizationKind,
    CharacterizationSet, TrackerConfig,
};
use fiberctl::config::{Config, LINEAR_POWER_LIMIT_W};

#[derive(Parser)]
#[command(name = "calib", about = "Fit model constants and track the red dot")]
struct Cli {
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Thermal,
    Tendon,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a characterization CSV and print the report as JSON.
    Fit {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        /// Upper input of the linear range (thermal fits).
        #[arg(long, default_value_t = LINEAR_POWER_LIMIT_W)]
        range_end: f64,
        /// Also write a displacement-versus-input plot.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Locate the red dot in a PNG frame.
    Track {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 128)]
        r_min: u8,
        #[arg(long, default_value_t = 50)]
        margin: u8,
    },
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
        Command::Fit { csv, kind, range_end, svg } => {
            let kind = match kind {
                Kind::Thermal => CharacterizationKind::ThermalPower,
                Kind::Tendon => CharacterizationKind::TendonPull,
            };
            let set = CharacterizationSet::load(kind, &csv)?;
            let report = match kind {
                CharacterizationKind::ThermalPower => fit_alpha_with_range(&set, range_end)?,
                CharacterizationKind::TendonPull => fit_tendon(&set, &config.geometry)?,
            };
            let linear_end = match kind {
                CharacterizationKind::ThermalPower => range_end,
                CharacterizationKind::TendonPull => f64::INFINITY,
            };
            let linearity = check_linearity(&set, linear_end).ok();
            if let Some(path) = svg {
                std::fs::write(&path, fit_svg(&set, &report, &config.geometry))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            let out = serde_json::json!({ "report": report, "linearity": linearity });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Track { image, r_min, margin } => {
            let frame = image::open(&image)
                .with_context(|| format!("reading {}", image.display()))?
                .to_rgb8();
            let found = track_red_dot(&frame, &TrackerConfig { r_min, margin });
            println!("{}", serde_json::json!({ "found": found.is_some(), "centroid": found }));
        }
    }
    Ok(())
}
