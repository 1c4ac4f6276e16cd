//! Scripted runs of the twin: plan a lesion, execute the plan, optionally
//! fill the gaps, and summarise.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::Spanned;

use crate::config::{Config, ConfigError};
use crate::planner::{
    coverage, plan_scan_with, swingback_path, swingback_steps, Lesion, PlanError, PlanOptions, PlanStep, ScanPlan, Spot,
    DEFAULT_COVERAGE_RESOLUTION, DEFAULT_STROKE_SPEED, DEFAULT_TILE_OVERLAP,
};
use crate::teleop::{replay_session, ReplayError, Session, SessionParams};
use crate::thermal::ActuationNoise;
use crate::twin::{pass_color, Scene, SessionMode, TelemetryRecord, TwinError, DEFAULT_DT, MAX_DT};

/// Default cap on simulated time, s.
pub const DEFAULT_MAX_TIME_S: f64 = 50_000.0;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("failed to read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("line {line}: `{field}` {reason}")]
    Invalid { line: usize, field: &'static str, reason: String },
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("plan: {0}")]
    Plan(#[from] PlanError),
    #[error("recording: {0}")]
    Replay(#[from] ReplayError),
    #[error("twin fault at t = {t:.2} s: {source}")]
    Twin { t: f64, source: TwinError },
    #[error("step {step} rejected: {reason}")]
    Rejected { step: usize, reason: String },
    #[error("simulated time exceeded {0} s")]
    Timeout(f64),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDocument {
    name: String,
    #[serde(default)]
    seed: u64,
    dt_s: Option<Spanned<f64>>,
    noise_sigma_mm: Option<Spanned<f64>>,
    #[serde(default)]
    insertion_depth_mm: Option<Spanned<f64>>,
    max_time_s: Option<Spanned<f64>>,
    config: Option<String>,
    recording: Option<String>,
    scene: Option<Spanned<SceneDocument>>,
    plan: Option<Spanned<PlanDocument>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDocument {
    target_plane_z_mm: Spanned<f64>,
    lesion: Option<Lesion>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanDocument {
    tile_overlap: Option<Spanned<f64>>,
    pitch_mm: Option<Spanned<f64>>,
    speed_mm_s: Option<Spanned<f64>>,
    #[serde(default)]
    swingback: bool,
}

/// What a scenario executes.
#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioSource {
    /// Nothing; the log stays empty.
    Empty,
    Plan { options: PlanOptions, swingback: bool },
    /// A recorded session log, as text.
    Recording(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub dt: f64,
    pub noise: ActuationNoise,
    pub insertion_depth: f64,
    pub max_time: f64,
    pub config: Config,
    pub scene: Scene,
    pub source: ScenarioSource,
}

fn line_of(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

impl Scenario {
    /// Parses a scenario. Relative `config` and `recording` paths resolve
    /// against `base_dir`.
    pub fn from_toml_str(source: &str, base_dir: &Path) -> Result<Scenario, ScenarioError> {
        let doc: ScenarioDocument = toml::from_str(source)?;
        let invalid = |span: std::ops::Range<usize>, field: &'static str, reason: &str| ScenarioError::Invalid {
            line: line_of(source, span.start),
            field,
            reason: reason.to_string(),
        };
        let read = |rel: &str| -> Result<String, ScenarioError> {
            let path = base_dir.join(rel);
            std::fs::read_to_string(&path).map_err(|source| ScenarioError::Io { path, source })
        };

        let config = match &doc.config {
            Some(rel) => Config::from_toml_str(&read(rel)?)?.0,
            None => Config::default(),
        };

        let dt = match &doc.dt_s {
            Some(s) if !(*s.get_ref() > 0.0 && *s.get_ref() <= MAX_DT) => {
                return Err(invalid(s.span(), "dt_s", &format!("must be in (0, {MAX_DT}]")));
            }
            Some(s) => *s.get_ref(),
            None => DEFAULT_DT,
        };
        let sigma = match &doc.noise_sigma_mm {
            Some(s) if !(*s.get_ref() >= 0.0 && s.get_ref().is_finite()) => {
                return Err(invalid(s.span(), "noise_sigma_mm", "must be >= 0"));
            }
            Some(s) => *s.get_ref(),
            None => 0.0,
        };
        let max_time = match &doc.max_time_s {
            Some(s) if !(*s.get_ref() > 0.0) => return Err(invalid(s.span(), "max_time_s", "must be > 0")),
            Some(s) => *s.get_ref(),
            None => DEFAULT_MAX_TIME_S,
        };

        let scene = match doc.scene {
            Some(s) => {
                let span = s.span();
                let s = s.into_inner();
                let z = *s.target_plane_z_mm.get_ref();
                if !(z > 0.0 && z.is_finite()) {
                    return Err(invalid(s.target_plane_z_mm.span(), "target_plane_z_mm", "must be > 0"));
                }
                if doc.plan.is_some() && s.lesion.is_none() {
                    return Err(invalid(span, "lesion", "is required when a plan is given"));
                }
                Scene {
                    target_plane_z: z,
                    lesion: s.lesion,
                }
            }
            None => Scene::default(),
        };

        let insertion_depth = match &doc.insertion_depth_mm {
            Some(s) if !(*s.get_ref() >= 0.0 && *s.get_ref() < scene.target_plane_z) => {
                return Err(invalid(s.span(), "insertion_depth_mm", "must be in [0, target_plane_z_mm)"));
            }
            Some(s) => *s.get_ref(),
            None => 0.0,
        };

        let source_kind = match (doc.plan, &doc.recording) {
            (Some(p), Some(_)) => return Err(invalid(p.span(), "plan", "cannot be combined with `recording`")),
            (None, Some(rel)) => ScenarioSource::Recording(read(rel)?),
            (Some(p), None) => {
                let p = p.into_inner();
                let mut options = PlanOptions {
                    tile_overlap: DEFAULT_TILE_OVERLAP,
                    pitch: None,
                    speed: DEFAULT_STROKE_SPEED,
                };
                if let Some(o) = &p.tile_overlap {
                    if !(*o.get_ref() > -1.0 && *o.get_ref() < 1.0) {
                        return Err(invalid(o.span(), "tile_overlap", "must be in (-1, 1)"));
                    }
                    options.tile_overlap = *o.get_ref();
                }
                if let Some(v) = &p.pitch_mm {
                    if !(*v.get_ref() > 0.0) {
                        return Err(invalid(v.span(), "pitch_mm", "must be > 0"));
                    }
                    options.pitch = Some(*v.get_ref());
                }
                if let Some(v) = &p.speed_mm_s {
                    if !(*v.get_ref() > 0.0) {
                        return Err(invalid(v.span(), "speed_mm_s", "must be > 0"));
                    }
                    options.speed = *v.get_ref();
                }
                ScenarioSource::Plan {
                    options,
                    swingback: p.swingback,
                }
            }
            (None, None) => ScenarioSource::Empty,
        };

        Ok(Scenario {
            name: doc.name,
            seed: doc.seed,
            dt,
            noise: ActuationNoise { sigma },
            insertion_depth,
            max_time,
            config,
            scene,
            source: source_kind,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassSummary {
    pub index: u32,
    pub color: String,
    pub spots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub seed: u64,
    pub ticks: usize,
    pub simulated_time_s: f64,
    pub poses: usize,
    pub passes: Vec<PassSummary>,
    /// `None` without a lesion.
    pub coverage: Option<f64>,
    pub coverage_before_swingback: Option<f64>,
    pub max_peak_temperature_c: f64,
    pub max_channel_power_w: f64,
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub telemetry: Vec<TelemetryRecord>,
    pub summary: Summary,
    pub plan: Option<ScanPlan>,
    pub spots: Vec<Spot>,
}

impl ScenarioRun {
    pub fn telemetry_jsonl(&self) -> String {
        crate::teleop::telemetry_jsonl(&self.telemetry)
    }
}

struct Runner {
    session: Session,
    telemetry: Vec<TelemetryRecord>,
    max_time: f64,
}

impl Runner {
    fn run_until_settled(&mut self) -> Result<(), ScenarioError> {
        while self.session.mode() != SessionMode::Settled {
            let rec = self.session.step().map_err(|source| ScenarioError::Twin {
                t: self.session.twin().state().t,
                source,
            })?;
            if rec.t > self.max_time {
                return Err(ScenarioError::Timeout(self.max_time));
            }
            self.telemetry.push(rec);
        }
        Ok(())
    }

    fn execute(&mut self, steps: &[PlanStep], offset: usize) -> Result<(), ScenarioError> {
        for (i, step) in steps.iter().enumerate() {
            let rejected = |r: crate::teleop::Rejection| ScenarioError::Rejected {
                step: offset + i,
                reason: r.to_string(),
            };
            match step {
                PlanStep::OffTransit { coarse_target } => {
                    self.session.goto(*coarse_target).map_err(rejected)?;
                }
                PlanStep::OnScan { raster, .. } => {
                    self.session.start_raster(raster.clone(), true).map_err(rejected)?;
                }
            }
            self.run_until_settled()?;
        }
        Ok(())
    }
}

/// Runs a scenario to completion.
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioRun, ScenarioError> {
    let params = SessionParams {
        seed: scenario.seed,
        dt: scenario.dt,
        noise: scenario.noise,
    };
    let mut plan = None;
    let mut before = None;
    let (session, telemetry) = match &scenario.source {
        ScenarioSource::Recording(text) => {
            let replay = replay_session(text)?;
            (replay.session, replay.telemetry)
        }
        ScenarioSource::Empty | ScenarioSource::Plan { .. } => {
            let session = Session::new(scenario.config, scenario.scene.clone(), params)
                .map_err(|source| ScenarioError::Twin { t: 0.0, source })?;
            let mut runner = Runner {
                session,
                telemetry: Vec::new(),
                max_time: scenario.max_time,
            };
            if let ScenarioSource::Plan { options, swingback } = &scenario.source {
                let lesion = scenario.scene.lesion.as_ref().expect("validated on load");
                let p = plan_scan_with(lesion, &scenario.config, options)?;
                let insert = crate::teleop::ClientMessage::new(
                    1,
                    crate::teleop::ClientBody::Insert {
                        depth_mm: scenario.insertion_depth,
                    },
                );
                if let Some(crate::teleop::ServerBody::Error { detail, .. }) =
                    runner.session.handle_message(&insert).into_iter().find(|b| b.is_error())
                {
                    return Err(ScenarioError::Rejected { step: 0, reason: detail });
                }
                runner.execute(&p.steps, 0)?;
                let mut p = p;
                if *swingback {
                    let spots = &runner.session.twin().state().stamped_spots;
                    before = Some(coverage(lesion, spots, DEFAULT_COVERAGE_RESOLUTION));
                    let path = swingback_path(spots, lesion, &scenario.config.spot);
                    if !path.is_empty() {
                        let steps = swingback_steps(&path, &scenario.config);
                        runner.execute(&steps, p.steps.len())?;
                        p.swingback = Some(path);
                    }
                }
                plan = Some(p);
            }
            (runner.session, runner.telemetry)
        }
    };

    let state = session.twin().state();
    let spots = state.stamped_spots.clone();
    let lesion = session.twin().scene().lesion.clone();
    let mut passes: Vec<PassSummary> = Vec::new();
    for rec in telemetry.iter().filter(|r| r.laser_on) {
        match passes.last_mut() {
            Some(p) if p.index == rec.scan_pass_index => p.spots += 1,
            _ => passes.push(PassSummary {
                index: rec.scan_pass_index,
                color: pass_color(rec.scan_pass_index).to_string(),
                spots: 1,
            }),
        }
    }
    let summary = Summary {
        name: scenario.name.clone(),
        seed: scenario.seed,
        ticks: telemetry.len(),
        simulated_time_s: telemetry.last().map_or(0.0, |r| r.t),
        poses: plan.as_ref().map_or(0, |p| p.pose_count()),
        passes,
        coverage: lesion.as_ref().map(|l| coverage(l, &spots, DEFAULT_COVERAGE_RESOLUTION)),
        coverage_before_swingback: before,
        max_peak_temperature_c: telemetry
            .iter()
            .map(|r| r.peak_temperature)
            .fold(scenario.config.thermal.ambient_temperature, f64::max),
        max_channel_power_w: telemetry
            .iter()
            .flat_map(|r| r.powers)
            .fold(0.0, f64::max),
    };
    Ok(ScenarioRun {
        telemetry,
        summary,
        plan,
        spots,
    })
}

/// Spots recorded in a telemetry log: one per laser-on tick.
pub fn spots_from_telemetry(records: &[TelemetryRecord], config: &Config) -> Vec<Spot> {
    records
        .iter()
        .filter(|r| r.laser_on)
        .map(|r| Spot {
            center: r.plane_point.into(),
            radius: config.spot.radius(),
        })
        .collect()
}

/// Parses a telemetry JSONL log; errors carry the 1-based line number.
pub fn parse_telemetry(text: &str) -> Result<Vec<TelemetryRecord>, (usize, serde_json::Error)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e)))
        .collect()
}
