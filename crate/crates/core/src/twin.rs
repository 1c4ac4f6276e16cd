//! Time-stepped simulation of both actuation sections over a target plane.
//!
//! World frame: `z` along the insertion axis with `z = 0` at the tip of the
//! straight fiber when the insertion stage reads zero. The stage translates
//! the whole fiber along `z`, so a straight fiber inserted to depth `d` has
//! its tip at `z = d`. The target plane sits at `z = target_plane_z`.

use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Config;
use crate::geometry::{ConvexPolygon, Point};
use crate::kinematics::{self, pulls_from_bend, BendState, KinematicsError, TipPose};
use crate::numeric::bisect_increasing;
use crate::planner::{CoverageGrid, Lesion, Spot, DEFAULT_COVERAGE_RESOLUTION};
use crate::thermal::{self, ActuationNoise, PowerCommand, ThermalError, ThermalState, WORKSPACE_TOLERANCE_MM};

/// Largest accepted tick, s.
pub const MAX_DT: f64 = 0.5;
/// Default simulation step (20 Hz), s.
pub const DEFAULT_DT: f64 = 0.05;
/// A raster waypoint counts as reached within this distance, mm.
pub const WAYPOINT_TOLERANCE_MM: f64 = 0.005;

/// Marker colours of successive scan passes.
pub const PASS_COLORS: [&str; 3] = ["blue", "red", "yellow"];

/// Colour of the 1-based pass `index`; the cycle repeats after three.
pub fn pass_color(index: u32) -> &'static str {
    PASS_COLORS[(index.max(1) as usize - 1) % PASS_COLORS.len()]
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TwinError {
    #[error(transparent)]
    Thermal(#[from] ThermalError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("tick length {0} s outside (0, {MAX_DT}]")]
    InvalidDt(f64),
    #[error("laser requested in mode {0:?}")]
    LaserOutsideScanning(SessionMode),
    #[error("tip ray does not reach the target plane")]
    NoIntersection,
    #[error("insertion depth {0} mm is invalid for this scene")]
    InvalidDepth(f64),
}

/// Operating mode of a telemanipulation session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionMode {
    Idle,
    Inserted,
    CoarseNav,
    Settled,
    Scanning,
    Safe,
}

impl SessionMode {
    pub const ALL: [SessionMode; 6] = [
        SessionMode::Idle,
        SessionMode::Inserted,
        SessionMode::CoarseNav,
        SessionMode::Settled,
        SessionMode::Scanning,
        SessionMode::Safe,
    ];
}

/// Target plane and the lesion drawn on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    #[serde(rename = "target_plane_z_mm")]
    pub target_plane_z: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lesion: Option<Lesion>,
}

impl Default for Scene {
    fn default() -> Self {
        Self {
            // plane two millimetres in front of the un-inserted straight tip
            target_plane_z: 2.0,
            lesion: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("failed to read scene: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse scene: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("target_plane_z_mm must be > 0")]
    PlaneBehindOrigin,
}

impl Scene {
    pub fn from_toml_str(s: &str) -> Result<Scene, SceneError> {
        let scene: Scene = toml::from_str(s)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scene, SceneError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.target_plane_z > 0.0 && self.target_plane_z.is_finite()) {
            return Err(SceneError::PlaneBehindOrigin);
        }
        Ok(())
    }
}

/// Tip pose in the world frame for a given insertion depth.
pub fn world_tip(config: &Config, bend: &BendState, deflection: &Vector2<f64>, insertion_depth: f64) -> TipPose {
    let mut tip = kinematics::forward_kinematics(&config.geometry, bend, deflection);
    tip.position += Vector3::z() * (insertion_depth - config.geometry.total_length);
    tip
}

/// Where the laser ray leaving the tip along its axis meets the target plane.
/// `tip` is in the world frame.
pub fn project_tip_to_plane(tip: &TipPose, scene: &Scene) -> Result<Point, TwinError> {
    let dz = scene.target_plane_z - tip.position.z;
    if tip.tangent.z <= 1e-12 || dz < 0.0 {
        return Err(TwinError::NoIntersection);
    }
    let s = dz / tip.tangent.z;
    Ok((tip.position + tip.tangent * s).xy())
}

/// Largest bend along azimuth `phi` allowed by both the bend and pull limits.
pub fn bend_limit(config: &Config, phi: f64) -> f64 {
    let g = &config.geometry;
    let worst = g
        .tendon_angles
        .iter()
        .map(|a| (a - phi).cos())
        .fold(f64::NEG_INFINITY, f64::max);
    let by_pull = if worst > 0.0 {
        config.limits.max_tendon_pull / (g.moment_arm * worst)
    } else {
        f64::INFINITY
    };
    config.limits.max_bend_angle.min(by_pull)
}

/// Bend that puts the undeflected laser spot at `target` on the plane.
pub fn plane_inverse_kinematics(
    config: &Config,
    scene: &Scene,
    insertion_depth: f64,
    target: &Point,
) -> Result<BendState, TwinError> {
    let phi = target.y.atan2(target.x);
    let distance = target.norm();
    if distance == 0.0 {
        return Ok(BendState::STRAIGHT);
    }
    let radial = |theta: f64| -> f64 {
        let tip = world_tip(config, &BendState::new(theta, 0.0), &Vector2::zeros(), insertion_depth);
        project_tip_to_plane(&tip, scene).map(|p| p.x).unwrap_or(f64::INFINITY)
    };
    let limit = bend_limit(config, phi);
    let max = radial(limit);
    let root = bisect_increasing(radial, 0.0, limit, distance, kinematics::IK_TOLERANCE_MM, kinematics::IK_MAX_ITERATIONS)
        .ok_or(KinematicsError::TargetOutOfReach { distance, max })?;
    Ok(BendState::new(root.x, phi))
}

/// Actuation requested for one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwinCommand {
    /// `(theta, phi)` of the tendon section, rad.
    pub bend: (f64, f64),
    pub powers: [f64; 3],
    pub laser_on: bool,
    pub mode: SessionMode,
    pub insertion_depth: f64,
}

impl TwinCommand {
    /// Everything off, fiber straight and retracted.
    pub fn idle() -> TwinCommand {
        TwinCommand {
            bend: (0.0, 0.0),
            powers: [0.0; 3],
            laser_on: false,
            mode: SessionMode::Idle,
            insertion_depth: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwinState {
    pub t: f64,
    pub bend: BendState,
    pub thermal: ThermalState,
    pub powers: PowerCommand,
    pub insertion_depth: f64,
    pub laser_on: bool,
    pub mode: SessionMode,
    pub plane_point: Point,
    pub scan_pass_index: u32,
    /// Append-only.
    pub stamped_spots: Vec<Spot>,
}

/// One line of the telemetry log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetryRecord {
    pub t: f64,
    pub tip: [f64; 3],
    pub plane_point: [f64; 2],
    pub bend: [f64; 2],
    pub powers: [f64; 3],
    pub peak_temperature: f64,
    pub laser_on: bool,
    pub mode: SessionMode,
    pub scan_pass_index: u32,
}

impl TelemetryRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("telemetry serializes")
    }
}

/// The simulated device and its scene.
#[derive(Debug, Clone)]
pub struct Twin {
    config: Config,
    scene: Scene,
    workspace: ConvexPolygon,
    noise: ActuationNoise,
    rng: ChaCha8Rng,
    state: TwinState,
    coverage: Option<CoverageGrid>,
}

impl Twin {
    pub fn new(config: Config, scene: Scene, seed: u64, noise: ActuationNoise) -> Twin {
        let workspace = thermal::workspace(&config.thermal, &config.limits, &config.geometry.heater_angles);
        let coverage = scene
            .lesion
            .as_ref()
            .map(|l| CoverageGrid::new(l, DEFAULT_COVERAGE_RESOLUTION));
        let thermal = ThermalState::at_rest(&config.thermal);
        let tip = world_tip(&config, &BendState::STRAIGHT, &thermal.deflection, 0.0);
        let plane_point = project_tip_to_plane(&tip, &scene).unwrap_or_else(|_| tip.position.xy());
        Twin {
            state: TwinState {
                t: 0.0,
                bend: BendState::STRAIGHT,
                thermal,
                powers: PowerCommand::ZERO,
                insertion_depth: 0.0,
                laser_on: false,
                mode: SessionMode::Idle,
                plane_point,
                scan_pass_index: 0,
                stamped_spots: Vec::new(),
            },
            config,
            scene,
            workspace,
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
            coverage,
        }
    }

    pub fn state(&self) -> &TwinState {
        &self.state
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn workspace(&self) -> &ConvexPolygon {
        &self.workspace
    }

    /// Coverage of the scene lesion so far, tracked incrementally.
    pub fn live_coverage(&self) -> Option<f64> {
        self.coverage.as_ref().map(|c| c.fraction())
    }

    /// Advances one step. On error nothing changes, including the noise
    /// stream.
    pub fn tick(&mut self, cmd: &TwinCommand, dt: f64) -> Result<TelemetryRecord, TwinError> {
        if !(dt > 0.0 && dt <= MAX_DT) {
            return Err(TwinError::InvalidDt(dt));
        }
        let cfg = &self.config;
        let bend = BendState::checked(cmd.bend.0, cmd.bend.1, &cfg.limits)?;
        pulls_from_bend(&cfg.geometry, &cfg.limits, &bend)?;
        let powers = PowerCommand::new(cmd.powers, &cfg.limits)?;
        if cmd.laser_on && cmd.mode != SessionMode::Scanning {
            return Err(TwinError::LaserOutsideScanning(cmd.mode));
        }
        if !(cmd.insertion_depth.is_finite() && cmd.insertion_depth >= 0.0 && cmd.insertion_depth < self.scene.target_plane_z)
        {
            return Err(TwinError::InvalidDepth(cmd.insertion_depth));
        }

        let mut rng = self.rng.clone();
        let mut target = ThermalState {
            deflection: thermal::steady_state_deflection(&cfg.thermal, &powers, &cfg.geometry.heater_angles),
            peak_temperature: thermal::peak_temperature_ss(&cfg.thermal, &powers),
        };
        if self.noise.sigma > 0.0 {
            let noisy = target.deflection + self.noise.sample(&mut rng);
            if self.workspace.contains(&noisy, WORKSPACE_TOLERANCE_MM) {
                target.deflection = noisy;
            }
        }
        let next_thermal = thermal::relax(&cfg.thermal, &self.state.thermal, &target, dt);
        let tip = world_tip(cfg, &bend, &next_thermal.deflection, cmd.insertion_depth);
        let plane_point = project_tip_to_plane(&tip, &self.scene)?;

        // commit
        self.rng = rng;
        let s = &mut self.state;
        if cmd.mode == SessionMode::Scanning && s.mode != SessionMode::Scanning {
            s.scan_pass_index += 1;
        }
        s.t += dt;
        s.bend = bend;
        s.thermal = next_thermal;
        s.powers = powers;
        s.insertion_depth = cmd.insertion_depth;
        s.laser_on = cmd.laser_on;
        s.mode = cmd.mode;
        s.plane_point = plane_point;
        if cmd.laser_on {
            let spot = Spot {
                center: plane_point,
                radius: cfg.spot.radius(),
            };
            s.stamped_spots.push(spot);
            if let Some(grid) = self.coverage.as_mut() {
                grid.stamp(&spot);
            }
        }
        Ok(TelemetryRecord {
            t: s.t,
            tip: [tip.position.x, tip.position.y, tip.position.z],
            plane_point: [plane_point.x, plane_point.y],
            bend: [bend.theta(), bend.phi()],
            powers: powers.powers(),
            peak_temperature: s.thermal.peak_temperature,
            laser_on: s.laser_on,
            mode: s.mode,
            scan_pass_index: s.scan_pass_index,
        })
    }
}

/// Turns a raster into per-tick thermal setpoints.
///
/// Under a first-order lag with a fixed setpoint the deflection moves along
/// the straight line towards it, so holding the setpoint on the current
/// segment traces the raster exactly. The setpoint leads the state by at most
/// `speed * tau`, which caps the tip speed at `speed`. A waypoint is done once
/// the state is within [`WAYPOINT_TOLERANCE_MM`] of it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanExecutor {
    waypoints: Vec<Point>,
    speed: f64,
    next: usize,
}

impl ScanExecutor {
    pub fn new(waypoints: Vec<Point>, speed: f64) -> ScanExecutor {
        ScanExecutor {
            waypoints,
            speed,
            next: 0,
        }
    }

    /// True once the first waypoint has been reached.
    pub fn on_path(&self) -> bool {
        self.next >= 1
    }

    pub fn finished(&self) -> bool {
        self.next >= self.waypoints.len()
    }

    pub fn last_waypoint(&self) -> Option<Point> {
        self.waypoints.last().copied()
    }

    /// Setpoint for the next tick given the current deflection, or `None`
    /// when the path is complete.
    pub fn setpoint(&mut self, current: &Point, time_constant: f64) -> Option<Point> {
        while let Some(goal) = self.waypoints.get(self.next) {
            if (goal - current).norm() <= WAYPOINT_TOLERANCE_MM {
                self.next += 1;
            } else {
                break;
            }
        }
        let goal = *self.waypoints.get(self.next)?;
        let delta = goal - current;
        let lead = self.speed * time_constant;
        let dist = delta.norm();
        Some(if dist > lead { current + delta * (lead / dist) } else { goal })
    }
}
