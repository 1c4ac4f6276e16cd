//! Electrothermal section: power-to-deflection law, its inverse, the reachable
//! workspace, first-order dynamics and the peak-temperature surrogate.
//!
//! Each heating-wire pair `i` pushes the tip along its bending direction
//! `e_i` by `alpha * p_i`; simultaneous channels superpose as vectors. With
//! three 120 degree spaced channels capped at `p_max`, the reachable set is a
//! regular hexagon of circumradius `alpha * p_max`.

use nalgebra::Vector2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::config::SafetyLimits;
use crate::geometry::ConvexPolygon;

/// Boundary slack for workspace membership, in mm.
pub const WORKSPACE_TOLERANCE_MM: f64 = 1e-9;

// Allocation results within this of a bound are snapped onto it.
const POWER_SNAP_W: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ThermalError {
    #[error("channel {channel} power {power:.4} W exceeds the {max} W cap")]
    PowerLimitExceeded { channel: usize, power: f64, max: f64 },
    #[error("channel {channel} power {power} W is negative or not finite")]
    InvalidPower { channel: usize, power: f64 },
    #[error("target ({x:.4}, {y:.4}) mm lies outside the thermal workspace")]
    OutsideWorkspace { x: f64, y: f64 },
}

/// Lumped electrothermal constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermalParams {
    /// Displacement per unit power, mm/W.
    pub alpha: f64,
    /// First-order lag, s.
    pub time_constant: f64,
    /// °C
    pub ambient_temperature: f64,
    /// Peak surface temperature rise per watt on the hottest channel, °C/W.
    pub temp_coefficient: f64,
    /// Ω per channel, used only when commands arrive as voltages.
    pub supply_resistance: f64,
}

impl Default for ThermalParams {
    fn default() -> Self {
        Self {
            // 1.95 mm at the 0.8 W end of the linear regime
            alpha: 2.4375,
            time_constant: 20.0,
            ambient_temperature: 22.0,
            // (75 - 22) / 0.8
            temp_coefficient: 66.25,
            supply_resistance: 100.0,
        }
    }
}

/// Per-channel heater powers in W, validated against the channel cap.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PowerCommand([f64; 3]);

impl PowerCommand {
    pub const ZERO: PowerCommand = PowerCommand([0.0; 3]);

    pub fn new(powers: [f64; 3], limits: &SafetyLimits) -> Result<PowerCommand, ThermalError> {
        for (channel, &power) in powers.iter().enumerate() {
            if !(power.is_finite() && power >= 0.0) {
                return Err(ThermalError::InvalidPower { channel, power });
            }
            if power > limits.max_channel_power {
                return Err(ThermalError::PowerLimitExceeded {
                    channel,
                    power,
                    max: limits.max_channel_power,
                });
            }
        }
        Ok(PowerCommand(powers))
    }

    pub fn powers(&self) -> [f64; 3] {
        self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn max_channel(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }
}

/// Thermal section state carried between ticks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermalState {
    pub deflection: Vector2<f64>,
    pub peak_temperature: f64,
}

impl ThermalState {
    pub fn at_rest(params: &ThermalParams) -> ThermalState {
        ThermalState {
            deflection: Vector2::zeros(),
            peak_temperature: params.ambient_temperature,
        }
    }
}

fn unit(angle: f64) -> Vector2<f64> {
    Vector2::new(angle.cos(), angle.sin())
}

pub fn steady_state_deflection(params: &ThermalParams, cmd: &PowerCommand, heater_angles: &[f64; 3]) -> Vector2<f64> {
    cmd.0
        .iter()
        .zip(heater_angles)
        .fold(Vector2::zeros(), |acc, (&p, &a)| acc + unit(a) * (params.alpha * p))
}

/// Steady-state peak surface temperature; the hottest channel dominates.
pub fn peak_temperature_ss(params: &ThermalParams, cmd: &PowerCommand) -> f64 {
    params.ambient_temperature + params.temp_coefficient * cmd.max_channel()
}

/// Converts per-channel drive voltages through `P = V^2 / R`.
pub fn power_from_voltage(
    params: &ThermalParams,
    limits: &SafetyLimits,
    volts: [f64; 3],
) -> Result<PowerCommand, ThermalError> {
    for (channel, v) in volts.iter().enumerate() {
        if !(v.is_finite() && *v >= 0.0) {
            return Err(ThermalError::InvalidPower { channel, power: *v });
        }
    }
    PowerCommand::new(volts.map(|v| v * v / params.supply_resistance), limits)
}

/// Reachable steady-state deflections: the Minkowski sum of the three
/// segments `[0, alpha * p_max] * e_i`.
pub fn workspace(params: &ThermalParams, limits: &SafetyLimits, heater_angles: &[f64; 3]) -> ConvexPolygon {
    let reach = params.alpha * limits.max_channel_power;
    let mut corners = Vec::with_capacity(8);
    for mask in 0u8..8 {
        let v = (0..3)
            .filter(|i| mask & (1 << i) != 0)
            .fold(Vector2::zeros(), |acc, i| acc + unit(heater_angles[i]) * reach);
        corners.push(v);
    }
    ConvexPolygon::hull(&corners)
}

/// Hexagon corners, counter-clockwise starting nearest the +x axis.
pub fn workspace_vertices(params: &ThermalParams, limits: &SafetyLimits, heater_angles: &[f64; 3]) -> Vec<Vector2<f64>> {
    workspace(params, limits, heater_angles).vertices().to_vec()
}

pub fn workspace_contains(
    params: &ThermalParams,
    limits: &SafetyLimits,
    heater_angles: &[f64; 3],
    point: &Vector2<f64>,
) -> bool {
    workspace(params, limits, heater_angles).contains(point, WORKSPACE_TOLERANCE_MM)
}

/// Minimum-total-power command whose steady state is `target`.
///
/// The optimum of this two-constraint linear program uses at most two
/// channels, so every channel pair is solved exactly and the cheapest
/// feasible pair wins.
pub fn allocate_powers(
    params: &ThermalParams,
    limits: &SafetyLimits,
    heater_angles: &[f64; 3],
    target: &Vector2<f64>,
) -> Result<PowerCommand, ThermalError> {
    let outside = ThermalError::OutsideWorkspace { x: target.x, y: target.y };
    if !target.x.is_finite() || !target.y.is_finite() {
        return Err(outside);
    }
    if target.norm() == 0.0 {
        return Ok(PowerCommand::ZERO);
    }
    let cap = limits.max_channel_power;
    let goal = target / params.alpha;
    let snap = |p: f64| -> Option<f64> {
        if p < -POWER_SNAP_W || p > cap + POWER_SNAP_W {
            None
        } else {
            Some(p.clamp(0.0, cap))
        }
    };

    let mut best: Option<[f64; 3]> = None;
    for (i, j) in [(0usize, 1usize), (1, 2), (2, 0)] {
        let (a, b) = (unit(heater_angles[i]), unit(heater_angles[j]));
        let det = a.x * b.y - a.y * b.x;
        if det.abs() < 1e-12 {
            continue;
        }
        let pi = (goal.x * b.y - goal.y * b.x) / det;
        let pj = (a.x * goal.y - a.y * goal.x) / det;
        let (Some(pi), Some(pj)) = (snap(pi), snap(pj)) else {
            continue;
        };
        let mut p = [0.0; 3];
        p[i] = pi;
        p[j] = pj;
        let better = match &best {
            None => true,
            Some(prev) => p.iter().sum::<f64>() < prev.iter().sum::<f64>() - 1e-15,
        };
        if better {
            best = Some(p);
        }
    }
    let p = best.ok_or(outside.clone())?;
    let cmd = PowerCommand::new(p, limits)?;
    let achieved = steady_state_deflection(params, &cmd, heater_angles);
    if (achieved - target).norm() > 1e-6 {
        return Err(outside);
    }
    Ok(cmd)
}

/// Advances the lag by `dt` towards the steady state implied by `cmd`.
pub fn step_dynamics(
    params: &ThermalParams,
    heater_angles: &[f64; 3],
    state: &ThermalState,
    cmd: &PowerCommand,
    dt: f64,
) -> ThermalState {
    let target = ThermalState {
        deflection: steady_state_deflection(params, cmd, heater_angles),
        peak_temperature: peak_temperature_ss(params, cmd),
    };
    relax(params, state, &target, dt)
}

/// Exact exponential relaxation of `state` towards `target` over `dt`.
pub fn relax(params: &ThermalParams, state: &ThermalState, target: &ThermalState, dt: f64) -> ThermalState {
    let keep = (-dt / params.time_constant).exp();
    ThermalState {
        deflection: target.deflection + (state.deflection - target.deflection) * keep,
        peak_temperature: target.peak_temperature + (state.peak_temperature - target.peak_temperature) * keep,
    }
}

/// Zero-mean Gaussian perturbation of the steady-state deflection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActuationNoise {
    /// Per-axis standard deviation, mm.
    pub sigma: f64,
}

impl ActuationNoise {
    /// Noise level used for precision studies.
    pub const PRECISION_STUDY: ActuationNoise = ActuationNoise { sigma: 0.020 };

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector2<f64> {
        if self.sigma == 0.0 {
            return Vector2::zeros();
        }
        let normal = Normal::new(0.0, self.sigma).expect("sigma is finite and non-negative");
        Vector2::new(normal.sample(rng), normal.sample(rng))
    }
}
