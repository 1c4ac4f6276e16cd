//! Physical description of the fiber and the configuration document that
//! carries it.
//!
//! The configuration is a flat TOML document. Every key spells out its unit
//! (`total_length_mm`, `max_channel_power_w`, ...), every key is optional and
//! unknown keys are rejected. An empty document yields the default device: a
//! 150 mm by 1.7 mm fiber whose distal 80 mm is treated as a rigid extension
//! of a 70 mm tendon-bent section.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::SpotModel;
use crate::thermal::ThermalParams;

/// Channel power above which the actuator leaves its linear regime.
pub const LINEAR_POWER_LIMIT_W: f64 = 0.8;

const TRIAD: [f64; 3] = [0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0];

/// Immutable geometry of the robotic fiber. Lengths in mm, angles in rad.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiberGeometry {
    pub total_length: f64,
    pub diameter: f64,
    /// Distal electrothermal segment.
    pub thermal_section_length: f64,
    /// Tendons are fixed this far from the tip. Everything distal of the
    /// anchor is modelled as a straight extension tangent to the bent arc.
    pub tendon_anchor_from_tip: f64,
    /// Arc length of the constant-curvature tendon section.
    pub bend_section_length: f64,
    pub tendon_angles: [f64; 3],
    /// Bending directions of the three heating-wire pairs.
    pub heater_angles: [f64; 3],
    /// Effective tendon moment arm. This is a calibrated quantity, not the
    /// pitch radius of the tendon channels.
    pub moment_arm: f64,
    pub laser_channel_diameter: f64,
}

impl FiberGeometry {
    /// Length of the straight segment appended to the arc.
    pub fn distal_length(&self) -> f64 {
        self.tendon_anchor_from_tip
    }
}

impl Default for FiberGeometry {
    fn default() -> Self {
        Self {
            total_length: 150.0,
            diameter: 1.7,
            thermal_section_length: 70.0,
            tendon_anchor_from_tip: 80.0,
            bend_section_length: 70.0,
            tendon_angles: TRIAD,
            heater_angles: TRIAD,
            moment_arm: 2.2,
            laser_channel_diameter: 0.9,
        }
    }
}

/// Hard limits enforced before any command reaches the simulated device.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetyLimits {
    pub max_channel_power: f64,
    pub max_temperature: f64,
    pub max_tendon_pull: f64,
    pub max_bend_angle: f64,
}

impl Default for SafetyLimits {
    fn default() -> Self {
        Self {
            max_channel_power: LINEAR_POWER_LIMIT_W,
            max_temperature: 75.0,
            max_tendon_pull: 0.9,
            max_bend_angle: 0.6,
        }
    }
}

/// Everything loaded from one configuration document.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Config {
    pub geometry: FiberGeometry,
    pub limits: SafetyLimits,
    pub thermal: ThermalParams,
    pub spot: SpotModel,
}

/// Non-fatal observations made while loading a configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigWarning {
    /// The channel power cap allows operation past the linear regime.
    PowerAboveLinearRegime { max_channel_power: f64 },
}

impl fmt::Display for ConfigWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigWarning::PowerAboveLinearRegime { max_channel_power } => write!(
                f,
                "max_channel_power_w = {max_channel_power} exceeds the {LINEAR_POWER_LIMIT_W} W \
                 linear actuation regime; displacement above it is not modelled"
            ),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

/// On-disk shape of the configuration document.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDocument {
    total_length_mm: Option<f64>,
    diameter_mm: Option<f64>,
    thermal_section_length_mm: Option<f64>,
    tendon_anchor_from_tip_mm: Option<f64>,
    /// Defaults to `total_length_mm - tendon_anchor_from_tip_mm` when absent.
    bend_section_length_mm: Option<f64>,
    tendon_angles_rad: Option<[f64; 3]>,
    heater_angles_rad: Option<[f64; 3]>,
    moment_arm_mm: Option<f64>,
    laser_channel_diameter_mm: Option<f64>,

    max_channel_power_w: Option<f64>,
    max_temperature_c: Option<f64>,
    max_tendon_pull_mm: Option<f64>,
    max_bend_angle_rad: Option<f64>,

    alpha_mm_per_w: Option<f64>,
    time_constant_s: Option<f64>,
    ambient_temperature_c: Option<f64>,
    temp_coefficient_c_per_w: Option<f64>,
    supply_resistance_ohm: Option<f64>,

    spot_diameter_mm: Option<f64>,
}

impl Config {
    /// Parses and validates a configuration document.
    pub fn from_toml_str(source: &str) -> Result<(Config, Vec<ConfigWarning>), ConfigError> {
        let doc: ConfigDocument = toml::from_str(source)?;
        let g = FiberGeometry::default();
        let l = SafetyLimits::default();
        let t = ThermalParams::default();
        let s = SpotModel::default();

        let total_length = doc.total_length_mm.unwrap_or(g.total_length);
        let anchor = doc.tendon_anchor_from_tip_mm.unwrap_or(g.tendon_anchor_from_tip);
        let config = Config {
            geometry: FiberGeometry {
                total_length,
                diameter: doc.diameter_mm.unwrap_or(g.diameter),
                thermal_section_length: doc
                    .thermal_section_length_mm
                    .unwrap_or(g.thermal_section_length),
                tendon_anchor_from_tip: anchor,
                bend_section_length: doc.bend_section_length_mm.unwrap_or(total_length - anchor),
                tendon_angles: doc.tendon_angles_rad.unwrap_or(g.tendon_angles),
                heater_angles: doc.heater_angles_rad.unwrap_or(g.heater_angles),
                moment_arm: doc.moment_arm_mm.unwrap_or(g.moment_arm),
                laser_channel_diameter: doc
                    .laser_channel_diameter_mm
                    .unwrap_or(g.laser_channel_diameter),
            },
            limits: SafetyLimits {
                max_channel_power: doc.max_channel_power_w.unwrap_or(l.max_channel_power),
                max_temperature: doc.max_temperature_c.unwrap_or(l.max_temperature),
                max_tendon_pull: doc.max_tendon_pull_mm.unwrap_or(l.max_tendon_pull),
                max_bend_angle: doc.max_bend_angle_rad.unwrap_or(l.max_bend_angle),
            },
            thermal: ThermalParams {
                alpha: doc.alpha_mm_per_w.unwrap_or(t.alpha),
                time_constant: doc.time_constant_s.unwrap_or(t.time_constant),
                ambient_temperature: doc.ambient_temperature_c.unwrap_or(t.ambient_temperature),
                temp_coefficient: doc.temp_coefficient_c_per_w.unwrap_or(t.temp_coefficient),
                supply_resistance: doc.supply_resistance_ohm.unwrap_or(t.supply_resistance),
            },
            spot: SpotModel {
                spot_diameter: doc.spot_diameter_mm.unwrap_or(s.spot_diameter),
            },
        };
        let warnings = config.validate()?;
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok((config, warnings))
    }

    /// Reads a configuration file from disk.
    pub fn load(path: impl AsRef<Path>) -> Result<(Config, Vec<ConfigWarning>), ConfigError> {
        let source = std::fs::read_to_string(path)?;
        Self::from_toml_str(&source)
    }

    /// Writes every value explicitly, so the document reloads to an equal
    /// configuration regardless of future default changes.
    pub fn to_toml_string(&self) -> String {
        let g = &self.geometry;
        let l = &self.limits;
        let t = &self.thermal;
        let doc = ConfigDocument {
            total_length_mm: Some(g.total_length),
            diameter_mm: Some(g.diameter),
            thermal_section_length_mm: Some(g.thermal_section_length),
            tendon_anchor_from_tip_mm: Some(g.tendon_anchor_from_tip),
            bend_section_length_mm: Some(g.bend_section_length),
            tendon_angles_rad: Some(g.tendon_angles),
            heater_angles_rad: Some(g.heater_angles),
            moment_arm_mm: Some(g.moment_arm),
            laser_channel_diameter_mm: Some(g.laser_channel_diameter),
            max_channel_power_w: Some(l.max_channel_power),
            max_temperature_c: Some(l.max_temperature),
            max_tendon_pull_mm: Some(l.max_tendon_pull),
            max_bend_angle_rad: Some(l.max_bend_angle),
            alpha_mm_per_w: Some(t.alpha),
            time_constant_s: Some(t.time_constant),
            ambient_temperature_c: Some(t.ambient_temperature),
            temp_coefficient_c_per_w: Some(t.temp_coefficient),
            supply_resistance_ohm: Some(t.supply_resistance),
            spot_diameter_mm: Some(self.spot.spot_diameter),
        };
        toml::to_string(&doc).expect("flat document of floats always serializes")
    }

    /// Checks every invariant, returning warnings for accepted-but-unusual
    /// values.
    pub fn validate(&self) -> Result<Vec<ConfigWarning>, ConfigError> {
        let g = &self.geometry;
        positive("total_length_mm", g.total_length)?;
        positive("diameter_mm", g.diameter)?;
        positive("thermal_section_length_mm", g.thermal_section_length)?;
        positive("tendon_anchor_from_tip_mm", g.tendon_anchor_from_tip)?;
        positive("bend_section_length_mm", g.bend_section_length)?;
        positive("moment_arm_mm", g.moment_arm)?;
        positive("laser_channel_diameter_mm", g.laser_channel_diameter)?;
        if (g.bend_section_length + g.tendon_anchor_from_tip - g.total_length).abs() > 1e-9 {
            return Err(invalid(
                "bend_section_length_mm",
                format!(
                    "{} + tendon_anchor_from_tip_mm {} must equal total_length_mm {}",
                    g.bend_section_length, g.tendon_anchor_from_tip, g.total_length
                ),
            ));
        }
        if g.thermal_section_length > g.tendon_anchor_from_tip {
            return Err(invalid(
                "thermal_section_length_mm",
                "thermal section must lie distal of the tendon anchor",
            ));
        }
        distinct_angles("tendon_angles_rad", &g.tendon_angles)?;
        distinct_angles("heater_angles_rad", &g.heater_angles)?;

        let l = &self.limits;
        positive("max_channel_power_w", l.max_channel_power)?;
        positive("max_temperature_c", l.max_temperature)?;
        positive("max_tendon_pull_mm", l.max_tendon_pull)?;
        positive("max_bend_angle_rad", l.max_bend_angle)?;
        if l.max_bend_angle >= PI / 2.0 {
            // the lateral profile stops being monotone past a quarter turn
            return Err(invalid("max_bend_angle_rad", "must be below pi/2"));
        }

        let t = &self.thermal;
        positive("alpha_mm_per_w", t.alpha)?;
        positive("time_constant_s", t.time_constant)?;
        finite("ambient_temperature_c", t.ambient_temperature)?;
        if !(t.temp_coefficient >= 0.0 && t.temp_coefficient.is_finite()) {
            return Err(invalid("temp_coefficient_c_per_w", "must be >= 0"));
        }
        positive("supply_resistance_ohm", t.supply_resistance)?;
        positive("spot_diameter_mm", self.spot.spot_diameter)?;

        let mut warnings = Vec::new();
        if l.max_channel_power > LINEAR_POWER_LIMIT_W {
            warnings.push(ConfigWarning::PowerAboveLinearRegime {
                max_channel_power: l.max_channel_power,
            });
        }
        Ok(warnings)
    }
}

fn finite(field: &'static str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, "must be finite"))
    }
}

fn positive(field: &'static str, v: f64) -> Result<(), ConfigError> {
    finite(field, v)?;
    if v > 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be > 0, got {v}")))
    }
}

fn distinct_angles(field: &'static str, angles: &[f64; 3]) -> Result<(), ConfigError> {
    for a in angles {
        finite(field, *a)?;
    }
    for i in 0..3 {
        for j in (i + 1)..3 {
            let d = (angles[i] - angles[j]).rem_euclid(TAU);
            if d < 1e-9 || TAU - d < 1e-9 {
                return Err(invalid(field, "angles must be distinct modulo 2*pi"));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let (cfg, warnings) = Config::from_toml_str("").unwrap();
        assert!(warnings.is_empty());
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.geometry.total_length, 150.0);
        assert_eq!(cfg.geometry.diameter, 1.7);
        assert_eq!(cfg.geometry.thermal_section_length, 70.0);
        assert_eq!(cfg.geometry.tendon_anchor_from_tip, 80.0);
        assert_eq!(cfg.geometry.bend_section_length, 70.0);
        assert_eq!(cfg.geometry.laser_channel_diameter, 0.9);
        assert_eq!(cfg.limits.max_channel_power, 0.8);
        assert_eq!(cfg.limits.max_temperature, 75.0);
        assert_eq!(cfg.limits.max_tendon_pull, 0.9);
    }

    #[test]
    fn inconsistent_lengths_are_rejected_with_field_name() {
        let src = "total_length_mm = 150\ntendon_anchor_from_tip_mm = 80\nbend_section_length_mm = 60\n";
        match Config::from_toml_str(src) {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "bend_section_length_mm"),
            other => panic!("expected invariant error, got {other:?}"),
        }
    }

    #[test]
    fn bend_length_follows_total_when_omitted() {
        let (cfg, _) = Config::from_toml_str("total_length_mm = 160.0").unwrap();
        assert_eq!(cfg.geometry.bend_section_length, 80.0);
    }

    #[test]
    fn power_above_linear_regime_warns() {
        let (cfg, warnings) = Config::from_toml_str("max_channel_power_w = 1.2").unwrap();
        assert_eq!(cfg.limits.max_channel_power, 1.2);
        assert_eq!(
            warnings,
            vec![ConfigWarning::PowerAboveLinearRegime {
                max_channel_power: 1.2
            }]
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            Config::from_toml_str("total_length = 150.0"),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn malformed_document_is_a_parse_error() {
        assert!(matches!(
            Config::from_toml_str("total_length_mm = ="),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn thermal_section_must_fit_distal_extension() {
        let err = Config::from_toml_str("thermal_section_length_mm = 90.0").unwrap_err();
        assert!(matches!(
            err,
            ConfigError::Invalid {
                field: "thermal_section_length_mm",
                ..
            }
        ));
    }

    #[test]
    fn duplicate_tendon_angles_are_rejected() {
        let err = Config::from_toml_str("tendon_angles_rad = [0.0, 6.283185307179586, 2.0]")
            .unwrap_err();
        assert!(matches!(
            err,
            ConfigError::Invalid {
                field: "tendon_angles_rad",
                ..
            }
        ));
    }

    #[test]
    fn nonpositive_values_are_rejected() {
        for key in ["diameter_mm", "alpha_mm_per_w", "time_constant_s", "spot_diameter_mm"] {
            let err = Config::from_toml_str(&format!("{key} = 0.0")).unwrap_err();
            assert!(matches!(err, ConfigError::Invalid { field, .. } if field == key));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn serialized_config_reloads_equal(
                total in 100.0f64..200.0,
                anchor_frac in 0.3f64..0.7,
                diameter in 0.5f64..3.0,
                moment_arm in 0.5f64..4.0,
                power in 0.1f64..1.5,
                alpha in 0.5f64..5.0,
                tau in 1.0f64..60.0,
                spot in 0.1f64..1.0,
                offset in 0.0f64..1.0,
            ) {
                let mut cfg = Config::default();
                cfg.geometry.total_length = total;
                cfg.geometry.tendon_anchor_from_tip = total * anchor_frac;
                cfg.geometry.bend_section_length = total - total * anchor_frac;
                cfg.geometry.thermal_section_length = total * anchor_frac * 0.8;
                cfg.geometry.diameter = diameter;
                cfg.geometry.moment_arm = moment_arm;
                cfg.geometry.heater_angles = TRIAD.map(|a| a + offset);
                cfg.limits.max_channel_power = power;
                cfg.thermal.alpha = alpha;
                cfg.thermal.time_constant = tau;
                cfg.spot.spot_diameter = spot;
                let text = cfg.to_toml_string();
                let (back, _) = Config::from_toml_str(&text).unwrap();
                prop_assert_eq!(back, cfg);
            }
        }
    }
}
