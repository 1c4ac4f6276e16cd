//! Constant-curvature kinematics of the tendon section.
//!
//! The proximal `bend_section_length` of the fiber bends as a single circular
//! arc of total angle `theta` in the plane at azimuth `phi`. The distal
//! `tendon_anchor_from_tip` millimetres stay straight and tangent to the arc
//! end. Thermal deflection of the distal section is superposed as a small
//! lateral offset expressed in the tip cross-section frame.
//!
//! Base frame: origin at the proximal end of the bend section, `z` along the
//! undeflected fiber axis.

use std::f64::consts::TAU;

use nalgebra::{Rotation3, Unit, Vector2, Vector3};
use thiserror::Error;

use crate::config::{FiberGeometry, SafetyLimits};
use crate::numeric::{bisect_increasing, golden_section_min};

/// Bisection stops once the lateral residual is below this, in mm.
pub const IK_TOLERANCE_MM: f64 = 1e-6;
pub const IK_MAX_ITERATIONS: u32 = 200;

// Below this the arc terms switch to their Taylor series.
const SMALL_ANGLE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("target at {distance:.4} mm is beyond the reachable {max:.4} mm")]
    TargetOutOfReach { distance: f64, max: f64 },
    #[error("bend angle {theta} rad exceeds the {max} rad limit")]
    BendLimitExceeded { theta: f64, max: f64 },
    #[error("tendon {index} pull {pull:.4} mm exceeds the {max} mm limit")]
    PullLimitExceeded { index: usize, pull: f64, max: f64 },
    #[error("moment-arm fit is degenerate: {0}")]
    DegenerateData(String),
}

/// Configuration of the tendon section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BendState {
    theta: f64,
    phi: f64,
}

impl BendState {
    pub const STRAIGHT: BendState = BendState { theta: 0.0, phi: 0.0 };

    /// Canonicalises the pair: a negative angle bends the other way, `phi` is
    /// wrapped to `[0, 2pi)` and forced to zero for a straight fiber.
    pub fn new(theta: f64, phi: f64) -> BendState {
        let (theta, phi) = if theta < 0.0 { (-theta, phi + TAU / 2.0) } else { (theta, phi) };
        if theta == 0.0 {
            return Self::STRAIGHT;
        }
        let mut phi = phi.rem_euclid(TAU);
        if phi >= TAU {
            phi = 0.0;
        }
        BendState { theta, phi }
    }

    /// Like [`BendState::new`] but rejects angles past the safety limit.
    pub fn checked(theta: f64, phi: f64, limits: &SafetyLimits) -> Result<BendState, KinematicsError> {
        let bend = BendState::new(theta, phi);
        if !(bend.theta <= limits.max_bend_angle) {
            return Err(KinematicsError::BendLimitExceeded {
                theta: bend.theta,
                max: limits.max_bend_angle,
            });
        }
        Ok(bend)
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    /// Arc curvature in 1/mm.
    pub fn curvature(&self, geom: &FiberGeometry) -> f64 {
        self.theta / geom.bend_section_length
    }
}

impl Default for BendState {
    fn default() -> Self {
        Self::STRAIGHT
    }
}

/// Tip position and distal axis direction in the base frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TipPose {
    pub position: Vector3<f64>,
    pub tangent: Vector3<f64>,
}

/// `(1 - cos t) / t` and `sin t / t`, finite at `t = 0`.
fn arc_terms(theta: f64) -> (f64, f64) {
    if theta.abs() < SMALL_ANGLE {
        let t2 = theta * theta;
        let one_minus_cos = theta * (0.5 - t2 / 24.0 + t2 * t2 / 720.0);
        let sinc = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
        (one_minus_cos, sinc)
    } else {
        ((1.0 - theta.cos()) / theta, theta.sin() / theta)
    }
}

/// Orientation of the tip cross-section: a rotation by `theta` about the
/// in-plane axis perpendicular to the bending direction (no torsion).
pub fn tip_rotation(bend: &BendState) -> Rotation3<f64> {
    let axis = Unit::new_unchecked(Vector3::new(-bend.phi.sin(), bend.phi.cos(), 0.0));
    Rotation3::from_axis_angle(&axis, bend.theta)
}

pub fn forward_kinematics(geom: &FiberGeometry, bend: &BendState, thermal_deflection: &Vector2<f64>) -> TipPose {
    let (theta, phi) = (bend.theta, bend.phi);
    let (one_minus_cos, sinc) = arc_terms(theta);
    let lb = geom.bend_section_length;
    let radial_dir = Vector3::new(phi.cos(), phi.sin(), 0.0);

    let arc_end = radial_dir * (lb * one_minus_cos) + Vector3::z() * (lb * sinc);
    let tangent = radial_dir * theta.sin() + Vector3::z() * theta.cos();
    let offset = tip_rotation(bend) * Vector3::new(thermal_deflection.x, thermal_deflection.y, 0.0);

    TipPose {
        position: arc_end + tangent * geom.distal_length() + offset,
        tangent,
    }
}

/// Planar distance of the tip from the fiber axis for a bend of `theta`.
pub fn lateral_displacement(geom: &FiberGeometry, theta: f64) -> f64 {
    let (one_minus_cos, _) = arc_terms(theta);
    geom.bend_section_length * one_minus_cos + geom.distal_length() * theta.sin()
}

/// Bend that places the tip's planar projection at `target`.
pub fn inverse_kinematics(
    geom: &FiberGeometry,
    limits: &SafetyLimits,
    target: &Vector2<f64>,
) -> Result<BendState, KinematicsError> {
    let distance = target.norm();
    let max = lateral_displacement(geom, limits.max_bend_angle);
    if distance > max {
        return Err(KinematicsError::TargetOutOfReach { distance, max });
    }
    if distance == 0.0 {
        return Ok(BendState::STRAIGHT);
    }
    let root = bisect_increasing(
        |t| lateral_displacement(geom, t),
        0.0,
        limits.max_bend_angle,
        distance,
        IK_TOLERANCE_MM,
        IK_MAX_ITERATIONS,
    )
    .ok_or(KinematicsError::TargetOutOfReach { distance, max })?;
    Ok(BendState::new(root.x, target.y.atan2(target.x)))
}

/// Tendon pulls `d * theta * cos(phi_i - phi)`; slack tendons read zero.
pub fn pulls_from_bend(
    geom: &FiberGeometry,
    limits: &SafetyLimits,
    bend: &BendState,
) -> Result<[f64; 3], KinematicsError> {
    let mut pulls = [0.0; 3];
    for (i, (pull, angle)) in pulls.iter_mut().zip(geom.tendon_angles).enumerate() {
        let raw = geom.moment_arm * bend.theta * (angle - bend.phi).cos();
        *pull = raw.max(0.0);
        if *pull > limits.max_tendon_pull + 1e-12 {
            return Err(KinematicsError::PullLimitExceeded {
                index: i,
                pull: *pull,
                max: limits.max_tendon_pull,
            });
        }
    }
    Ok(pulls)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentArmFit {
    pub moment_arm: f64,
    pub residual_rms: f64,
}

const MOMENT_ARM_SEARCH: (f64, f64) = (0.05, 50.0);
const MOMENT_ARM_GRID: usize = 400;

/// Least-squares effective moment arm from single-tendon pull samples.
///
/// Each sample is `(pull_mm, measured_lateral_mm)`. The model is
/// `lateral_displacement(pull / d)`: pulling one tendon bends the section
/// towards that tendon by `pull / d`.
pub fn calibrate_moment_arm(geom: &FiberGeometry, samples: &[(f64, f64)]) -> Result<MomentArmFit, KinematicsError> {
    if samples.len() < 2 {
        return Err(KinematicsError::DegenerateData("need at least two samples".into()));
    }
    let mut pulls: Vec<f64> = samples.iter().map(|s| s.0).collect();
    if pulls.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || samples.iter().any(|s| !s.1.is_finite()) {
        return Err(KinematicsError::DegenerateData("pulls must be finite and non-negative".into()));
    }
    pulls.sort_by(f64::total_cmp);
    if pulls.windows(2).any(|w| w[0] == w[1]) {
        return Err(KinematicsError::DegenerateData("pull levels must be distinct".into()));
    }
    let max_pull = *pulls.last().unwrap();
    if max_pull <= 0.0 {
        return Err(KinematicsError::DegenerateData("need at least one positive pull".into()));
    }

    let sse = |d: f64| -> f64 {
        samples
            .iter()
            .map(|&(p, m)| {
                let r = lateral_displacement(geom, p / d) - m;
                r * r
            })
            .sum()
    };

    // Keep the implied bend angle inside the monotone part of the profile.
    let lo = MOMENT_ARM_SEARCH.0.max(max_pull / 1.5);
    let hi = MOMENT_ARM_SEARCH.1;
    if lo >= hi {
        return Err(KinematicsError::DegenerateData("pulls too large for the search range".into()));
    }
    let ratio = (hi / lo).powf(1.0 / (MOMENT_ARM_GRID - 1) as f64);
    let grid: Vec<f64> = (0..MOMENT_ARM_GRID).map(|i| lo * ratio.powi(i as i32)).collect();
    let (best, _) = grid
        .iter()
        .enumerate()
        .map(|(i, &d)| (i, sse(d)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    if best == 0 || best == grid.len() - 1 {
        return Err(KinematicsError::DegenerateData(
            "no interior minimum; the data do not bracket a moment arm".into(),
        ));
    }
    let d = golden_section_min(sse, grid[best - 1], grid[best + 1], 1e-13, 500);
    Ok(MomentArmFit {
        moment_arm: d,
        residual_rms: (sse(d) / samples.len() as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn geom() -> FiberGeometry {
        FiberGeometry::default()
    }

    #[test]
    fn straight_fiber_tip_is_on_axis() {
        let tip = forward_kinematics(&geom(), &BendState::STRAIGHT, &Vector2::zeros());
        assert_eq!(tip.position, Vector3::new(0.0, 0.0, 150.0));
        assert_eq!(tip.tangent, Vector3::z());
    }

    #[test]
    fn full_pull_range_reaches_46_mm() {
        // frozen from an independent evaluation of (Lb/t)(1 - cos t) + Ld sin t
        let lateral = lateral_displacement(&geom(), 0.41);
        assert!((lateral - 46.038849660309054).abs() < 1e-9, "{lateral}");
        let tip = forward_kinematics(&geom(), &BendState::new(0.41, 0.0), &Vector2::zeros());
        assert!((tip.position.xy().norm() - lateral).abs() < 1e-12);
    }

    #[test]
    fn small_angle_matches_series() {
        let lateral = lateral_displacement(&geom(), 1e-3);
        assert!((lateral - 0.115).abs() < 1e-7, "{lateral}");
        assert!((lateral - 0.11499998374945256).abs() < 1e-12);
    }

    #[test]
    fn fk_is_continuous_at_zero() {
        let g = geom();
        let a = forward_kinematics(&g, &BendState::new(1e-9, 0.3), &Vector2::zeros());
        let b = forward_kinematics(&g, &BendState::STRAIGHT, &Vector2::zeros());
        assert!((a.position - b.position).norm() < 1e-6);
    }

    #[test]
    fn lateral_profile_is_monotone_on_grid() {
        let g = geom();
        let mut prev = lateral_displacement(&g, 0.0);
        assert_eq!(prev, 0.0);
        let mut t = 1e-3;
        while t <= 0.6 {
            let cur = lateral_displacement(&g, t);
            assert!(cur > prev, "not increasing at {t}");
            prev = cur;
            t += 1e-3;
        }
        assert!(lateral_displacement(&g, 0.2) < lateral_displacement(&g, 0.4));
    }

    #[test]
    fn ik_of_origin_is_straight() {
        let b = inverse_kinematics(&geom(), &SafetyLimits::default(), &Vector2::zeros()).unwrap();
        assert_eq!(b, BendState::STRAIGHT);
    }

    #[test]
    fn ik_for_46_mm() {
        let b = inverse_kinematics(&geom(), &SafetyLimits::default(), &Vector2::new(46.0, 0.0)).unwrap();
        // root of lateral(t) = 46 from an independent Brent solve
        assert!((b.theta() - 0.4096366458351081).abs() < 1e-7);
        assert_eq!(b.phi(), 0.0);
    }

    #[test]
    fn ik_rejects_unreachable() {
        let err = inverse_kinematics(&geom(), &SafetyLimits::default(), &Vector2::new(70.0, 0.0)).unwrap_err();
        assert!(matches!(err, KinematicsError::TargetOutOfReach { .. }));
    }

    #[test]
    fn bend_state_canonicalises() {
        assert_eq!(BendState::new(0.0, 1.3), BendState::STRAIGHT);
        let b = BendState::new(-0.2, 0.0);
        assert_eq!(b.theta(), 0.2);
        assert!((b.phi() - PI).abs() < 1e-15);
        assert!((BendState::new(0.1, -PI / 2.0).phi() - 1.5 * PI).abs() < 1e-15);
        assert!(BendState::checked(0.7, 0.0, &SafetyLimits::default()).is_err());
    }

    #[test]
    fn pulls_single_direction() {
        let g = geom();
        let l = SafetyLimits::default();
        assert_eq!(pulls_from_bend(&g, &l, &BendState::STRAIGHT).unwrap(), [0.0; 3]);
        let roomy = SafetyLimits { max_tendon_pull: 1.0, ..l };
        let p = pulls_from_bend(&g, &roomy, &BendState::new(0.41, 0.0)).unwrap();
        assert!((p[0] - 0.902).abs() < 1e-12);
        assert_eq!(p[1], 0.0);
        assert_eq!(p[2], 0.0);
        // 0.902 mm is just past the default 0.9 mm cap
        assert!(pulls_from_bend(&g, &l, &BendState::new(0.41, 0.0)).is_err());
    }

    #[test]
    fn pulls_between_two_tendons() {
        let p = pulls_from_bend(&geom(), &SafetyLimits::default(), &BendState::new(0.2, PI / 3.0)).unwrap();
        assert!((p[0] - 0.22).abs() < 1e-12);
        assert!((p[1] - 0.22).abs() < 1e-12);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn pull_limit_is_enforced() {
        let err = pulls_from_bend(&geom(), &SafetyLimits::default(), &BendState::new(0.5, 0.0)).unwrap_err();
        assert!(matches!(err, KinematicsError::PullLimitExceeded { index: 0, .. }));
    }

    #[test]
    fn moment_arm_from_single_anchor() {
        let fit = calibrate_moment_arm(&geom(), &[(0.0, 0.0), (0.9, 46.0)]).unwrap();
        // independent root of lateral(0.9 / d) = 46
        assert!((fit.moment_arm - 2.197069059007672).abs() < 1e-6, "{}", fit.moment_arm);
        assert!(fit.residual_rms < 1e-6);
    }

    #[test]
    fn moment_arm_recovers_synthetic_value() {
        let g = geom();
        let samples: Vec<(f64, f64)> = (1..=9)
            .map(|i| {
                let pull = i as f64 * 0.1;
                (pull, lateral_displacement(&g, pull / 2.0))
            })
            .collect();
        let fit = calibrate_moment_arm(&g, &samples).unwrap();
        assert!((fit.moment_arm - 2.0).abs() < 1e-6);
    }

    #[test]
    fn moment_arm_on_linear_trend() {
        let samples: Vec<(f64, f64)> = (1..=9)
            .map(|i| {
                let pull = i as f64 * 0.1;
                (pull, 5.0 + (pull - 0.1) * 41.0 / 0.8)
            })
            .collect();
        let fit = calibrate_moment_arm(&geom(), &samples).unwrap();
        // bounded scalar minimisation of the same objective done offline
        assert!((fit.moment_arm - 2.2183648809727243).abs() < 1e-6);
        assert!((2.0..=2.4).contains(&fit.moment_arm));
        assert!((fit.residual_rms - 0.23798696445162318).abs() < 1e-6);
    }

    #[test]
    fn moment_arm_rejects_bad_samples() {
        let g = geom();
        assert!(calibrate_moment_arm(&g, &[(0.5, 20.0)]).is_err());
        assert!(calibrate_moment_arm(&g, &[(0.5, 20.0), (0.5, 21.0)]).is_err());
        assert!(calibrate_moment_arm(&g, &[(0.0, 0.0), (0.0, 1.0)]).is_err());
        assert!(calibrate_moment_arm(&g, &[(-0.1, 0.0), (0.5, 1.0)]).is_err());
        // displacement so small that the optimal arm runs off the search range
        let err = calibrate_moment_arm(&g, &[(0.5, 1e-6), (0.9, 2e-6)]).unwrap_err();
        assert!(matches!(err, KinematicsError::DegenerateData(_)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ik_fk_round_trip(r in 0.0f64..65.0, angle in 0.0f64..TAU) {
                let g = geom();
                let l = SafetyLimits::default();
                let target = Vector2::new(r * angle.cos(), r * angle.sin());
                let bend = inverse_kinematics(&g, &l, &target).unwrap();
                let tip = forward_kinematics(&g, &bend, &Vector2::zeros());
                prop_assert!((tip.position.xy() - target).norm() < 1e-3 * 1e-3);
            }

            #[test]
            fn fk_is_rotationally_equivariant(theta in 0.0f64..0.6, phi in 0.0f64..TAU, delta in -PI..PI) {
                let g = geom();
                let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), delta);
                let a = forward_kinematics(&g, &BendState::new(theta, phi + delta), &Vector2::zeros());
                let b = forward_kinematics(&g, &BendState::new(theta, phi), &Vector2::zeros());
                prop_assert!((a.position - rot * b.position).norm() < 1e-9);
                prop_assert!((a.tangent - rot * b.tangent).norm() < 1e-12);
            }

            #[test]
            fn tangent_is_unit(theta in 0.0f64..0.6, phi in 0.0f64..TAU, ux in -2.0f64..2.0, uy in -2.0f64..2.0) {
                let tip = forward_kinematics(&geom(), &BendState::new(theta, phi), &Vector2::new(ux, uy));
                prop_assert!((tip.tangent.norm() - 1.0).abs() < 1e-12);
            }

            #[test]
            fn pulls_are_homogeneous(theta in 0.0f64..0.2, phi in 0.0f64..TAU) {
                let g = geom();
                let l = SafetyLimits::default();
                let a = pulls_from_bend(&g, &l, &BendState::new(theta, phi)).unwrap();
                let b = pulls_from_bend(&g, &l, &BendState::new(2.0 * theta, phi)).unwrap();
                for i in 0..3 {
                    if a[i] > 0.0 {
                        prop_assert!((b[i] - 2.0 * a[i]).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
