//! Digital twin and control stack for a hybrid tendon/electrothermal robotic
//! fiber.

pub mod calibration;
pub mod config;
pub mod geometry;
pub mod kinematics;
pub mod numeric;
pub mod planner;
pub mod scenario;
pub mod teleop;
pub mod thermal;
pub mod twin;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/kinematics.md")]
    mod kinematics {}
    #[doc = include_str!("../../../book/src/thermal.md")]
    mod thermal {}
    #[doc = include_str!("../../../book/src/planning.md")]
    mod planning {}
    #[doc = include_str!("../../../book/src/twin.md")]
    mod twin {}
    #[doc = include_str!("../../../book/src/teleop.md")]
    mod teleop {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
}
