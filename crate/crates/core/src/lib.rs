//! Desk-scale simulator of a robot-based tele-echography system.

pub mod campaign;
pub mod kinematics;
pub mod netchannel;
pub mod phantom;
pub mod protocol;
pub mod scenario;
pub mod session;
pub mod stats;

pub use kinematics::{CableLengths, CableRig, FineStageLimits, MotionLimits, Pose, Workspace};
