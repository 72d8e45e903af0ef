//! High-level locomotion command shared by the planners.

use nalgebra::{Rotation2, Vector2};
use serde::{Deserialize, Serialize};

/// Desired planar motion. `velocity` is expressed in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocomotionCommand {
    pub velocity: Vector2<f64>,
    pub yaw_rate: f64,
    pub body_height: f64,
}

impl LocomotionCommand {
    pub fn stand(body_height: f64) -> Self {
        Self {
            velocity: Vector2::zeros(),
            yaw_rate: 0.0,
            body_height,
        }
    }

    /// Build from a (forward, lateral) velocity in the heading frame at `yaw`.
    pub fn from_heading_frame(forward: f64, lateral: f64, yaw_rate: f64, body_height: f64, yaw: f64) -> Self {
        Self {
            velocity: Rotation2::new(yaw) * Vector2::new(forward, lateral),
            yaw_rate,
            body_height,
        }
    }
}
