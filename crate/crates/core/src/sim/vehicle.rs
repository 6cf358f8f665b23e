use serde::{Deserialize, Serialize};

use super::geometry::{wrap_angle, Vec2};
use crate::error::{Error, Result};

/// Steering saturation of the vehicle, rad (40°).
pub const MAX_STEER: f64 = 0.6981;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    /// Heading in (-π, π].
    pub theta: f64,
    /// Forward speed, m/s.
    pub v: f64,
    /// Yaw rate applied during the most recent step, rad/s.
    pub omega: f64,
}

impl VehicleState {
    pub fn at_rest(x: f64, y: f64, theta: f64) -> Self {
        VehicleState {
            x,
            y,
            theta: wrap_angle(theta),
            v: 0.0,
            omega: 0.0,
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    fn is_finite(&self) -> bool {
        [self.x, self.y, self.theta, self.v, self.omega]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlCommand {
    /// Steering angle, rad; positive turns left.
    pub steer: f64,
    /// Commanded speed, m/s.
    pub speed: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Wheelbase L, m.
    pub wheelbase: f64,
    /// Time constant of the first-order speed response, s.
    pub speed_tau: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            wheelbase: 0.33,
            speed_tau: 0.2,
        }
    }
}

/// One forward-Euler step of the kinematic Ackermann model.
///
/// Heading integrates `v / L * tan(steer)` with the exact tangent; speed
/// relaxes towards the command with time constant `speed_tau`.
pub fn step_dynamics(
    s: &VehicleState,
    u: &ControlCommand,
    params: &VehicleParams,
    dt: f64,
) -> Result<VehicleState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Contract(format!("time step must be positive, got {dt}")));
    }
    if !s.is_finite() || !u.steer.is_finite() || !u.speed.is_finite() {
        return Err(Error::Contract(format!("non-finite state or command: {s:?} {u:?}")));
    }
    if u.steer.abs() > MAX_STEER + 1e-12 {
        return Err(Error::Contract(format!(
            "steering {} exceeds the ±{MAX_STEER} rad limit",
            u.steer
        )));
    }
    if u.speed < 0.0 {
        return Err(Error::Contract(format!("negative speed command {}", u.speed)));
    }
    let yaw_rate = s.v / params.wheelbase * u.steer.tan();
    let gain = (dt / params.speed_tau).min(1.0);
    Ok(VehicleState {
        x: s.x + dt * s.v * s.theta.cos(),
        y: s.y + dt * s.v * s.theta.sin(),
        theta: wrap_angle(s.theta + dt * yaw_rate),
        v: (s.v + gain * (u.speed - s.v)).max(0.0),
        omega: yaw_rate,
    })
}
