//! Constant-acceleration kinematics for agent-controlled vehicles and the
//! intelligent driver model for everyone else.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::VehicleState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite kinematic input: {0}")]
    NonFinite(&'static str),
    #[error("time step must be positive, got {0}")]
    InvalidTimeStep(f64),
    #[error("IDM parameter {name} must be positive, got {value}")]
    InvalidIdmParameter { name: &'static str, value: f64 },
}

/// Car-following parameters. Defaults are the highway values used for the
/// lane-change experiments; `max_brake` bounds emergency deceleration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmParams {
    /// Maximum acceleration, m/s².
    pub max_accel: f64,
    /// Desired speed, m/s.
    pub desired_speed: f64,
    /// Minimum standstill gap, m.
    pub min_gap: f64,
    pub accel_exponent: f64,
    /// Safe time headway, s.
    pub time_gap: f64,
    /// Comfortable deceleration, m/s².
    pub comfortable_decel: f64,
    /// Hard braking limit, m/s².
    pub max_brake: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            max_accel: 3.0,
            desired_speed: 20.0,
            min_gap: 2.0,
            accel_exponent: 4.0,
            time_gap: 1.0,
            comfortable_decel: 1.5,
            max_brake: 6.0,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let fields = [
            ("max_accel", self.max_accel),
            ("desired_speed", self.desired_speed),
            ("min_gap", self.min_gap),
            ("accel_exponent", self.accel_exponent),
            ("time_gap", self.time_gap),
            ("comfortable_decel", self.comfortable_decel),
            ("max_brake", self.max_brake),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(DynamicsError::InvalidIdmParameter { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdmAcceleration {
    pub accel: f64,
    /// Set when the gap is already non-positive and full braking was applied.
    pub emergency: bool,
}

/// Desired dynamic gap `s0 + max(0, v T + v Δv / (2 sqrt(a b)))`.
pub fn desired_gap(v: f64, delta_v: f64, params: &IdmParams) -> f64 {
    let interaction = v * delta_v / (2.0 * (params.max_accel * params.comfortable_decel).sqrt());
    params.min_gap + (v * params.time_gap + interaction).max(0.0)
}

/// IDM acceleration for a follower at speed `v`, approaching its leader at
/// `delta_v = v - v_leader`, with net gap `gap` (use `f64::INFINITY` on a free road).
pub fn idm_acceleration(v: f64, delta_v: f64, gap: f64, params: &IdmParams) -> IdmAcceleration {
    if gap <= 0.0 {
        return IdmAcceleration {
            accel: -params.max_brake,
            emergency: true,
        };
    }
    let free = (v.max(0.0) / params.desired_speed).powf(params.accel_exponent);
    let interaction = (desired_gap(v, delta_v, params) / gap).powi(2);
    let accel = params.max_accel * (1.0 - free - interaction);
    IdmAcceleration {
        accel: accel.clamp(-params.max_brake, params.max_accel),
        emergency: false,
    }
}

/// Gap at which a follower travelling at `v` behind an equally fast leader
/// neither accelerates nor brakes. `None` at or above the desired speed.
pub fn equilibrium_gap(v: f64, params: &IdmParams) -> Option<f64> {
    let free = 1.0 - (v / params.desired_speed).powf(params.accel_exponent);
    (free > 0.0).then(|| desired_gap(v, 0.0, params) / free.sqrt())
}

/// One constant-acceleration step. The applied accelerations are stored on the result.
pub fn integrate_kinematics(state: &VehicleState, ax: f64, ay: f64, dt: f64) -> Result<VehicleState, DynamicsError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(DynamicsError::InvalidTimeStep(dt));
    }
    if !state.is_finite() {
        return Err(DynamicsError::NonFinite("vehicle state"));
    }
    if !(ax.is_finite() && ay.is_finite()) {
        return Err(DynamicsError::NonFinite("acceleration"));
    }
    let half_dt2 = 0.5 * dt * dt;
    Ok(VehicleState {
        x: state.x + state.vx * dt + ax * half_dt2,
        y: state.y + state.vy * dt + ay * half_dt2,
        vx: state.vx + ax * dt,
        vy: state.vy + ay * dt,
        ax,
        ay,
        length: state.length,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisBounds {
    pub low: f64,
    pub high: f64,
}

impl AxisBounds {
    pub const fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    pub fn symmetric(limit: f64) -> Self {
        Self::new(-limit, limit)
    }

    pub fn clamp(&self, value: f64) -> f64 {
        value.clamp(self.low, self.high)
    }

    /// Maps `[-1, 1]` affinely onto `[low, high]`.
    pub fn denormalize(&self, unit: f64) -> f64 {
        self.low + 0.5 * (unit + 1.0) * (self.high - self.low)
    }

    pub fn span(&self) -> f64 {
        self.high - self.low
    }

    pub fn is_valid(&self) -> bool {
        self.low.is_finite() && self.high.is_finite() && self.low < self.high
    }
}

/// Component-wise clamp. NaN components collapse to the lower bound.
pub fn clamp_action(action: &[f64], bounds: &[AxisBounds]) -> Vec<f64> {
    debug_assert_eq!(action.len(), bounds.len());
    action
        .iter()
        .zip(bounds)
        .map(|(&a, b)| if a.is_nan() { b.low } else { b.clamp(a) })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimClock {
    dt: f64,
    step_index: u64,
}

impl SimClock {
    pub fn new(dt: f64) -> Result<Self, DynamicsError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(DynamicsError::InvalidTimeStep(dt));
        }
        Ok(Self { dt, step_index: 0 })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn elapsed(&self) -> f64 {
        self.step_index as f64 * self.dt
    }

    pub fn tick(&mut self) {
        self.step_index += 1;
    }

    pub fn reset(&mut self) {
        self.step_index = 0;
    }
}
