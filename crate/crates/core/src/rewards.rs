//! Reward components for the lane-change task and their aggregation.
//!
//! Every component is a pure function of its inputs. The environment decides
//! which vehicles and pairs feed each term; this module only does the math.

use serde::{Deserialize, Serialize};

use crate::world::VehicleState;

/// Reward weights and thresholds. Field comments give the conventional symbol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardCoefficients {
    /// α: weight on forward progress of the ego, per metre.
    pub progress_weight: f64,
    /// β: constant per-step term of the safety reward.
    pub step_bonus: f64,
    /// c: magnitude of the collision penalty.
    pub crash_penalty: f64,
    /// w: penalty per triggered collision warning.
    pub warning_penalty: f64,
    /// b1: weight on jerk magnitude.
    pub jerk_weight: f64,
    /// b2: weight on heading change per step, per radian.
    pub yaw_weight: f64,
    /// κ: weight on fuel and emissions.
    pub fuel_weight: f64,
    /// ω: slope of the lateral term away from the centerline (negative).
    pub lateral_slope: f64,
    /// ϱ: curvature of the lateral term near the centerline.
    pub lateral_curvature: f64,
    /// ζ: lateral term at the vertex of the quadratic.
    pub lateral_peak: f64,
    /// θ_lat: offset of the quadratic's vertex from the centerline, m.
    pub lateral_center: f64,
    /// Half-width of the band around the centerline handled by the quadratic, m.
    pub lateral_band: f64,
    /// d0: minimum distance, m.
    pub min_distance: f64,
    /// a_s: extra braking a close follower must show over its leader, m/s².
    pub safety_margin: f64,
}

impl Default for RewardCoefficients {
    fn default() -> Self {
        Self {
            progress_weight: 0.1,
            step_bonus: -0.2,
            crash_penalty: 400.0,
            warning_penalty: 5.0,
            jerk_weight: 0.005,
            yaw_weight: 1.0,
            fuel_weight: 0.01,
            lateral_slope: -0.5,
            lateral_curvature: -1.0,
            lateral_peak: 0.0,
            lateral_center: 0.0,
            lateral_band: 0.5,
            min_distance: 2.0,
            safety_margin: 0.5,
        }
    }
}

impl RewardCoefficients {
    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.progress_weight,
            self.step_bonus,
            self.crash_penalty,
            self.warning_penalty,
            self.jerk_weight,
            self.yaw_weight,
            self.fuel_weight,
            self.lateral_slope,
            self.lateral_curvature,
            self.lateral_peak,
            self.lateral_center,
            self.lateral_band,
            self.min_distance,
            self.safety_margin,
        ];
        if !all.iter().all(|v| v.is_finite()) {
            return Err("reward coefficients must be finite".into());
        }
        if self.crash_penalty <= 0.0 || self.warning_penalty <= 0.0 {
            return Err("crash_penalty and warning_penalty must be positive".into());
        }
        if self.jerk_weight < 0.0 || self.yaw_weight < 0.0 || self.fuel_weight < 0.0 {
            return Err("jerk_weight, yaw_weight and fuel_weight must be non-negative".into());
        }
        if self.lateral_band <= 0.0 {
            return Err("lateral_band must be positive".into());
        }
        Ok(())
    }

    /// Jump between the quadratic and linear lateral branches at the band edge.
    pub fn lateral_branch_mismatch(&self) -> f64 {
        let edge = self.lateral_band;
        let quadratic = self.lateral_curvature * (edge - self.lateral_center).powi(2) + self.lateral_peak;
        let linear = self.lateral_slope * edge;
        (quadratic - linear).abs()
    }
}

/// Log-polynomial fuel-rate model: `ln F(v, a) = Σ_ij K[i][j] v^i a^j`,
/// with `F` in mL/s, `v` in m/s and `a` in m/s².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuelModelCoeffs {
    pub table: [[f64; 4]; 4],
    /// Upper clamp on the exponent to keep the rate finite.
    pub exponent_cap: f64,
}

impl Default for FuelModelCoeffs {
    /// Placeholder coefficients sized for a mid-size passenger car
    /// (about 0.3 mL/s idle, 0.5 mL/s cruising at 15 m/s).
    fn default() -> Self {
        Self {
            table: [
                [-1.2, 0.25, 0.02, 0.0],
                [0.03, 0.01, 0.0, 0.0],
                [3.0e-4, 0.0, 0.0, 0.0],
                [0.0, 0.0, 0.0, 0.0],
            ],
            exponent_cap: 5.0,
        }
    }
}

impl FuelModelCoeffs {
    pub fn validate(&self) -> Result<(), String> {
        if !self.table.iter().flatten().all(|k| k.is_finite()) || !self.exponent_cap.is_finite() {
            return Err("fuel coefficients must be finite".into());
        }
        Ok(())
    }

    /// Instantaneous rate and whether the exponent hit the cap.
    pub fn rate(&self, speed: f64, accel: f64) -> (f64, bool) {
        let mut exponent = 0.0;
        let mut v_pow = 1.0;
        for row in &self.table {
            let mut a_pow = 1.0;
            for k in row {
                exponent += k * v_pow * a_pow;
                a_pow *= accel;
            }
            v_pow *= speed;
        }
        if exponent > self.exponent_cap {
            (self.exponent_cap.exp(), true)
        } else {
            (exponent.exp(), false)
        }
    }
}

/// The five reward terms of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub safety: f64,
    pub warning: f64,
    pub comfort: f64,
    pub fuel: f64,
    pub lateral: f64,
}

impl RewardBreakdown {
    pub fn as_array(&self) -> [f64; 5] {
        [self.safety, self.warning, self.comfort, self.fuel, self.lateral]
    }

    pub fn add_assign(&mut self, other: &RewardBreakdown) {
        self.safety += other.safety;
        self.warning += other.warning;
        self.comfort += other.comfort;
        self.fuel += other.fuel;
        self.lateral += other.lateral;
    }
}

/// Sum of all components, accumulated in a fixed order.
pub fn total_reward(components: &RewardBreakdown) -> f64 {
    components.safety + components.warning + components.comfort + components.fuel + components.lateral
}

/// `-c` on collision, otherwise `α Σ Δx + β` over the step's integration substeps.
pub fn safety_reward(collision: bool, ego_advances: &[f64], coeffs: &RewardCoefficients) -> f64 {
    if collision {
        -coeffs.crash_penalty
    } else {
        coeffs.progress_weight * ego_advances.iter().sum::<f64>() + coeffs.step_bonus
    }
}

/// Projected lead-to-ego distance after `t` seconds of constant relative
/// motion, padded by the minimum distance `d0`.
pub fn target_gap_d_tar(lead: &VehicleState, ego: &VehicleState, t: f64, d0: f64) -> f64 {
    (lead.x - ego.x) + (lead.vx - ego.vx) * t + 0.5 * (lead.ax - ego.ax) * t * t + d0
}

/// One follower/leader pair as seen by the collision-check rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarningPair {
    /// Net gap at time t, m.
    pub gap: f64,
    pub follower_speed: f64,
    pub leader_speed: f64,
    pub follower_accel: f64,
    pub leader_accel: f64,
    /// Acceleration the follower applies over the coming step.
    pub follower_command: f64,
}

impl WarningPair {
    /// Whether the pair is inside the rule's trigger distance.
    pub fn is_close(&self, dt: f64, coeffs: &RewardCoefficients) -> bool {
        let closing = self.follower_speed - self.leader_speed;
        let closing_accel = self.follower_accel - self.leader_accel;
        self.gap <= coeffs.min_distance + closing * dt + 0.5 * closing_accel * dt * dt
    }

    /// A close follower must brake at least `a_s` harder than its leader.
    pub fn violates(&self, dt: f64, coeffs: &RewardCoefficients) -> bool {
        self.is_close(dt, coeffs) && self.follower_command > self.leader_accel - coeffs.safety_margin
    }
}

/// Returns `(-w * count, count)` over all violating pairs.
pub fn warning_penalty(pairs: &[WarningPair], dt: f64, coeffs: &RewardCoefficients) -> (f64, usize) {
    let count = pairs.iter().filter(|p| p.violates(dt, coeffs)).count();
    (-coeffs.warning_penalty * count as f64, count)
}

fn heading(state: &VehicleState) -> f64 {
    state.vy.atan2(state.vx)
}

fn wrap_angle(angle: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let wrapped = (angle + std::f64::consts::PI).rem_euclid(tau) - std::f64::consts::PI;
    if wrapped == -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        wrapped
    }
}

/// Penalty on jerk magnitude and heading change between consecutive states.
/// Heading uses the two-argument arctangent, so a stationary vehicle is fine.
pub fn comfort_reward(prev: &VehicleState, now: &VehicleState, dt: f64, coeffs: &RewardCoefficients) -> f64 {
    let jerk = (now.ax - prev.ax).hypot(now.ay - prev.ay) / dt;
    let yaw_change = wrap_angle(heading(now) - heading(prev));
    -coeffs.jerk_weight * jerk - coeffs.yaw_weight * yaw_change.abs()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuelOutcome {
    pub reward: f64,
    /// Fuel used over the step, summed over vehicles.
    pub total_fuel: f64,
    pub capped: bool,
}

/// `-κ T_F`, with `T_F` the fuel burnt by every listed vehicle over `dt`.
pub fn fuel_emissions_reward(
    vehicles: &[VehicleState],
    coeffs: &RewardCoefficients,
    fuel: &FuelModelCoeffs,
    dt: f64,
) -> FuelOutcome {
    let mut total_fuel = 0.0;
    let mut capped = false;
    for v in vehicles {
        let (rate, hit_cap) = fuel.rate(v.vx.max(0.0), v.ax);
        total_fuel += rate * dt;
        capped |= hit_cap;
    }
    FuelOutcome {
        reward: -coeffs.fuel_weight * total_fuel,
        total_fuel,
        capped,
    }
}

/// Centerline-tracking term. Inside the band (boundary inclusive) it is the
/// quadratic `ϱ (|d| - θ)² + ζ`; outside it is linear, `ω |d|`.
pub fn lateral_reward(y_ego: f64, target_centerline: f64, coeffs: &RewardCoefficients) -> f64 {
    let deviation = (y_ego - target_centerline).abs();
    if deviation <= coeffs.lateral_band {
        coeffs.lateral_curvature * (deviation - coeffs.lateral_center).powi(2) + coeffs.lateral_peak
    } else {
        coeffs.lateral_slope * deviation
    }
}

/// Worst-case magnitudes of every term other than the safety reward, used
/// to check that a collision always scores below any collision-free step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardEnvelope {
    pub max_warning_pairs: usize,
    /// Sum over controlled vehicles of the largest jerk each can produce, m/s³.
    pub max_total_jerk: f64,
    pub controlled_vehicles: usize,
    pub max_fuel_rate: f64,
    pub max_lateral_deviation: f64,
    /// Range of per-step ego advance reachable, m.
    pub min_advance: f64,
    pub max_advance: f64,
    pub dt: f64,
}

impl RewardEnvelope {
    fn lateral_candidates(&self, coeffs: &RewardCoefficients) -> [f64; 5] {
        let band = coeffs.lateral_band;
        let vertex = coeffs.lateral_center.clamp(0.0, band);
        let quad = |d: f64| coeffs.lateral_curvature * (d - coeffs.lateral_center).powi(2) + coeffs.lateral_peak;
        let far = self.max_lateral_deviation.max(band);
        [
            quad(0.0),
            quad(band),
            quad(vertex),
            coeffs.lateral_slope * band,
            coeffs.lateral_slope * far,
        ]
    }

    /// Upper bound on the total reward of a colliding step.
    pub fn best_crash_total(&self, coeffs: &RewardCoefficients) -> f64 {
        let best_lateral = self
            .lateral_candidates(coeffs)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        -coeffs.crash_penalty + best_lateral
    }

    /// Lower bound on the total reward of a collision-free step.
    pub fn worst_safe_total(&self, coeffs: &RewardCoefficients) -> f64 {
        let safety = (coeffs.progress_weight * self.min_advance).min(coeffs.progress_weight * self.max_advance)
            + coeffs.step_bonus;
        let warning = -coeffs.warning_penalty * self.max_warning_pairs as f64;
        let comfort = -coeffs.jerk_weight * self.max_total_jerk
            - coeffs.yaw_weight * std::f64::consts::PI * self.controlled_vehicles as f64;
        let fuel = -coeffs.fuel_weight * self.max_fuel_rate * self.dt * self.controlled_vehicles as f64;
        let lateral = self
            .lateral_candidates(coeffs)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        safety + warning + comfort + fuel + lateral
    }
}
