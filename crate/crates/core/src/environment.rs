//! The lane-change MDP: reset, step, termination and the per-scenario action
//! interface that the trainers act through.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    clamp_action, idm_acceleration, integrate_kinematics, AxisBounds, DynamicsError, IdmParams, SimClock,
};
use crate::rewards::{
    comfort_reward, fuel_emissions_reward, lateral_reward, safety_reward, target_gap_d_tar, total_reward,
    warning_penalty, FuelModelCoeffs, RewardBreakdown, RewardCoefficients, RewardEnvelope, WarningPair,
};
use crate::world::{
    gap, observe, sample_scenario, CompositionMode, ControlMode, Fleet, InitialConditions, LaneGeometry,
    ScenarioInstance, StateVector, VehicleRole, VehicleState, WorldError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("action has {actual} components, scenario expects {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("step called on an episode that already ended ({0})")]
    EpisodeOver(Termination),
    #[error("step called before reset")]
    NotReset,
    #[error("invalid environment configuration: {0}")]
    Config(String),
}

/// Number of slots in the padded action layout `(ego_x, ego_y, lead, lag)`.
pub const ACTION_SLOTS: usize = 4;

/// Acceleration limits, m/s².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionBounds {
    pub ego_longitudinal: AxisBounds,
    pub ego_lateral: AxisBounds,
    /// Longitudinal limits for cooperating Lead/Lag vehicles.
    pub cooperative: AxisBounds,
}

impl Default for ActionBounds {
    fn default() -> Self {
        Self {
            ego_longitudinal: AxisBounds::symmetric(3.0),
            ego_lateral: AxisBounds::symmetric(4.0),
            cooperative: AxisBounds::symmetric(3.0),
        }
    }
}

impl ActionBounds {
    pub fn slot(&self, slot: usize) -> AxisBounds {
        match slot {
            0 => self.ego_longitudinal,
            1 => self.ego_lateral,
            _ => self.cooperative,
        }
    }
}

/// Which of the four padded action slots a scenario actually uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionLayout {
    pub mask: [bool; ACTION_SLOTS],
}

impl ActionLayout {
    pub fn for_scenario(scenario: &ScenarioInstance) -> Self {
        Self {
            mask: [true, true, scenario.lead_controlled(), scenario.lag_controlled()],
        }
    }

    pub fn dim(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn active_slots(&self) -> impl Iterator<Item = usize> + '_ {
        (0..ACTION_SLOTS).filter(|s| self.mask[*s])
    }

    pub fn bounds(&self, bounds: &ActionBounds) -> Vec<AxisBounds> {
        self.active_slots().map(|s| bounds.slot(s)).collect()
    }

    /// Maps a padded action in `[-1, 1]` to physical accelerations for the
    /// active slots only.
    pub fn denormalize(&self, padded: &[f64; ACTION_SLOTS], bounds: &ActionBounds) -> Vec<f64> {
        self.active_slots()
            .map(|s| bounds.slot(s).denormalize(padded[s].clamp(-1.0, 1.0)))
            .collect()
    }
}

/// `2 + |agent-controlled ∩ {Lead, Lag}|`.
pub fn action_dim(scenario: &ScenarioInstance) -> usize {
    ActionLayout::for_scenario(scenario).dim()
}

/// Physical and reward settings shared by every episode of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub geometry: LaneGeometry,
    pub initial: InitialConditions,
    pub idm: IdmParams,
    pub rewards: RewardCoefficients,
    pub fuel: FuelModelCoeffs,
    pub action_bounds: ActionBounds,
    /// Probability that a human-driven Lead/Lag adopts the cooperative recommendation.
    pub adoption_prob: f64,
    /// Simulation step, s.
    pub dt: f64,
    /// Lateral extent used to decide which lanes the ego occupies, m.
    pub vehicle_width: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            geometry: LaneGeometry::default(),
            initial: InitialConditions::default(),
            idm: IdmParams::default(),
            rewards: RewardCoefficients::default(),
            fuel: FuelModelCoeffs::default(),
            action_bounds: ActionBounds::default(),
            adoption_prob: 0.5,
            dt: 0.1,
            vehicle_width: 1.8,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        self.geometry.validate()?;
        self.idm.validate()?;
        self.rewards.validate().map_err(EnvError::Config)?;
        self.fuel.validate().map_err(EnvError::Config)?;
        if !(0.0..=1.0).contains(&self.adoption_prob) {
            return Err(WorldError::InvalidProbability(self.adoption_prob).into());
        }
        SimClock::new(self.dt)?;
        if !(self.vehicle_width > 0.0 && self.vehicle_width < self.geometry.lane_width) {
            return Err(EnvError::Config(format!(
                "vehicle_width must lie in (0, lane_width), got {}",
                self.vehicle_width
            )));
        }
        let b = &self.action_bounds;
        if ![b.ego_longitudinal, b.ego_lateral, b.cooperative]
            .iter()
            .all(AxisBounds::is_valid)
        {
            return Err(EnvError::Config("action bounds need finite low < high".into()));
        }
        Ok(())
    }

    /// Worst-case reward magnitudes reachable within the action box, for the
    /// crash-dominance check. Speeds are bounded by what `max_steps` of
    /// saturated acceleration can reach from the fastest reset state.
    pub fn reward_envelope(&self, max_steps: usize) -> RewardEnvelope {
        let b = &self.action_bounds;
        let diag = |x: AxisBounds, y: AxisBounds| x.span().hypot(y.span());
        let dt = self.dt;
        let horizon = max_steps as f64 * dt;
        let v_top = self.initial.flow_speed + self.initial.noise.v + b.ego_longitudinal.high.max(0.0) * horizon;
        let v_bottom = self.initial.flow_speed + b.ego_longitudinal.low.min(0.0) * horizon;
        let a_top = b.ego_longitudinal.high.max(b.cooperative.high);
        let (fuel_rate, _) = (0..=40)
            .flat_map(|i| (0..=12).map(move |j| (i, j)))
            .map(|(i, j)| {
                let v = v_top * i as f64 / 40.0;
                let a = b.cooperative.low.min(b.ego_longitudinal.low)
                    + (a_top - b.cooperative.low.min(b.ego_longitudinal.low)) * j as f64 / 12.0;
                self.fuel.rate(v, a)
            })
            .fold((0.0f64, false), |acc, r| (acc.0.max(r.0), false));
        RewardEnvelope {
            // Ego in both lanes: pre/ego in its own lane, four followers in the target lane.
            max_warning_pairs: 5,
            max_total_jerk: (diag(b.ego_longitudinal, b.ego_lateral) + 2.0 * b.cooperative.span()) / dt,
            controlled_vehicles: 3,
            max_fuel_rate: fuel_rate.max(self.fuel.exponent_cap.exp()),
            max_lateral_deviation: self.geometry.road_width(),
            min_advance: v_bottom * dt + 0.5 * b.ego_longitudinal.low * dt * dt,
            max_advance: v_top * dt + 0.5 * b.ego_longitudinal.high * dt * dt,
            dt,
        }
    }
}

/// Per-episode settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub max_steps: usize,
    /// Lateral distance to the target centerline that counts as arrived, m.
    pub success_lateral_tol: f64,
    /// Consecutive arrived steps required for success.
    pub success_hold_steps: usize,
    pub composition_mode: CompositionMode,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_steps: 200,
            success_lateral_tol: 0.1,
            success_hold_steps: 3,
            composition_mode: CompositionMode::default(),
            seed: 0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.max_steps == 0 {
            return Err(EnvError::Config("max_steps must be positive".into()));
        }
        if !(self.success_lateral_tol > 0.0) {
            return Err(EnvError::Config("success_lateral_tol must be positive".into()));
        }
        if self.success_hold_steps == 0 {
            return Err(EnvError::Config("success_hold_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Running,
    Success,
    Crash,
    OutOfBounds,
    Timeout,
}

impl Termination {
    pub fn is_over(self) -> bool {
        self != Termination::Running
    }

    /// Whether the value of the next state must not be bootstrapped.
    /// Timeouts are truncations, not terminal states.
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            Termination::Success | Termination::Crash | Termination::OutOfBounds
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Termination::Running => "running",
            Termination::Success => "success",
            Termination::Crash => "crash",
            Termination::OutOfBounds => "out_of_bounds",
            Termination::Timeout => "timeout",
        }
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: StateVector,
    pub reward: f64,
    pub breakdown: RewardBreakdown,
    pub terminated: Termination,
    pub warnings_triggered: usize,
    /// Projected ego-to-lead distance over the elapsed maneuver time.
    pub d_tar: f64,
    /// Set when the fuel model's exponent cap was hit this step.
    pub fuel_capped: bool,
}

/// One row of a recorded trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub episode: usize,
    pub step: u64,
    pub role: VehicleRole,
    pub state: VehicleState,
    pub breakdown: RewardBreakdown,
    pub termination: Termination,
}

pub const TRAJECTORY_HEADER: &str =
    "episode,step,role,x,y,vx,vy,ax,ay,r_safety,r_warning,r_comfort,r_fuel,r_lateral,termination";

impl TrajectoryRow {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let s = &self.state;
        let b = &self.breakdown;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.episode,
            self.step,
            self.role,
            s.x,
            s.y,
            s.vx,
            s.vy,
            s.ax,
            s.ay,
            b.safety,
            b.warning,
            b.comfort,
            b.fuel,
            b.lateral,
            self.termination
        )
    }
}

/// A single stateful episode runner.
#[derive(Debug, Clone)]
pub struct Environment {
    config: EnvConfig,
    episode: EpisodeConfig,
    scenario: Option<ScenarioInstance>,
    fleet: Fleet,
    clock: SimClock,
    status: Termination,
    hold: usize,
    recording: Option<(usize, Vec<TrajectoryRow>)>,
}

impl Environment {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(Self {
            clock: SimClock::new(config.dt)?,
            config,
            episode: EpisodeConfig::default(),
            scenario: None,
            fleet: Fleet::new(),
            status: Termination::Running,
            hold: 0,
            recording: None,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn scenario(&self) -> Option<&ScenarioInstance> {
        self.scenario.as_ref()
    }

    pub fn fleet(&self) -> &Fleet {
        &self.fleet
    }

    pub fn status(&self) -> Termination {
        self.status
    }

    pub fn step_index(&self) -> u64 {
        self.clock.step_index()
    }

    /// Starts recording trajectory rows for the next episode, tagged `episode`.
    pub fn record_next_episode(&mut self, episode: usize) {
        self.recording = Some((episode, Vec::new()));
    }

    /// Stops recording and hands back the rows collected so far.
    pub fn take_recording(&mut self) -> Vec<TrajectoryRow> {
        self.recording.take().map(|(_, rows)| rows).unwrap_or_default()
    }

    pub fn reset(&mut self, episode: &EpisodeConfig) -> Result<(StateVector, ScenarioInstance), EnvError> {
        episode.validate()?;
        let scenario = sample_scenario(
            episode.seed,
            self.config.adoption_prob,
            &self.config.initial,
            &self.config.geometry,
            episode.composition_mode,
        )?;
        self.install(*episode, scenario.clone())?;
        Ok((observe(&self.fleet)?, scenario))
    }

    /// Starts an episode from an explicitly constructed scenario.
    pub fn reset_to(&mut self, episode: &EpisodeConfig, scenario: ScenarioInstance) -> Result<StateVector, EnvError> {
        episode.validate()?;
        self.install(*episode, scenario)?;
        Ok(observe(&self.fleet)?)
    }

    fn install(&mut self, episode: EpisodeConfig, scenario: ScenarioInstance) -> Result<(), EnvError> {
        if !scenario.fleet.is_complete() {
            for role in VehicleRole::ALL {
                scenario.fleet.get(role)?;
            }
        }
        self.episode = episode;
        self.fleet = scenario.fleet.clone();
        self.scenario = Some(scenario);
        self.clock.reset();
        self.status = Termination::Running;
        self.hold = 0;
        self.record_rows(&RewardBreakdown::default());
        Ok(())
    }

    pub fn action_layout(&self) -> Result<ActionLayout, EnvError> {
        self.scenario
            .as_ref()
            .map(ActionLayout::for_scenario)
            .ok_or(EnvError::NotReset)
    }

    fn record_rows(&mut self, breakdown: &RewardBreakdown) {
        let step = self.clock.step_index();
        let status = self.status;
        if let Some((episode, rows)) = self.recording.as_mut() {
            for v in self.fleet.iter() {
                rows.push(TrajectoryRow {
                    episode: *episode,
                    step,
                    role: v.role,
                    state: v.state,
                    breakdown: *breakdown,
                    termination: status,
                });
            }
        }
    }

    fn lane_of(&self, v: &VehicleState) -> Option<usize> {
        self.config.geometry.lane_of(v.y)
    }

    /// Vehicles sharing `lane`, ego included when its body overlaps the lane,
    /// sorted front-to-back by rear bumper then role.
    fn lane_members(&self, fleet: &Fleet, lane: usize) -> Vec<(VehicleRole, VehicleState)> {
        let g = &self.config.geometry;
        let mut members: Vec<_> = fleet
            .iter()
            .filter(|v| match v.role {
                VehicleRole::Ego => g.occupies(v.state.y, self.config.vehicle_width, lane),
                _ => self.lane_of(&v.state) == Some(lane),
            })
            .map(|v| (v.role, v.state))
            .collect();
        members.sort_by(|a, b| a.1.x.total_cmp(&b.1.x).then(a.0.cmp(&b.0)));
        members
    }

    fn ego_lanes(&self, ego: &VehicleState) -> Vec<usize> {
        let g = &self.config.geometry;
        (0..g.lane_count)
            .filter(|l| g.occupies(ego.y, self.config.vehicle_width, *l))
            .collect()
    }

    /// IDM acceleration towards the nearest vehicle ahead in the same lane.
    /// The ego counts as in whichever lane its center is in.
    fn idm_command(&self, fleet: &Fleet, role: VehicleRole, me: &VehicleState) -> f64 {
        let lane = self.lane_of(me);
        let leader = fleet
            .iter()
            .filter(|v| v.role != role && v.state.x > me.x && self.lane_of(&v.state) == lane)
            .min_by(|a, b| a.state.x.total_cmp(&b.state.x));
        let (s, dv) = match leader {
            Some(l) => (gap(&l.state, me), me.vx - l.state.vx),
            None => (f64::INFINITY, 0.0),
        };
        let a = idm_acceleration(me.vx, dv, s, &self.config.idm).accel;
        // Human drivers stop rather than reverse.
        a.max(-me.vx.max(0.0) / self.config.dt)
    }

    fn collision(&self, fleet: &Fleet) -> bool {
        (0..self.config.geometry.lane_count).any(|lane| {
            self.lane_members(fleet, lane)
                .windows(2)
                .any(|w| gap(&w[1].1, &w[0].1) <= 0.0)
        })
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        let scenario = self.scenario.as_ref().ok_or(EnvError::NotReset)?;
        if self.status.is_over() {
            return Err(EnvError::EpisodeOver(self.status));
        }
        let layout = ActionLayout::for_scenario(scenario);
        if action.len() != layout.dim() {
            return Err(EnvError::DimensionMismatch {
                expected: layout.dim(),
                actual: action.len(),
            });
        }
        let target_centerline = scenario.target_centerline();
        let clamped = clamp_action(action, &layout.bounds(&self.config.action_bounds));
        let mut padded = [0.0; ACTION_SLOTS];
        for (slot, value) in layout.active_slots().zip(&clamped) {
            padded[slot] = *value;
        }

        let dt = self.config.dt;
        let pre = self.fleet.clone();

        // Commands for the coming step, from the pre-step world.
        let mut commands = [(0.0, 0.0); 6];
        for v in pre.iter() {
            commands[v.role.index()] = match (v.role, v.mode) {
                (VehicleRole::Ego, _) => (padded[0], padded[1]),
                (VehicleRole::Lead, ControlMode::AgentControlled) => (padded[2], 0.0),
                (VehicleRole::Lag, ControlMode::AgentControlled) => (padded[3], 0.0),
                (role, _) => (self.idm_command(&pre, role, &v.state), 0.0),
            };
        }

        // Collision-check rule on every follower/leader pair around the ego.
        let ego_pre = *pre.state(VehicleRole::Ego)?;
        let mut pairs = Vec::new();
        for lane in self.ego_lanes(&ego_pre) {
            for w in self.lane_members(&pre, lane).windows(2) {
                let (f_role, f) = w[0];
                let (_, l) = w[1];
                pairs.push(WarningPair {
                    gap: gap(&l, &f),
                    follower_speed: f.vx,
                    leader_speed: l.vx,
                    follower_accel: f.ax,
                    leader_accel: l.ax,
                    follower_command: commands[f_role.index()].0,
                });
            }
        }
        let coeffs = self.config.rewards;
        let (warning, warnings_triggered) = warning_penalty(&pairs, dt, &coeffs);

        for v in self.fleet.iter_mut() {
            let (ax, ay) = commands[v.role.index()];
            v.state = integrate_kinematics(&v.state, ax, ay, dt)?;
        }
        self.clock.tick();

        let ego_now = *self.fleet.state(VehicleRole::Ego)?;
        let crashed = self.collision(&self.fleet);
        let off_road = !self.config.geometry.contains(ego_now.x, ego_now.y);

        let mut comfort = 0.0;
        let mut controlled = Vec::with_capacity(3);
        for v in self.fleet.iter().filter(|v| v.mode == ControlMode::AgentControlled) {
            let before = pre.state(v.role)?;
            comfort += comfort_reward(before, &v.state, dt, &coeffs);
            controlled.push(v.state);
        }
        let fuel = fuel_emissions_reward(&controlled, &coeffs, &self.config.fuel, dt);
        let breakdown = RewardBreakdown {
            // Leaving the road is scored like a collision with its edge.
            safety: safety_reward(crashed || off_road, &[ego_now.x - ego_pre.x], &coeffs),
            warning,
            comfort,
            fuel: fuel.reward,
            lateral: lateral_reward(ego_now.y, target_centerline, &coeffs),
        };

        if (ego_now.y - target_centerline).abs() <= self.episode.success_lateral_tol {
            self.hold += 1;
        } else {
            self.hold = 0;
        }
        self.status = if crashed {
            Termination::Crash
        } else if off_road {
            Termination::OutOfBounds
        } else if self.hold >= self.episode.success_hold_steps {
            Termination::Success
        } else if self.clock.step_index() >= self.episode.max_steps as u64 {
            Termination::Timeout
        } else {
            Termination::Running
        };
        self.record_rows(&breakdown);

        let lead_now = self.fleet.state(VehicleRole::Lead)?;
        Ok(StepOutcome {
            next_state: observe(&self.fleet)?,
            reward: total_reward(&breakdown),
            breakdown,
            terminated: self.status,
            warnings_triggered,
            d_tar: target_gap_d_tar(lead_now, &ego_now, self.clock.elapsed(), coeffs.min_distance),
            fuel_capped: fuel.capped,
        })
    }
}
