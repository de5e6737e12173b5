//! Road geometry, the six-vehicle cast around a lane change, scenario
//! sampling, and the fixed 16-slot observation layout.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("adoption probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
    #[error("invalid lane geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid initial conditions: {0}")]
    InvalidInitialConditions(String),
    #[error("{first} and {second} overlap in the nominal layout ({distance} m apart, vehicle length {length} m)")]
    OverlappingVehicles {
        first: VehicleRole,
        second: VehicleRole,
        distance: f64,
        length: f64,
    },
    #[error("world has no {0} vehicle")]
    MissingRole(VehicleRole),
}

/// Straight multi-lane road. Lane `k` spans `[k * lane_width, (k + 1) * lane_width]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaneGeometry {
    pub road_length: f64,
    pub lane_width: f64,
    pub lane_count: usize,
}

impl Default for LaneGeometry {
    fn default() -> Self {
        Self {
            road_length: 150.0,
            lane_width: 3.75,
            lane_count: 2,
        }
    }
}

impl LaneGeometry {
    pub fn validate(&self) -> Result<(), WorldError> {
        if !(self.road_length.is_finite() && self.road_length > 0.0) {
            return Err(WorldError::InvalidGeometry(format!(
                "road_length must be positive, got {}",
                self.road_length
            )));
        }
        if !(self.lane_width.is_finite() && self.lane_width > 0.0) {
            return Err(WorldError::InvalidGeometry(format!(
                "lane_width must be positive, got {}",
                self.lane_width
            )));
        }
        if self.lane_count != 2 {
            return Err(WorldError::InvalidGeometry(format!(
                "only two-lane roads are modelled, got {} lanes",
                self.lane_count
            )));
        }
        Ok(())
    }

    pub fn centerline(&self, lane: usize) -> f64 {
        self.lane_width * (lane as f64 + 0.5)
    }

    pub fn centerlines(&self) -> Vec<f64> {
        (0..self.lane_count).map(|k| self.centerline(k)).collect()
    }

    pub fn road_width(&self) -> f64 {
        self.lane_width * self.lane_count as f64
    }

    /// Lane whose centerline is nearest to `y`; a point exactly on a lane
    /// boundary belongs to the lower lane. `None` off the road.
    pub fn lane_of(&self, y: f64) -> Option<usize> {
        if !(0.0..=self.road_width()).contains(&y) {
            return None;
        }
        let lane = (y / self.lane_width).ceil() as usize;
        Some(lane.saturating_sub(1).min(self.lane_count - 1))
    }

    /// Whether a body of lateral extent `width` centred at `y` overlaps lane `lane`.
    pub fn occupies(&self, y: f64, width: f64, lane: usize) -> bool {
        let low = lane as f64 * self.lane_width;
        let high = low + self.lane_width;
        y - 0.5 * width < high && y + 0.5 * width > low
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..=self.road_length).contains(&x) && (0.0..=self.road_width()).contains(&y)
    }
}

/// Kinematic state of one vehicle. `x` is the front-bumper position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub ay: f64,
    pub length: f64,
}

impl VehicleState {
    pub fn at(x: f64, y: f64, vx: f64, length: f64) -> Self {
        Self {
            x,
            y,
            vx,
            vy: 0.0,
            ax: 0.0,
            ay: 0.0,
            length,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.vx, self.vy, self.ax, self.ay, self.length]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Net bumper-to-bumper distance from `follower` to `leader`; negative on overlap.
pub fn gap(leader: &VehicleState, follower: &VehicleState) -> f64 {
    leader.x - follower.x - leader.length
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleRole {
    Ego,
    Lead,
    Lag,
    Pre,
    Sur1,
    Sur2,
}

impl VehicleRole {
    pub const ALL: [VehicleRole; 6] = [
        VehicleRole::Ego,
        VehicleRole::Lead,
        VehicleRole::Lag,
        VehicleRole::Pre,
        VehicleRole::Sur1,
        VehicleRole::Sur2,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            VehicleRole::Ego => "ego",
            VehicleRole::Lead => "lead",
            VehicleRole::Lag => "lag",
            VehicleRole::Pre => "pre",
            VehicleRole::Sur1 => "sur1",
            VehicleRole::Sur2 => "sur2",
        }
    }
}

impl fmt::Display for VehicleRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlMode {
    /// Executes the accelerations chosen by the learning agent.
    AgentControlled,
    /// Follows the intelligent driver model.
    IdmControlled,
}

/// Vehicle types of the target-lane leader and follower, in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    CavCav,
    HvCav,
    CavHv,
    HvHv,
}

impl Composition {
    pub const ALL: [Composition; 4] = [
        Composition::CavCav,
        Composition::HvCav,
        Composition::CavHv,
        Composition::HvHv,
    ];

    pub fn lead_is_cav(self) -> bool {
        matches!(self, Composition::CavCav | Composition::CavHv)
    }

    pub fn lag_is_cav(self) -> bool {
        matches!(self, Composition::CavCav | Composition::HvCav)
    }

    /// 1-based sub-scenario number.
    pub fn sub_scenario(self) -> usize {
        self as usize + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Composition::CavCav => "cav_cav",
            Composition::HvCav => "hv_cav",
            Composition::CavHv => "cav_hv",
            Composition::HvHv => "hv_hv",
        }
    }
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Either a composition pinned for the whole run or a uniform draw per episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CompositionMode {
    Fixed(Composition),
    Mixed,
}

impl Default for CompositionMode {
    fn default() -> Self {
        CompositionMode::Fixed(Composition::CavCav)
    }
}

impl TryFrom<String> for CompositionMode {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<CompositionMode> for String {
    fn from(mode: CompositionMode) -> Self {
        mode.to_string()
    }
}

impl std::str::FromStr for CompositionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "mixed" {
            return Ok(CompositionMode::Mixed);
        }
        Composition::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .map(CompositionMode::Fixed)
            .ok_or_else(|| format!("unknown composition {s:?}; expected cav_cav, hv_cav, cav_hv, hv_hv or mixed"))
    }
}

impl fmt::Display for CompositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompositionMode::Fixed(c) => write!(f, "{c}"),
            CompositionMode::Mixed => f.write_str("mixed"),
        }
    }
}

/// Uniform reset perturbations, each drawn from `[0, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResetNoise {
    pub enabled: bool,
    pub x: f64,
    pub y: f64,
    pub v: f64,
}

impl Default for ResetNoise {
    fn default() -> Self {
        Self {
            enabled: true,
            x: 1.0,
            y: 0.5,
            v: 2.0,
        }
    }
}

/// Nominal, unperturbed traffic layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialConditions {
    pub ego_x: f64,
    pub ego_lane: usize,
    pub target_lane: usize,
    /// Leader-to-follower spacing in the traffic stream.
    pub spacing: f64,
    pub flow_speed: f64,
    pub vehicle_length: f64,
    pub noise: ResetNoise,
}

impl Default for InitialConditions {
    fn default() -> Self {
        Self {
            ego_x: 60.0,
            ego_lane: 0,
            target_lane: 1,
            spacing: 30.0,
            flow_speed: 15.0,
            vehicle_length: 5.0,
            noise: ResetNoise::default(),
        }
    }
}

impl InitialConditions {
    fn validate(&self, geometry: &LaneGeometry) -> Result<(), WorldError> {
        let bad = |msg: String| Err(WorldError::InvalidInitialConditions(msg));
        if self.ego_lane >= geometry.lane_count || self.target_lane >= geometry.lane_count {
            return bad("lane index outside the road".into());
        }
        if self.ego_lane == self.target_lane {
            return bad("target lane must differ from the ego lane".into());
        }
        if !(self.vehicle_length.is_finite() && self.vehicle_length > 0.0) {
            return bad(format!("vehicle_length must be positive, got {}", self.vehicle_length));
        }
        if !(self.spacing.is_finite() && self.spacing > 0.0) {
            return bad(format!("spacing must be positive, got {}", self.spacing));
        }
        if !(self.flow_speed.is_finite() && self.flow_speed >= 0.0) {
            return bad(format!("flow_speed must be non-negative, got {}", self.flow_speed));
        }
        if !(0.0..=geometry.road_length).contains(&self.ego_x) {
            return bad(format!("ego_x {} is off the road", self.ego_x));
        }
        let n = self.noise;
        if ![n.x, n.y, n.v].iter().all(|r| r.is_finite() && *r >= 0.0) {
            return bad("noise ranges must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Nominal positions of every role: Lead and Lag straddle the ego's
    /// longitudinal position in the target lane, Pre sits one spacing ahead
    /// of the ego, Sur1 and Sur2 one spacing beyond Lead and behind Lag.
    pub fn nominal_layout(&self, geometry: &LaneGeometry) -> [(VehicleRole, VehicleState); 6] {
        let own = geometry.centerline(self.ego_lane);
        let target = geometry.centerline(self.target_lane);
        let v = self.flow_speed;
        let len = self.vehicle_length;
        let lead_x = self.ego_x + 0.5 * self.spacing;
        let lag_x = self.ego_x - 0.5 * self.spacing;
        [
            (VehicleRole::Ego, VehicleState::at(self.ego_x, own, v, len)),
            (VehicleRole::Lead, VehicleState::at(lead_x, target, v, len)),
            (VehicleRole::Lag, VehicleState::at(lag_x, target, v, len)),
            (
                VehicleRole::Pre,
                VehicleState::at(self.ego_x + self.spacing, own, v, len),
            ),
            (
                VehicleRole::Sur1,
                VehicleState::at(lead_x + self.spacing, target, v, len),
            ),
            (
                VehicleRole::Sur2,
                VehicleState::at(lag_x - self.spacing, target, v, len),
            ),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vehicle {
    pub role: VehicleRole,
    pub mode: ControlMode,
    pub state: VehicleState,
}

/// Role-indexed vehicle table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Fleet {
    slots: [Option<Vehicle>; 6],
}

impl Fleet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, vehicle: Vehicle) {
        self.slots[vehicle.role.index()] = Some(vehicle);
    }

    pub fn remove(&mut self, role: VehicleRole) -> Option<Vehicle> {
        self.slots[role.index()].take()
    }

    pub fn get(&self, role: VehicleRole) -> Result<&Vehicle, WorldError> {
        self.slots[role.index()].as_ref().ok_or(WorldError::MissingRole(role))
    }

    pub fn get_mut(&mut self, role: VehicleRole) -> Result<&mut Vehicle, WorldError> {
        self.slots[role.index()].as_mut().ok_or(WorldError::MissingRole(role))
    }

    pub fn state(&self, role: VehicleRole) -> Result<&VehicleState, WorldError> {
        self.get(role).map(|v| &v.state)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vehicle> {
        self.slots.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Vehicle> {
        self.slots.iter_mut().flatten()
    }

    pub fn is_complete(&self) -> bool {
        self.slots.iter().all(Option::is_some)
    }
}

/// Whether each human-driven target-lane vehicle accepted the cooperative
/// recommendation. `None` for vehicles that are CAVs to begin with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Adoption {
    pub lead: Option<bool>,
    pub lag: Option<bool>,
}

/// A fully sampled episode start. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioInstance {
    pub composition: Composition,
    pub adoption: Adoption,
    pub fleet: Fleet,
    pub geometry: LaneGeometry,
    pub ego_lane: usize,
    pub target_lane: usize,
    pub rng_seed: u64,
}

impl ScenarioInstance {
    pub fn lead_controlled(&self) -> bool {
        self.composition.lead_is_cav() || self.adoption.lead == Some(true)
    }

    pub fn lag_controlled(&self) -> bool {
        self.composition.lag_is_cav() || self.adoption.lag == Some(true)
    }

    pub fn target_centerline(&self) -> f64 {
        self.geometry.centerline(self.target_lane)
    }

    pub fn observe(&self) -> Result<StateVector, WorldError> {
        observe(&self.fleet)
    }
}

/// Draws one episode start: composition, per-HV adoption with probability
/// `adoption_prob`, and uniform reset noise on every vehicle.
pub fn sample_scenario(
    seed: u64,
    adoption_prob: f64,
    base: &InitialConditions,
    geometry: &LaneGeometry,
    mode: CompositionMode,
) -> Result<ScenarioInstance, WorldError> {
    if !(0.0..=1.0).contains(&adoption_prob) {
        return Err(WorldError::InvalidProbability(adoption_prob));
    }
    geometry.validate()?;
    base.validate(geometry)?;
    let layout = base.nominal_layout(geometry);
    check_nominal_overlap(&layout, geometry)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let composition = match mode {
        CompositionMode::Fixed(c) => c,
        CompositionMode::Mixed => Composition::ALL[rng.gen_range(0..Composition::ALL.len())],
    };
    let mut adopt = |is_cav: bool| (!is_cav).then(|| rng.gen::<f64>() < adoption_prob);
    let adoption = Adoption {
        lead: adopt(composition.lead_is_cav()),
        lag: adopt(composition.lag_is_cav()),
    };

    let lead_agent = composition.lead_is_cav() || adoption.lead == Some(true);
    let lag_agent = composition.lag_is_cav() || adoption.lag == Some(true);
    let mut fleet = Fleet::new();
    for (role, mut state) in layout {
        if base.noise.enabled {
            state.x += rng.gen::<f64>() * base.noise.x;
            state.y += rng.gen::<f64>() * base.noise.y;
            state.vx += rng.gen::<f64>() * base.noise.v;
        }
        let agent = match role {
            VehicleRole::Ego => true,
            VehicleRole::Lead => lead_agent,
            VehicleRole::Lag => lag_agent,
            _ => false,
        };
        let mode = if agent {
            ControlMode::AgentControlled
        } else {
            ControlMode::IdmControlled
        };
        fleet.insert(Vehicle { role, mode, state });
    }

    Ok(ScenarioInstance {
        composition,
        adoption,
        fleet,
        geometry: *geometry,
        ego_lane: base.ego_lane,
        target_lane: base.target_lane,
        rng_seed: seed,
    })
}

fn check_nominal_overlap(layout: &[(VehicleRole, VehicleState)], geometry: &LaneGeometry) -> Result<(), WorldError> {
    for (i, (ra, a)) in layout.iter().enumerate() {
        for (rb, b) in &layout[i + 1..] {
            let distance = (a.x - b.x).abs();
            // The ego sits beside the target-lane gap; it must also clear Lead/Lag.
            let relevant =
                geometry.lane_of(a.y) == geometry.lane_of(b.y) || *ra == VehicleRole::Ego || *rb == VehicleRole::Ego;
            if relevant && distance <= a.length.max(b.length) {
                return Err(WorldError::OverlappingVehicles {
                    first: *ra,
                    second: *rb,
                    distance,
                    length: a.length.max(b.length),
                });
            }
        }
    }
    Ok(())
}

/// The 16-dimensional observation `(ego, lead, lag, sur1, sur2)`.
///
/// Layout: `[x_ego, y_ego, vx_ego, vy_ego, x_lead, y_lead, v_lead, x_lag,
/// y_lag, v_lag, x_sur1, y_sur1, v_sur1, x_sur2, y_sur2, v_sur2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector(pub [f64; StateVector::LEN]);

impl StateVector {
    pub const LEN: usize = 16;

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn ego_x(&self) -> f64 {
        self.0[0]
    }

    pub fn ego_y(&self) -> f64 {
        self.0[1]
    }
}

/// Builds the observation. The preceding vehicle in the ego lane is simulated
/// but deliberately not observed.
pub fn observe(fleet: &Fleet) -> Result<StateVector, WorldError> {
    let mut out = [0.0; StateVector::LEN];
    let ego = fleet.state(VehicleRole::Ego)?;
    out[..4].copy_from_slice(&[ego.x, ego.y, ego.vx, ego.vy]);
    let others = [
        VehicleRole::Lead,
        VehicleRole::Lag,
        VehicleRole::Sur1,
        VehicleRole::Sur2,
    ];
    for (k, role) in others.into_iter().enumerate() {
        let s = fleet.state(role)?;
        out[4 + 3 * k..7 + 3 * k].copy_from_slice(&[s.x, s.y, s.vx]);
    }
    // Pre is part of the world even though it is not observed.
    fleet.get(VehicleRole::Pre)?;
    Ok(StateVector(out))
}
