//! Actor-critic trainers (DDPG, TD3, SAC, PPO) and the storage they learn from.
//!
//! Policies act in the normalised box `[-1, 1]^4` over the padded slots
//! `(ego_x, ego_y, lead, lag)`; the harness maps actions to accelerations with
//! [`crate::environment::ActionLayout::denormalize`]. Inactive slots are masked
//! out of every network input, likelihood and gradient.

mod buffers;
mod deterministic;
mod ppo;
mod sac;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{Termination, ACTION_SLOTS};
use crate::neural::{gradient_check, Activation, AdamState, GradCheckReport, Mlp, MlpSnapshot, NeuralError};
use crate::world::StateVector;

pub use buffers::{gae, ReplayBuffer, RolloutBuffer, RolloutStep, Transition};
pub use deterministic::{CriticModel, Ddpg, Td3};
pub use ppo::{clipped_surrogate, Ppo};
pub use sac::{soft_value_estimate, Sac};

pub type ActionMask = [bool; ACTION_SLOTS];
pub type PaddedAction = [f64; ACTION_SLOTS];

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgoError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("cannot sample: buffer holds {occupancy} transitions, warm-up needs {warmup}")]
    WarmupPending { occupancy: usize, warmup: usize },
    #[error("batch of {batch} requested from {occupancy} stored transitions")]
    BatchTooLarge { batch: usize, occupancy: usize },
    #[error("non-finite {what}: {value}")]
    NonFinite { what: &'static str, value: f64 },
    #[error("invalid hyperparameters: {0}")]
    Config(String),
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Ddpg,
    Td3,
    Sac,
    Ppo,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Ddpg, Algorithm::Td3, Algorithm::Sac, Algorithm::Ppo];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Ddpg => "ddpg",
            Algorithm::Td3 => "td3",
            Algorithm::Sac => "sac",
            Algorithm::Ppo => "ppo",
        }
    }

    pub fn is_off_policy(self) -> bool {
        self != Algorithm::Ppo
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = AlgoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| AlgoError::Config(format!("unknown algorithm `{s}` (expected ddpg, td3, sac or ppo)")))
    }
}

/// Learning hyperparameters. Off-policy fields are ignored by PPO and the
/// PPO fields by the others.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgoHyperparams {
    pub discount: f64,
    pub learning_rate: f64,
    /// Off-policy minibatch drawn from the replay buffer.
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Transitions stored before the first update.
    pub warmup: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Std of Gaussian exploration noise in normalised action units. PPO
    /// starts its policy std here.
    pub exploration_noise: f64,
    /// DDPG/TD3: exploration noise falls linearly to `exploration_noise_final`
    /// over this many critic updates; `None` keeps it constant.
    pub exploration_decay_updates: Option<u64>,
    pub exploration_noise_final: f64,
    /// TD3 target-policy smoothing: noise std and clip.
    pub smoothing_noise: f64,
    pub smoothing_clip: f64,
    pub tau: f64,
    pub policy_delay: usize,
    /// Critic updates per environment step once warm.
    pub updates_per_step: usize,
    /// TD3/SAC: copy the first critic into the second at construction.
    pub shared_twin_init: bool,
    /// SAC temperature: starting value, and whether it is tuned.
    pub initial_temperature: f64,
    pub auto_temperature: bool,
    /// SAC target entropy; defaults to minus the number of active action slots.
    pub target_entropy: Option<f64>,
    pub clip_ratio: f64,
    pub gae_lambda: f64,
    pub ppo_epochs: usize,
    pub ppo_minibatch: usize,
    /// Steps collected between PPO updates; defaults to `batch_size`.
    pub rollout_horizon: Option<usize>,
    pub entropy_coef: f64,
    /// PPO stops the remaining epochs of an update once the mean sampled KL
    /// from the collecting policy exceeds 1.5 times this; `None` never stops.
    pub target_kl: Option<f64>,
    /// The learning rate falls linearly to zero over this many gradient
    /// updates (PPO minibatches, off-policy critic updates); `None` keeps it
    /// constant.
    pub lr_decay_updates: Option<u64>,
    /// PPO: log standard deviations depend on the state rather than being
    /// free per-dimension parameters.
    pub state_dependent_std: bool,
    /// Global gradient-norm clip per network; `None` disables it.
    pub max_grad_norm: Option<f64>,
    /// Rewards are multiplied by this before learning.
    pub reward_scale: f64,
}

impl Default for AlgoHyperparams {
    fn default() -> Self {
        Self {
            discount: 0.995,
            learning_rate: 6e-5,
            batch_size: 2000,
            buffer_capacity: 50_000,
            warmup: 10_000,
            hidden_width: 256,
            hidden_layers: 2,
            exploration_noise: 0.5,
            exploration_decay_updates: None,
            exploration_noise_final: 0.0,
            smoothing_noise: 0.5,
            smoothing_clip: 0.5,
            tau: 0.005,
            policy_delay: 2,
            updates_per_step: 1,
            shared_twin_init: false,
            initial_temperature: 0.2,
            auto_temperature: true,
            target_entropy: None,
            clip_ratio: 0.2,
            gae_lambda: 0.95,
            ppo_epochs: 10,
            ppo_minibatch: 200,
            rollout_horizon: None,
            entropy_coef: 0.0,
            target_kl: None,
            lr_decay_updates: None,
            state_dependent_std: false,
            max_grad_norm: None,
            reward_scale: 1.0,
        }
    }
}

impl AlgoHyperparams {
    pub fn validate(&self) -> Result<(), AlgoError> {
        let fail = |msg: &str| Err(AlgoError::Config(msg.to_string()));
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return fail("discount must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.hidden_width == 0 || self.hidden_layers == 0 {
            return fail("batch_size, buffer_capacity, hidden_width and hidden_layers must be positive");
        }
        if self.batch_size > self.buffer_capacity || self.warmup > self.buffer_capacity {
            return fail("batch_size and warmup cannot exceed buffer_capacity");
        }
        if !(self.exploration_noise >= 0.0
            && self.exploration_noise_final >= 0.0
            && self.smoothing_noise >= 0.0
            && self.smoothing_clip >= 0.0)
        {
            return fail("noise magnitudes must be non-negative");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail("tau must lie in (0, 1]");
        }
        if self.policy_delay == 0 || self.updates_per_step == 0 {
            return fail("policy_delay and updates_per_step must be at least 1");
        }
        if !(self.initial_temperature >= 0.0 && self.initial_temperature.is_finite()) {
            return fail("initial_temperature must be non-negative");
        }
        if self.auto_temperature && self.initial_temperature <= 0.0 {
            return fail("auto_temperature needs a positive initial_temperature");
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return fail("clip_ratio must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return fail("gae_lambda must lie in [0, 1]");
        }
        if self.ppo_epochs == 0 || self.ppo_minibatch == 0 || self.rollout_horizon == Some(0) {
            return fail("ppo_epochs, ppo_minibatch and rollout_horizon must be positive");
        }
        if self.lr_decay_updates == Some(0) || self.exploration_decay_updates == Some(0) {
            return fail("lr_decay_updates and exploration_decay_updates must be positive when set");
        }
        if matches!(self.target_kl, Some(k) if !(k > 0.0)) {
            return fail("target_kl must be positive when set");
        }
        if matches!(self.max_grad_norm, Some(n) if !(n > 0.0)) {
            return fail("max_grad_norm must be positive when set");
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) || self.entropy_coef < 0.0 {
            return fail("reward_scale must be positive and entropy_coef non-negative");
        }
        Ok(())
    }

    /// Exploration noise std after `updates` critic updates.
    pub fn exploration_std(&self, updates: u64) -> f64 {
        match self.exploration_decay_updates {
            Some(horizon) => {
                let left = (1.0 - updates as f64 / horizon as f64).max(0.0);
                self.exploration_noise_final + (self.exploration_noise - self.exploration_noise_final) * left
            }
            None => self.exploration_noise,
        }
    }

    pub fn horizon(&self) -> usize {
        self.rollout_horizon.unwrap_or(self.batch_size)
    }
}

/// Fixed affine scaling of the observation into network inputs. Other
/// vehicles are expressed relative to the ego; two trailing flags tell the
/// policy whether Lead and Lag take its commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Featurizer {
    pub x_center: f64,
    pub x_scale: f64,
    pub y_center: f64,
    pub y_scale: f64,
    pub speed_center: f64,
    pub speed_scale: f64,
    pub lateral_speed_scale: f64,
}

impl Default for Featurizer {
    fn default() -> Self {
        Self {
            x_center: 60.0,
            x_scale: 30.0,
            y_center: 3.75,
            y_scale: 1.875,
            speed_center: 15.0,
            speed_scale: 5.0,
            lateral_speed_scale: 2.0,
        }
    }
}

pub const FEATURES: usize = StateVector::LEN + 2;

impl Featurizer {
    pub fn features(&self, state: &StateVector, mask: &ActionMask) -> [f64; FEATURES] {
        let s = &state.0;
        let mut f = [0.0; FEATURES];
        f[0] = (s[0] - self.x_center) / self.x_scale;
        f[1] = (s[1] - self.y_center) / self.y_scale;
        f[2] = (s[2] - self.speed_center) / self.speed_scale;
        f[3] = s[3] / self.lateral_speed_scale;
        for k in 0..4 {
            let o = 4 + 3 * k;
            f[o] = (s[o] - s[0]) / self.x_scale;
            f[o + 1] = (s[o + 1] - self.y_center) / self.y_scale;
            f[o + 2] = (s[o + 2] - s[2]) / self.speed_scale;
        }
        f[16] = if mask[2] { 1.0 } else { 0.0 };
        f[17] = if mask[3] { 1.0 } else { 0.0 };
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Train,
    Eval,
}

/// What a policy chose. `action` is in `[-1, 1]` with inactive slots zero;
/// `raw` is the unclamped sample PPO's likelihood is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PolicyAction {
    pub action: PaddedAction,
    pub raw: PaddedAction,
    pub log_prob: f64,
    pub value: f64,
}

/// One environment transition as handed to a learner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Experience {
    pub state: StateVector,
    pub mask: ActionMask,
    pub chosen: PolicyAction,
    pub reward: f64,
    pub next_state: StateVector,
    pub termination: Termination,
}

/// Losses accumulated over the updates triggered by one or more steps.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub critic_updates: usize,
    pub actor_updates: usize,
    pub critic_loss_sum: f64,
    pub actor_loss_sum: f64,
    pub temperature: Option<f64>,
    /// PPO samples dropped because their likelihood ratio was not finite.
    pub skipped_samples: usize,
    /// PPO: largest `|ratio - 1|` in the first minibatch of an update.
    pub first_ratio_deviation: Option<f64>,
}

impl LossReport {
    pub fn merge(&mut self, other: &LossReport) {
        self.critic_updates += other.critic_updates;
        self.actor_updates += other.actor_updates;
        self.critic_loss_sum += other.critic_loss_sum;
        self.actor_loss_sum += other.actor_loss_sum;
        self.skipped_samples += other.skipped_samples;
        if other.temperature.is_some() {
            self.temperature = other.temperature;
        }
        if let Some(d) = other.first_ratio_deviation {
            self.first_ratio_deviation = Some(self.first_ratio_deviation.map_or(d, |o| o.max(d)));
        }
    }

    pub fn mean_critic_loss(&self) -> f64 {
        if self.critic_updates == 0 {
            0.0
        } else {
            self.critic_loss_sum / self.critic_updates as f64
        }
    }

    pub fn mean_actor_loss(&self) -> f64 {
        if self.actor_updates == 0 {
            0.0
        } else {
            self.actor_loss_sum / self.actor_updates as f64
        }
    }
}

/// Everything needed to restore a learner's networks and optimisers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub version: u32,
    pub algorithm: Algorithm,
    pub hyperparams: AlgoHyperparams,
    pub featurizer: Featurizer,
    pub networks: BTreeMap<String, MlpSnapshot>,
    pub optimizers: BTreeMap<String, AdamState>,
    pub log_temperature: Option<f64>,
    pub critic_updates: u64,
}

impl AgentCheckpoint {
    fn network(&self, name: &str) -> Result<Mlp, AlgoError> {
        let snap = self
            .networks
            .get(name)
            .ok_or_else(|| AlgoError::Checkpoint(format!("missing network `{name}`")))?;
        Ok(Mlp::from_snapshot(snap)?)
    }

    fn optimizer(&self, name: &str, net: &Mlp) -> Result<AdamState, AlgoError> {
        let opt = self
            .optimizers
            .get(name)
            .ok_or_else(|| AlgoError::Checkpoint(format!("missing optimizer `{name}`")))?;
        if opt.first_moment.len() != net.param_count() || opt.second_moment.len() != net.param_count() {
            return Err(AlgoError::Checkpoint(format!(
                "optimizer `{name}` does not match its network"
            )));
        }
        Ok(opt.clone())
    }
}

/// Common interface of the four learners.
pub trait Agent {
    fn algorithm(&self) -> Algorithm;

    fn hyperparams(&self) -> &AlgoHyperparams;

    fn act(&mut self, state: &StateVector, mask: &ActionMask, mode: ActMode) -> Result<PolicyAction, AlgoError>;

    /// Stores a transition and runs whatever updates are due.
    fn observe(&mut self, experience: &Experience) -> Result<LossReport, AlgoError>;

    fn checkpoint(&self) -> AgentCheckpoint;
}

/// Builds a freshly initialised learner.
pub fn build_agent(algorithm: Algorithm, hp: AlgoHyperparams, seed: u64) -> Result<Box<dyn Agent>, AlgoError> {
    hp.validate()?;
    Ok(match algorithm {
        Algorithm::Ddpg => Box::new(Ddpg::new(hp, seed)?),
        Algorithm::Td3 => Box::new(Td3::new(hp, seed)?),
        Algorithm::Sac => Box::new(Sac::new(hp, seed)?),
        Algorithm::Ppo => Box::new(Ppo::new(hp, seed)?),
    })
}

/// Restores a learner. The acting RNG is reseeded from `seed`.
pub fn restore_agent(checkpoint: &AgentCheckpoint, seed: u64) -> Result<Box<dyn Agent>, AlgoError> {
    if checkpoint.version != CHECKPOINT_VERSION {
        return Err(NeuralError::Version(checkpoint.version).into());
    }
    checkpoint.hyperparams.validate()?;
    Ok(match checkpoint.algorithm {
        Algorithm::Ddpg => Box::new(Ddpg::restore(checkpoint, seed)?),
        Algorithm::Td3 => Box::new(Td3::restore(checkpoint, seed)?),
        Algorithm::Sac => Box::new(Sac::restore(checkpoint, seed)?),
        Algorithm::Ppo => Box::new(Ppo::restore(checkpoint, seed)?),
    })
}

/// One gradient-check result per trainable network of a learner.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGradCheck {
    pub algorithm: Algorithm,
    pub network: String,
    pub sizes: Vec<usize>,
    pub report: GradCheckReport,
}

/// Backprop versus central differences for every trainable network that the
/// four learners build under `hp`. Each network is probed at a random input
/// with a random output weighting; at most `max_params` parameters are
/// sampled per network.
pub fn gradient_suite(hp: AlgoHyperparams, max_params: usize, seed: u64) -> Result<Vec<NetworkGradCheck>, AlgoError> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for algorithm in Algorithm::ALL {
        let checkpoint = build_agent(algorithm, hp, seed)?.checkpoint();
        for (name, snapshot) in &checkpoint.networks {
            if !checkpoint.optimizers.contains_key(name) {
                continue;
            }
            let net = Mlp::from_snapshot(snapshot)?;
            let input: Vec<f64> = (0..net.input_size()).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let upstream: Vec<f64> = (0..net.output_size()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let report = gradient_check(&net, &input, &upstream, 1e-5, max_params, &mut rng)?;
            out.push(NetworkGradCheck {
                algorithm,
                network: name.clone(),
                sizes: net.sizes().to_vec(),
                report,
            });
        }
    }
    Ok(out)
}

pub(crate) fn build_mlp<R: Rng + ?Sized>(
    hp: &AlgoHyperparams,
    inputs: usize,
    outputs: usize,
    output: Activation,
    output_scale: f64,
    rng: &mut R,
) -> Result<Mlp, AlgoError> {
    let mut sizes = vec![inputs];
    sizes.extend(std::iter::repeat(hp.hidden_width).take(hp.hidden_layers));
    sizes.push(outputs);
    Ok(Mlp::new(&sizes, Activation::Relu, output, output_scale, rng)?)
}

/// Critic input: features followed by the masked normalised action.
pub fn critic_input(features: &[f64; FEATURES], action: &PaddedAction, mask: &ActionMask) -> Vec<f64> {
    let mut x = Vec::with_capacity(FEATURES + ACTION_SLOTS);
    x.extend_from_slice(features);
    x.extend((0..ACTION_SLOTS).map(|i| if mask[i] { action[i] } else { 0.0 }));
    x
}

/// Learning rate after `updates` gradient updates under the decay schedule.
pub(crate) fn scheduled_rate(hp: &AlgoHyperparams, updates: u64) -> f64 {
    match hp.lr_decay_updates {
        Some(horizon) => hp.learning_rate * (1.0 - updates as f64 / horizon as f64).max(0.0),
        None => hp.learning_rate,
    }
}

pub(crate) fn apply_update(net: &mut Mlp, opt: &mut AdamState, hp: &AlgoHyperparams) -> Result<(), AlgoError> {
    if let Some(limit) = hp.max_grad_norm {
        crate::neural::clip_grad_norm(net.grads_mut(), limit);
    }
    net.adam_update(opt)?;
    Ok(())
}

pub(crate) fn ensure_finite(what: &'static str, value: f64) -> Result<f64, AlgoError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(AlgoError::NonFinite { what, value })
    }
}

pub(crate) fn mask_count(mask: &ActionMask) -> usize {
    mask.iter().filter(|m| **m).count()
}

pub(crate) fn agent_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a9e7_0000_0001)
}

fn check_restore(checkpoint: &AgentCheckpoint, algorithm: Algorithm) -> Result<(), AlgoError> {
    if checkpoint.algorithm != algorithm {
        return Err(AlgoError::Checkpoint(format!(
            "checkpoint holds {} weights, not {algorithm}",
            checkpoint.algorithm
        )));
    }
    Ok(())
}
