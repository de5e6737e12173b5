//! Deterministic-policy learners: DDPG and its twin-critic variant TD3.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    agent_rng, apply_update, build_mlp, check_restore, critic_input, ensure_finite, scheduled_rate, ActMode,
    ActionMask, Agent, AgentCheckpoint, AlgoError, AlgoHyperparams, Algorithm, Experience, Featurizer, LossReport,
    PaddedAction, PolicyAction, ReplayBuffer, Transition, CHECKPOINT_VERSION, FEATURES,
};
use crate::environment::ACTION_SLOTS;
use crate::neural::{polyak_update, Activation, AdamState, Mlp};
use crate::world::StateVector;

/// Anything that scores a critic input and differentiates the score with
/// respect to that input.
pub trait CriticModel {
    fn q_and_input_grad(&self, input: &[f64]) -> Result<(f64, Vec<f64>), AlgoError>;
}

impl CriticModel for Mlp {
    fn q_and_input_grad(&self, input: &[f64]) -> Result<(f64, Vec<f64>), AlgoError> {
        let (q, tape) = self.forward_tape(input)?;
        Ok((q[0], self.input_gradient(&tape, &[1.0])?))
    }
}

pub(crate) fn q_value(net: &Mlp, input: &[f64]) -> Result<f64, AlgoError> {
    Ok(net.forward(input)?[0])
}

pub(crate) fn masked(raw: &[f64], mask: &ActionMask) -> PaddedAction {
    let mut a = [0.0; ACTION_SLOTS];
    for i in 0..ACTION_SLOTS {
        if mask[i] {
            a[i] = raw[i];
        }
    }
    a
}

/// Mean-squared regression of a scalar critic towards fixed targets.
pub(crate) fn regress_critic(
    net: &mut Mlp,
    opt: &mut AdamState,
    hp: &AlgoHyperparams,
    inputs: &[Vec<f64>],
    targets: &[f64],
) -> Result<f64, AlgoError> {
    let n = inputs.len() as f64;
    net.zero_grad();
    let mut loss = 0.0;
    for (x, y) in inputs.iter().zip(targets) {
        let (q, tape) = net.forward_tape(x)?;
        let err = q[0] - y;
        loss += err * err / n;
        net.backward(&tape, &[2.0 * err / n])?;
    }
    ensure_finite("critic loss", loss)?;
    apply_update(net, opt, hp)?;
    Ok(loss)
}

/// One ascent step of `mean Q(s, μ(s))` through the actor.
pub(crate) fn deterministic_actor_step(
    actor: &mut Mlp,
    opt: &mut AdamState,
    hp: &AlgoHyperparams,
    critic: &dyn CriticModel,
    features: &[[f64; FEATURES]],
    masks: &[ActionMask],
) -> Result<f64, AlgoError> {
    let n = features.len() as f64;
    actor.zero_grad();
    let mut loss = 0.0;
    for (f, mask) in features.iter().zip(masks) {
        let (raw, tape) = actor.forward_tape(f)?;
        let action = masked(&raw, mask);
        let (q, dq) = critic.q_and_input_grad(&critic_input(f, &action, mask))?;
        loss -= q / n;
        let upstream: Vec<f64> = (0..ACTION_SLOTS)
            .map(|i| if mask[i] { -dq[FEATURES + i] / n } else { 0.0 })
            .collect();
        actor.backward(&tape, &upstream)?;
    }
    ensure_finite("actor loss", loss)?;
    apply_update(actor, opt, hp)?;
    Ok(loss)
}

/// `mean + N(0, σ²)` per active slot, clamped to `[-1, 1]`.
pub(crate) fn explore<R: Rng + ?Sized>(
    mean: &PaddedAction,
    mask: &ActionMask,
    sigma: f64,
    rng: &mut R,
) -> PaddedAction {
    let mut a = *mean;
    if sigma > 0.0 {
        for i in 0..ACTION_SLOTS {
            if mask[i] {
                let z: f64 = rng.sample(StandardNormal);
                a[i] = (a[i] + sigma * z).clamp(-1.0, 1.0);
            }
        }
    }
    a
}

fn transition_from(experience: &Experience, scale: f64) -> Transition {
    Transition {
        state: experience.state,
        mask: experience.mask,
        action: experience.chosen.action,
        reward: experience.reward * scale,
        next_state: experience.next_state,
        done: experience.termination.is_terminal(),
    }
}

fn split_batch(featurizer: &Featurizer, batch: &[Transition]) -> (Vec<[f64; FEATURES]>, Vec<ActionMask>) {
    batch
        .iter()
        .map(|t| (featurizer.features(&t.state, &t.mask), t.mask))
        .unzip()
}

/// Deep deterministic policy gradient with one critic and target networks.
#[derive(Debug, Clone)]
pub struct Ddpg {
    pub hp: AlgoHyperparams,
    pub featurizer: Featurizer,
    pub actor: Mlp,
    pub actor_target: Mlp,
    pub critic: Mlp,
    pub critic_target: Mlp,
    actor_opt: AdamState,
    critic_opt: AdamState,
    pub buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    critic_updates: u64,
}

impl Ddpg {
    pub fn new(hp: AlgoHyperparams, seed: u64) -> Result<Self, AlgoError> {
        hp.validate()?;
        let mut rng = agent_rng(seed);
        let actor = build_mlp(&hp, FEATURES, ACTION_SLOTS, Activation::Tanh, 1e-2, &mut rng)?;
        let critic = build_mlp(&hp, FEATURES + ACTION_SLOTS, 1, Activation::Identity, 1.0, &mut rng)?;
        Ok(Self {
            actor_opt: AdamState::new(actor.param_count(), hp.learning_rate),
            critic_opt: AdamState::new(critic.param_count(), hp.learning_rate),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            buffer: ReplayBuffer::new(hp.buffer_capacity, hp.warmup)?,
            featurizer: Featurizer::default(),
            rng,
            hp,
            critic_updates: 0,
        })
    }

    pub fn restore(checkpoint: &AgentCheckpoint, seed: u64) -> Result<Self, AlgoError> {
        check_restore(checkpoint, Algorithm::Ddpg)?;
        let hp = checkpoint.hyperparams;
        let actor = checkpoint.network("actor")?;
        let critic = checkpoint.network("critic")?;
        Ok(Self {
            actor_opt: checkpoint.optimizer("actor", &actor)?,
            critic_opt: checkpoint.optimizer("critic", &critic)?,
            actor_target: checkpoint.network("actor_target")?,
            critic_target: checkpoint.network("critic_target")?,
            actor,
            critic,
            buffer: ReplayBuffer::new(hp.buffer_capacity, hp.warmup)?,
            featurizer: checkpoint.featurizer,
            rng: agent_rng(seed),
            hp,
            critic_updates: checkpoint.critic_updates,
        })
    }

    pub fn policy(&self, state: &StateVector, mask: &ActionMask) -> Result<PaddedAction, AlgoError> {
        let f = self.featurizer.features(state, mask);
        Ok(masked(&self.actor.forward(&f)?, mask))
    }

    /// `r + γ (1 - done) Q'(s', μ'(s'))` for each transition.
    pub fn td_targets(&self, batch: &[Transition]) -> Result<Vec<f64>, AlgoError> {
        batch
            .iter()
            .map(|t| {
                if t.done {
                    return Ok(t.reward);
                }
                let f = self.featurizer.features(&t.next_state, &t.mask);
                let a = masked(&self.actor_target.forward(&f)?, &t.mask);
                let q = q_value(&self.critic_target, &critic_input(&f, &a, &t.mask))?;
                Ok(t.reward + self.hp.discount * q)
            })
            .collect()
    }

    pub fn q(&self, state: &StateVector, mask: &ActionMask, action: &PaddedAction) -> Result<f64, AlgoError> {
        let f = self.featurizer.features(state, mask);
        q_value(&self.critic, &critic_input(&f, action, mask))
    }

    pub fn update_on(&mut self, batch: &[Transition]) -> Result<LossReport, AlgoError> {
        let rate = scheduled_rate(&self.hp, self.critic_updates);
        self.actor_opt.learning_rate = rate;
        self.critic_opt.learning_rate = rate;
        let targets = self.td_targets(batch)?;
        let (features, masks) = split_batch(&self.featurizer, batch);
        let inputs: Vec<Vec<f64>> = batch
            .iter()
            .zip(&features)
            .map(|(t, f)| critic_input(f, &t.action, &t.mask))
            .collect();
        let critic_loss = regress_critic(&mut self.critic, &mut self.critic_opt, &self.hp, &inputs, &targets)?;
        let actor_loss = deterministic_actor_step(
            &mut self.actor,
            &mut self.actor_opt,
            &self.hp,
            &self.critic,
            &features,
            &masks,
        )?;
        polyak_update(self.actor_target.params_mut(), self.actor.params(), self.hp.tau)?;
        polyak_update(self.critic_target.params_mut(), self.critic.params(), self.hp.tau)?;
        self.critic_updates += 1;
        Ok(LossReport {
            critic_updates: 1,
            actor_updates: 1,
            critic_loss_sum: critic_loss,
            actor_loss_sum: actor_loss,
            ..LossReport::default()
        })
    }

    /// Actor step against an arbitrary critic, leaving the targets alone.
    pub fn actor_step_against(
        &mut self,
        critic: &dyn CriticModel,
        states: &[(StateVector, ActionMask)],
    ) -> Result<f64, AlgoError> {
        let features: Vec<_> = states.iter().map(|(s, m)| self.featurizer.features(s, m)).collect();
        let masks: Vec<_> = states.iter().map(|(_, m)| *m).collect();
        deterministic_actor_step(
            &mut self.actor,
            &mut self.actor_opt,
            &self.hp,
            critic,
            &features,
            &masks,
        )
    }
}

impl Agent for Ddpg {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Ddpg
    }

    fn hyperparams(&self) -> &AlgoHyperparams {
        &self.hp
    }

    fn act(&mut self, state: &StateVector, mask: &ActionMask, mode: ActMode) -> Result<PolicyAction, AlgoError> {
        let mean = self.policy(state, mask)?;
        let action = match mode {
            ActMode::Eval => mean,
            ActMode::Train => explore(&mean, mask, self.hp.exploration_std(self.critic_updates), &mut self.rng),
        };
        Ok(PolicyAction {
            action,
            raw: action,
            ..PolicyAction::default()
        })
    }

    fn observe(&mut self, experience: &Experience) -> Result<LossReport, AlgoError> {
        self.buffer.push(transition_from(experience, self.hp.reward_scale))?;
        let mut report = LossReport::default();
        if self.buffer.is_warm() {
            for _ in 0..self.hp.updates_per_step {
                let batch = self.buffer.sample(self.hp.batch_size, &mut self.rng)?;
                report.merge(&self.update_on(&batch)?);
            }
        }
        Ok(report)
    }

    fn checkpoint(&self) -> AgentCheckpoint {
        let networks = BTreeMap::from([
            ("actor".to_string(), self.actor.snapshot()),
            ("actor_target".to_string(), self.actor_target.snapshot()),
            ("critic".to_string(), self.critic.snapshot()),
            ("critic_target".to_string(), self.critic_target.snapshot()),
        ]);
        let optimizers = BTreeMap::from([
            ("actor".to_string(), self.actor_opt.clone()),
            ("critic".to_string(), self.critic_opt.clone()),
        ]);
        AgentCheckpoint {
            version: CHECKPOINT_VERSION,
            algorithm: Algorithm::Ddpg,
            hyperparams: self.hp,
            featurizer: self.featurizer,
            networks,
            optimizers,
            log_temperature: None,
            critic_updates: self.critic_updates,
        }
    }
}

/// Twin-delayed DDPG: clipped double-Q targets, target-policy smoothing and
/// delayed actor updates.
#[derive(Debug, Clone)]
pub struct Td3 {
    pub hp: AlgoHyperparams,
    pub featurizer: Featurizer,
    pub actor: Mlp,
    pub actor_target: Mlp,
    pub critics: [Mlp; 2],
    pub critic_targets: [Mlp; 2],
    actor_opt: AdamState,
    critic_opts: [AdamState; 2],
    pub buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    critic_updates: u64,
    actor_updates: u64,
}

impl Td3 {
    /// The actor and first critic are drawn exactly as DDPG draws its pair
    /// for the same seed.
    pub fn new(hp: AlgoHyperparams, seed: u64) -> Result<Self, AlgoError> {
        hp.validate()?;
        let mut rng = agent_rng(seed);
        let actor = build_mlp(&hp, FEATURES, ACTION_SLOTS, Activation::Tanh, 1e-2, &mut rng)?;
        let first = build_mlp(&hp, FEATURES + ACTION_SLOTS, 1, Activation::Identity, 1.0, &mut rng)?;
        let second = if hp.shared_twin_init {
            first.clone()
        } else {
            build_mlp(&hp, FEATURES + ACTION_SLOTS, 1, Activation::Identity, 1.0, &mut rng)?
        };
        let opt = |net: &Mlp| AdamState::new(net.param_count(), hp.learning_rate);
        Ok(Self {
            actor_opt: opt(&actor),
            critic_opts: [opt(&first), opt(&second)],
            actor_target: actor.clone(),
            critic_targets: [first.clone(), second.clone()],
            actor,
            critics: [first, second],
            buffer: ReplayBuffer::new(hp.buffer_capacity, hp.warmup)?,
            featurizer: Featurizer::default(),
            rng,
            hp,
            critic_updates: 0,
            actor_updates: 0,
        })
    }

    pub fn restore(checkpoint: &AgentCheckpoint, seed: u64) -> Result<Self, AlgoError> {
        check_restore(checkpoint, Algorithm::Td3)?;
        let hp = checkpoint.hyperparams;
        let actor = checkpoint.network("actor")?;
        let critics = [checkpoint.network("critic1")?, checkpoint.network("critic2")?];
        Ok(Self {
            actor_opt: checkpoint.optimizer("actor", &actor)?,
            critic_opts: [
                checkpoint.optimizer("critic1", &critics[0])?,
                checkpoint.optimizer("critic2", &critics[1])?,
            ],
            actor_target: checkpoint.network("actor_target")?,
            critic_targets: [
                checkpoint.network("critic1_target")?,
                checkpoint.network("critic2_target")?,
            ],
            actor,
            critics,
            buffer: ReplayBuffer::new(hp.buffer_capacity, hp.warmup)?,
            featurizer: checkpoint.featurizer,
            rng: agent_rng(seed),
            hp,
            critic_updates: checkpoint.critic_updates,
            actor_updates: checkpoint.critic_updates / hp.policy_delay as u64,
        })
    }

    pub fn critic_updates(&self) -> u64 {
        self.critic_updates
    }

    pub fn actor_updates(&self) -> u64 {
        self.actor_updates
    }

    pub fn policy(&self, state: &StateVector, mask: &ActionMask) -> Result<PaddedAction, AlgoError> {
        let f = self.featurizer.features(state, mask);
        Ok(masked(&self.actor.forward(&f)?, mask))
    }

    /// Targets and the two target critics' bootstrap values they were built
    /// from. Smoothing noise is drawn from the agent's RNG.
    pub fn td_targets_with_bootstraps(&mut self, batch: &[Transition]) -> Result<Vec<(f64, [f64; 2])>, AlgoError> {
        let (sigma, clip) = (self.hp.smoothing_noise, self.hp.smoothing_clip);
        batch
            .iter()
            .map(|t| {
                let f = self.featurizer.features(&t.next_state, &t.mask);
                let mut a = masked(&self.actor_target.forward(&f)?, &t.mask);
                if sigma > 0.0 {
                    for i in 0..ACTION_SLOTS {
                        if t.mask[i] {
                            let z: f64 = self.rng.sample(StandardNormal);
                            a[i] = (a[i] + (sigma * z).clamp(-clip, clip)).clamp(-1.0, 1.0);
                        }
                    }
                }
                let x = critic_input(&f, &a, &t.mask);
                let boot = [
                    q_value(&self.critic_targets[0], &x)?,
                    q_value(&self.critic_targets[1], &x)?,
                ];
                let not_done = if t.done { 0.0 } else { 1.0 };
                Ok((t.reward + self.hp.discount * not_done * boot[0].min(boot[1]), boot))
            })
            .collect()
    }

    pub fn td_targets(&mut self, batch: &[Transition]) -> Result<Vec<f64>, AlgoError> {
        Ok(self
            .td_targets_with_bootstraps(batch)?
            .into_iter()
            .map(|(y, _)| y)
            .collect())
    }

    pub fn update_on(&mut self, batch: &[Transition]) -> Result<LossReport, AlgoError> {
        let rate = scheduled_rate(&self.hp, self.critic_updates);
        self.actor_opt.learning_rate = rate;
        self.critic_opts.iter_mut().for_each(|o| o.learning_rate = rate);
        let targets = self.td_targets(batch)?;
        let (features, masks) = split_batch(&self.featurizer, batch);
        let inputs: Vec<Vec<f64>> = batch
            .iter()
            .zip(&features)
            .map(|(t, f)| critic_input(f, &t.action, &t.mask))
            .collect();
        let mut report = LossReport {
            critic_updates: 1,
            ..LossReport::default()
        };
        for k in 0..2 {
            report.critic_loss_sum += 0.5
                * regress_critic(
                    &mut self.critics[k],
                    &mut self.critic_opts[k],
                    &self.hp,
                    &inputs,
                    &targets,
                )?;
        }
        self.critic_updates += 1;
        if self.critic_updates % self.hp.policy_delay as u64 == 0 {
            report.actor_loss_sum = deterministic_actor_step(
                &mut self.actor,
                &mut self.actor_opt,
                &self.hp,
                &self.critics[0],
                &features,
                &masks,
            )?;
            report.actor_updates = 1;
            self.actor_updates += 1;
            polyak_update(self.actor_target.params_mut(), self.actor.params(), self.hp.tau)?;
            for k in 0..2 {
                polyak_update(
                    self.critic_targets[k].params_mut(),
                    self.critics[k].params(),
                    self.hp.tau,
                )?;
            }
        }
        Ok(report)
    }
}

impl Agent for Td3 {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Td3
    }

    fn hyperparams(&self) -> &AlgoHyperparams {
        &self.hp
    }

    fn act(&mut self, state: &StateVector, mask: &ActionMask, mode: ActMode) -> Result<PolicyAction, AlgoError> {
        let mean = self.policy(state, mask)?;
        let action = match mode {
            ActMode::Eval => mean,
            ActMode::Train => explore(&mean, mask, self.hp.exploration_std(self.critic_updates), &mut self.rng),
        };
        Ok(PolicyAction {
            action,
            raw: action,
            ..PolicyAction::default()
        })
    }

    fn observe(&mut self, experience: &Experience) -> Result<LossReport, AlgoError> {
        self.buffer.push(transition_from(experience, self.hp.reward_scale))?;
        let mut report = LossReport::default();
        if self.buffer.is_warm() {
            for _ in 0..self.hp.updates_per_step {
                let batch = self.buffer.sample(self.hp.batch_size, &mut self.rng)?;
                report.merge(&self.update_on(&batch)?);
            }
        }
        Ok(report)
    }

    fn checkpoint(&self) -> AgentCheckpoint {
        let networks = BTreeMap::from([
            ("actor".to_string(), self.actor.snapshot()),
            ("actor_target".to_string(), self.actor_target.snapshot()),
            ("critic1".to_string(), self.critics[0].snapshot()),
            ("critic2".to_string(), self.critics[1].snapshot()),
            ("critic1_target".to_string(), self.critic_targets[0].snapshot()),
            ("critic2_target".to_string(), self.critic_targets[1].snapshot()),
        ]);
        let optimizers = BTreeMap::from([
            ("actor".to_string(), self.actor_opt.clone()),
            ("critic1".to_string(), self.critic_opts[0].clone()),
            ("critic2".to_string(), self.critic_opts[1].clone()),
        ]);
        AgentCheckpoint {
            version: CHECKPOINT_VERSION,
            algorithm: Algorithm::Td3,
            hyperparams: self.hp,
            featurizer: self.featurizer,
            networks,
            optimizers,
            log_temperature: None,
            critic_updates: self.critic_updates,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::Termination;
    use rand::SeedableRng;

    fn small() -> AlgoHyperparams {
        AlgoHyperparams {
            hidden_width: 32,
            batch_size: 16,
            buffer_capacity: 1000,
            warmup: 16,
            learning_rate: 1e-3,
            ..AlgoHyperparams::default()
        }
    }

    fn random_state(rng: &mut ChaCha8Rng) -> StateVector {
        let mut s = [0.0; StateVector::LEN];
        s[0] = rng.gen_range(60.0..100.0);
        s[1] = rng.gen_range(1.0..6.0);
        s[2] = rng.gen_range(10.0..20.0);
        for k in 0..4 {
            s[4 + 3 * k] = s[0] + rng.gen_range(-40.0..40.0);
            s[5 + 3 * k] = 5.625;
            s[6 + 3 * k] = rng.gen_range(10.0..20.0);
        }
        StateVector(s)
    }

    fn random_batch(n: usize, seed: u64) -> Vec<Transition> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| Transition {
                state: random_state(&mut rng),
                mask: [true, true, i % 2 == 0, true],
                action: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.3, -0.4],
                reward: rng.gen_range(-2.0..1.0),
                next_state: random_state(&mut rng),
                done: i % 5 == 0,
            })
            .collect()
    }

    #[test]
    fn eval_is_deterministic_and_zero_noise_matches_eval() {
        let hp = AlgoHyperparams {
            exploration_noise: 0.0,
            ..small()
        };
        let mut agent = Ddpg::new(hp, 3).unwrap();
        let s = random_state(&mut ChaCha8Rng::seed_from_u64(1));
        let mask = [true, true, false, true];
        let a = agent.act(&s, &mask, ActMode::Eval).unwrap();
        let b = agent.act(&s, &mask, ActMode::Eval).unwrap();
        let c = agent.act(&s, &mask, ActMode::Train).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.action[2], 0.0);
    }

    #[test]
    fn myopic_targets_equal_rewards() {
        let mut agent = Ddpg::new(small(), 0).unwrap();
        // Validation keeps γ in (0, 1); set the degenerate value directly.
        agent.hp.discount = 0.0;
        let batch = random_batch(32, 5);
        for (t, y) in batch.iter().zip(agent.td_targets(&batch).unwrap()) {
            assert_eq!(y, t.reward);
        }
    }

    #[test]
    fn done_masks_bootstrap_exactly() {
        let agent = Ddpg::new(small(), 0).unwrap();
        let mut batch = random_batch(16, 2);
        batch.iter_mut().for_each(|t| t.done = true);
        assert_eq!(
            agent.td_targets(&batch).unwrap(),
            batch.iter().map(|t| t.reward).collect::<Vec<_>>()
        );
        let mut td3 = Td3::new(small(), 0).unwrap();
        assert_eq!(
            td3.td_targets(&batch).unwrap(),
            batch.iter().map(|t| t.reward).collect::<Vec<_>>()
        );
    }

    #[test]
    fn critic_converges_on_terminal_fixed_point() {
        let mut agent = Ddpg::new(small(), 11).unwrap();
        let s = random_state(&mut ChaCha8Rng::seed_from_u64(4));
        let t = Transition {
            state: s,
            mask: [true; 4],
            action: [0.2, -0.3, 0.1, 0.0],
            reward: 1.0,
            next_state: s,
            done: true,
        };
        let batch = vec![t; 16];
        for _ in 0..500 {
            agent.update_on(&batch).unwrap();
        }
        let q = agent.q(&s, &t.mask, &t.action).unwrap();
        assert!((q - 1.0).abs() < 0.01, "q = {q}");
    }

    struct Quadratic {
        target: [f64; 4],
    }

    impl CriticModel for Quadratic {
        fn q_and_input_grad(&self, input: &[f64]) -> Result<(f64, Vec<f64>), AlgoError> {
            let mut grad = vec![0.0; input.len()];
            let mut q = 0.0;
            for i in 0..4 {
                let d = input[FEATURES + i] - self.target[i];
                q -= d * d;
                grad[FEATURES + i] = -2.0 * d;
            }
            Ok((q, grad))
        }
    }

    #[test]
    fn actor_climbs_quadratic_critic() {
        let mut agent = Ddpg::new(
            AlgoHyperparams {
                learning_rate: 1e-2,
                ..small()
            },
            2,
        )
        .unwrap();
        let critic = Quadratic {
            target: [0.5, -0.25, 0.0, 0.7],
        };
        let mask = [true, true, false, true];
        let s = random_state(&mut ChaCha8Rng::seed_from_u64(8));
        let dist = |a: &PaddedAction| {
            (0..4)
                .filter(|i| mask[*i])
                .map(|i| (a[i] - critic.target[i]).powi(2))
                .sum::<f64>()
        };
        let before = dist(&agent.policy(&s, &mask).unwrap());
        let mut prev = before;
        for k in 0..300 {
            agent.actor_step_against(&critic, &[(s, mask)]).unwrap();
            let now = dist(&agent.policy(&s, &mask).unwrap());
            if k < 5 {
                assert!(now < prev);
            }
            prev = now;
        }
        assert!(prev < 1e-3 * before, "{before} -> {prev}");
    }

    #[test]
    fn exploration_noise_matches_censored_normal() {
        let mut agent = Ddpg::new(small(), 1).unwrap();
        let s = random_state(&mut ChaCha8Rng::seed_from_u64(3));
        let mask = [true; 4];
        let mean = agent.policy(&s, &mask).unwrap();
        let n = 100_000;
        let mut second = [0.0; 4];
        for _ in 0..n {
            let a = agent.act(&s, &mask, ActMode::Train).unwrap().action;
            for i in 0..4 {
                second[i] += (a[i] - mean[i]).powi(2) / n as f64;
            }
        }
        let sigma = agent.hp.exploration_noise;
        for i in 0..4 {
            let oracle = censored_second_moment(mean[i], sigma);
            let rel = (second[i].sqrt() - oracle.sqrt()).abs() / oracle.sqrt();
            assert!(rel < 0.01, "slot {i}: {} vs {}", second[i].sqrt(), oracle.sqrt());
        }
    }

    /// `E[(clamp(m + σZ, -1, 1) - m)^2]` by quadrature plus the two atoms.
    fn censored_second_moment(m: f64, sigma: f64) -> f64 {
        let pdf = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let (zl, zh) = ((-1.0 - m) / sigma, (1.0 - m) / sigma);
        let steps = 20_000;
        let h = (zh - zl) / steps as f64;
        let mut inner = 0.0;
        let mut low_mass = 0.0;
        for k in 0..=steps {
            let z = zl + k as f64 * h;
            let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
            inner += w * h * (sigma * z).powi(2) * pdf(z);
        }
        // Tail masses via the complementary integral of the density.
        let tail = |a: f64| {
            let mut acc = 0.0;
            let hh = 1e-3;
            let mut z = a;
            while z < a + 12.0 {
                acc += hh * 0.5 * (pdf(z) + pdf(z + hh));
                z += hh;
            }
            acc
        };
        low_mass += tail(-zl);
        let high_mass = tail(zh);
        inner + low_mass * (-1.0 - m).powi(2) + high_mass * (1.0 - m).powi(2)
    }

    #[test]
    fn twin_target_never_exceeds_either_bootstrap() {
        let mut td3 = Td3::new(small(), 7).unwrap();
        let batch = random_batch(64, 9);
        for ((y, boot), t) in td3.td_targets_with_bootstraps(&batch).unwrap().into_iter().zip(&batch) {
            if !t.done {
                let bootstrap = (y - t.reward) / td3.hp.discount;
                assert!(bootstrap <= boot[0] + 1e-12 && bootstrap <= boot[1] + 1e-12);
            }
        }
    }

    #[test]
    fn delayed_actor_counter_law() {
        let mut td3 = Td3::new(
            AlgoHyperparams {
                policy_delay: 2,
                ..small()
            },
            1,
        )
        .unwrap();
        let batch = random_batch(16, 1);
        for k in 1..=7u64 {
            td3.update_on(&batch).unwrap();
            assert_eq!(td3.actor_updates(), k / 2);
        }
    }

    #[test]
    fn td3_reduces_to_ddpg() {
        let hp = AlgoHyperparams {
            smoothing_noise: 0.0,
            policy_delay: 1,
            shared_twin_init: true,
            ..small()
        };
        let ddpg = Ddpg::new(hp, 21).unwrap();
        let mut td3 = Td3::new(hp, 21).unwrap();
        let batch = random_batch(64, 4);
        let a = ddpg.td_targets(&batch).unwrap();
        let b = td3.td_targets(&batch).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn warmup_gates_updates_and_checkpoint_restores() {
        let mut agent = Ddpg::new(small(), 5).unwrap();
        let batch = random_batch(20, 3);
        let mut updates = 0;
        for (i, t) in batch.iter().enumerate() {
            let exp = Experience {
                state: t.state,
                mask: t.mask,
                chosen: PolicyAction {
                    action: t.action,
                    raw: t.action,
                    ..PolicyAction::default()
                },
                reward: t.reward,
                next_state: t.next_state,
                termination: if t.done {
                    Termination::Crash
                } else {
                    Termination::Running
                },
            };
            let r = agent.observe(&exp).unwrap();
            if i + 1 < 16 {
                assert_eq!(r.critic_updates, 0);
            }
            updates += r.critic_updates;
        }
        assert_eq!(updates, 5);
        let ck = agent.checkpoint();
        let back = Ddpg::restore(&ck, 0).unwrap();
        assert_eq!(back.actor.params(), agent.actor.params());
        assert!(Td3::restore(&ck, 0).is_err());
    }
}
