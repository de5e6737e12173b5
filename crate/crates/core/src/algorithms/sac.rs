//! Soft actor-critic with a tanh-squashed Gaussian policy, twin critics and
//! an automatically tuned entropy temperature.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::deterministic::{q_value, regress_critic, CriticModel};
use super::{
    agent_rng, apply_update, build_mlp, check_restore, critic_input, ensure_finite, mask_count, scheduled_rate,
    ActMode, ActionMask, Agent, AgentCheckpoint, AlgoError, AlgoHyperparams, Algorithm, Experience, Featurizer,
    LossReport, PaddedAction, PolicyAction, ReplayBuffer, Transition, CHECKPOINT_VERSION, FEATURES,
};
use crate::environment::ACTION_SLOTS;
use crate::neural::{adam_step, polyak_update, Activation, AdamState, GaussianHead, Mlp};
use crate::world::StateVector;

/// Monte Carlo estimate of `E[q(a) - α log π(a)]` under the policy head.
pub fn soft_value_estimate<R: Rng + ?Sized, F: Fn(&[f64]) -> f64>(
    head: &GaussianHead,
    head_output: &[f64],
    mask: &[bool],
    temperature: f64,
    samples: usize,
    rng: &mut R,
    q: F,
) -> f64 {
    let total: f64 = (0..samples)
        .map(|_| {
            let s = head.sample(head_output, mask, rng);
            q(&s.action) - temperature * s.log_prob
        })
        .sum();
    total / samples as f64
}

fn to_padded(v: &[f64]) -> PaddedAction {
    let mut a = [0.0; ACTION_SLOTS];
    a.copy_from_slice(&v[..ACTION_SLOTS]);
    a
}

#[derive(Debug, Clone)]
pub struct Sac {
    pub hp: AlgoHyperparams,
    pub featurizer: Featurizer,
    pub head: GaussianHead,
    pub actor: Mlp,
    pub critics: [Mlp; 2],
    pub critic_targets: [Mlp; 2],
    actor_opt: AdamState,
    critic_opts: [AdamState; 2],
    pub log_temperature: f64,
    temperature_opt: AdamState,
    pub buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    critic_updates: u64,
}

impl Sac {
    pub fn new(hp: AlgoHyperparams, seed: u64) -> Result<Self, AlgoError> {
        hp.validate()?;
        let mut rng = agent_rng(seed);
        let head = GaussianHead::new(ACTION_SLOTS, true);
        let actor = build_mlp(&hp, FEATURES, head.output_size(), Activation::Identity, 1e-2, &mut rng)?;
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
            critic_targets: [first.clone(), second.clone()],
            critics: [first, second],
            actor,
            head,
            log_temperature: hp.initial_temperature.ln(),
            temperature_opt: AdamState::new(1, hp.learning_rate),
            buffer: ReplayBuffer::new(hp.buffer_capacity, hp.warmup)?,
            featurizer: Featurizer::default(),
            rng,
            hp,
            critic_updates: 0,
        })
    }

    pub fn restore(checkpoint: &AgentCheckpoint, seed: u64) -> Result<Self, AlgoError> {
        check_restore(checkpoint, Algorithm::Sac)?;
        let hp = checkpoint.hyperparams;
        let actor = checkpoint.network("actor")?;
        let critics = [checkpoint.network("critic1")?, checkpoint.network("critic2")?];
        let temperature_opt = checkpoint
            .optimizers
            .get("temperature")
            .cloned()
            .ok_or_else(|| AlgoError::Checkpoint("missing optimizer `temperature`".into()))?;
        let head = GaussianHead::new(ACTION_SLOTS, true);
        if actor.output_size() != head.output_size() {
            return Err(AlgoError::Checkpoint(
                "actor output does not match the policy head".into(),
            ));
        }
        Ok(Self {
            actor_opt: checkpoint.optimizer("actor", &actor)?,
            critic_opts: [
                checkpoint.optimizer("critic1", &critics[0])?,
                checkpoint.optimizer("critic2", &critics[1])?,
            ],
            critic_targets: [
                checkpoint.network("critic1_target")?,
                checkpoint.network("critic2_target")?,
            ],
            critics,
            actor,
            head,
            log_temperature: checkpoint.log_temperature.unwrap_or(hp.initial_temperature.ln()),
            temperature_opt,
            buffer: ReplayBuffer::new(hp.buffer_capacity, hp.warmup)?,
            featurizer: checkpoint.featurizer,
            rng: agent_rng(seed),
            hp,
            critic_updates: checkpoint.critic_updates,
        })
    }

    pub fn temperature(&self) -> f64 {
        if self.hp.auto_temperature {
            self.log_temperature.exp()
        } else {
            self.hp.initial_temperature
        }
    }

    fn target_entropy(&self, mask: &ActionMask) -> f64 {
        self.hp.target_entropy.unwrap_or(-(mask_count(mask) as f64))
    }

    /// `r + γ (1 - done) (min Q'(s', a') - α log π(a'|s'))` with `a'` drawn
    /// from the current policy.
    pub fn td_targets(&mut self, batch: &[Transition]) -> Result<Vec<f64>, AlgoError> {
        let alpha = self.temperature();
        batch
            .iter()
            .map(|t| {
                if t.done {
                    return Ok(t.reward);
                }
                let f = self.featurizer.features(&t.next_state, &t.mask);
                let out = self.actor.forward(&f)?;
                let s = self.head.sample(&out, &t.mask, &mut self.rng);
                let x = critic_input(&f, &to_padded(&s.action), &t.mask);
                let q = q_value(&self.critic_targets[0], &x)?.min(q_value(&self.critic_targets[1], &x)?);
                let soft = if alpha == 0.0 { q } else { q - alpha * s.log_prob };
                Ok(t.reward + self.hp.discount * soft)
            })
            .collect()
    }

    /// Soft state value under the online critics.
    pub fn soft_value(&mut self, state: &StateVector, mask: &ActionMask, samples: usize) -> Result<f64, AlgoError> {
        let f = self.featurizer.features(state, mask);
        let out = self.actor.forward(&f)?;
        let critics = &self.critics;
        let value = soft_value_estimate(
            &self.head,
            &out,
            mask,
            self.temperature(),
            samples,
            &mut self.rng,
            |a| {
                let x = critic_input(&f, &to_padded(a), mask);
                let q1 = critics[0].forward(&x).map(|v| v[0]).unwrap_or(f64::NAN);
                let q2 = critics[1].forward(&x).map(|v| v[0]).unwrap_or(f64::NAN);
                q1.min(q2)
            },
        );
        ensure_finite("soft value", value)
    }

    pub fn update_on(&mut self, batch: &[Transition]) -> Result<LossReport, AlgoError> {
        let rate = scheduled_rate(&self.hp, self.critic_updates);
        self.actor_opt.learning_rate = rate;
        self.critic_opts.iter_mut().for_each(|o| o.learning_rate = rate);
        let targets = self.td_targets(batch)?;
        let features: Vec<_> = batch
            .iter()
            .map(|t| self.featurizer.features(&t.state, &t.mask))
            .collect();
        let inputs: Vec<Vec<f64>> = batch
            .iter()
            .zip(&features)
            .map(|(t, f)| critic_input(f, &t.action, &t.mask))
            .collect();
        let mut report = LossReport {
            critic_updates: 1,
            actor_updates: 1,
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

        let alpha = self.temperature();
        let n = batch.len() as f64;
        let d = ACTION_SLOTS;
        self.actor.zero_grad();
        let mut actor_loss = 0.0;
        let mut temperature_grad = 0.0;
        for (t, f) in batch.iter().zip(&features) {
            let (out, tape) = self.actor.forward_tape(f)?;
            let s = self.head.sample(&out, &t.mask, &mut self.rng);
            let x = critic_input(f, &to_padded(&s.action), &t.mask);
            let (q1, g1) = self.critics[0].q_and_input_grad(&x)?;
            let (q2, g2) = self.critics[1].q_and_input_grad(&x)?;
            let (q, dq) = if q1 <= q2 { (q1, g1) } else { (q2, g2) };
            actor_loss += (alpha * s.log_prob - q) / n;
            let mut upstream: Vec<f64> = s.dlogp_dhead.iter().map(|g| alpha * g / n).collect();
            for i in 0..d {
                if t.mask[i] {
                    let da = dq[FEATURES + i];
                    upstream[i] -= da * s.daction_dmean[i] / n;
                    upstream[d + i] -= da * s.daction_dlogstd[i] / n;
                }
            }
            self.actor.backward(&tape, &upstream)?;
            temperature_grad -= (s.log_prob + self.target_entropy(&t.mask)) / n;
        }
        report.actor_loss_sum = ensure_finite("actor loss", actor_loss)?;
        apply_update(&mut self.actor, &mut self.actor_opt, &self.hp)?;
        if self.hp.auto_temperature {
            ensure_finite("temperature gradient", temperature_grad)?;
            let mut log_t = [self.log_temperature];
            adam_step(&mut log_t, &[temperature_grad], &mut self.temperature_opt)?;
            self.log_temperature = log_t[0];
        }
        for k in 0..2 {
            polyak_update(
                self.critic_targets[k].params_mut(),
                self.critics[k].params(),
                self.hp.tau,
            )?;
        }
        self.critic_updates += 1;
        report.temperature = Some(self.temperature());
        Ok(report)
    }
}

impl Agent for Sac {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Sac
    }

    fn hyperparams(&self) -> &AlgoHyperparams {
        &self.hp
    }

    fn act(&mut self, state: &StateVector, mask: &ActionMask, mode: ActMode) -> Result<PolicyAction, AlgoError> {
        let f = self.featurizer.features(state, mask);
        let out = self.actor.forward(&f)?;
        let (action, log_prob) = match mode {
            ActMode::Eval => (self.head.deterministic(&out, mask), 0.0),
            ActMode::Train => {
                let s = self.head.sample(&out, mask, &mut self.rng);
                (s.action, s.log_prob)
            }
        };
        let action = to_padded(&action);
        Ok(PolicyAction {
            action,
            raw: action,
            log_prob,
            value: 0.0,
        })
    }

    fn observe(&mut self, experience: &Experience) -> Result<LossReport, AlgoError> {
        self.buffer.push(Transition {
            state: experience.state,
            mask: experience.mask,
            action: experience.chosen.action,
            reward: experience.reward * self.hp.reward_scale,
            next_state: experience.next_state,
            done: experience.termination.is_terminal(),
        })?;
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
            ("critic1".to_string(), self.critics[0].snapshot()),
            ("critic2".to_string(), self.critics[1].snapshot()),
            ("critic1_target".to_string(), self.critic_targets[0].snapshot()),
            ("critic2_target".to_string(), self.critic_targets[1].snapshot()),
        ]);
        let optimizers = BTreeMap::from([
            ("actor".to_string(), self.actor_opt.clone()),
            ("critic1".to_string(), self.critic_opts[0].clone()),
            ("critic2".to_string(), self.critic_opts[1].clone()),
            ("temperature".to_string(), self.temperature_opt.clone()),
        ]);
        AgentCheckpoint {
            version: CHECKPOINT_VERSION,
            algorithm: Algorithm::Sac,
            hyperparams: self.hp,
            featurizer: self.featurizer,
            networks,
            optimizers,
            log_temperature: Some(self.log_temperature),
            critic_updates: self.critic_updates,
        }
    }
}
