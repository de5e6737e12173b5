//! Proximal policy optimisation with a clipped surrogate, a separate value
//! network and generalised advantage estimation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{
    agent_rng, apply_update, build_mlp, check_restore, ensure_finite, scheduled_rate, ActMode, ActionMask, Agent,
    AgentCheckpoint, AlgoError, AlgoHyperparams, Algorithm, Experience, Featurizer, LossReport, PaddedAction,
    PolicyAction, RolloutBuffer, RolloutStep, CHECKPOINT_VERSION, FEATURES,
};
use crate::environment::ACTION_SLOTS;
use crate::neural::{Activation, AdamState, GaussianHead, Mlp};
use crate::world::StateVector;

/// `min(ρ A, clip(ρ, 1-ε, 1+ε) A)` and its derivative in `ρ`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    if unclipped <= clipped {
        (unclipped, advantage)
    } else if (1.0 - clip..=1.0 + clip).contains(&ratio) {
        (clipped, advantage)
    } else {
        (clipped, 0.0)
    }
}

/// Squashes the mean outputs into `[-1, 1]` so that exploration around a
/// saturated mean still reaches actions inside the bounds.
fn bounded_mean(out: &[f64]) -> Vec<f64> {
    let mut b = out.to_vec();
    b[..ACTION_SLOTS].iter_mut().for_each(|m| *m = m.tanh());
    b
}

#[derive(Debug, Clone)]
pub struct Ppo {
    pub hp: AlgoHyperparams,
    pub featurizer: Featurizer,
    pub head: GaussianHead,
    pub actor: Mlp,
    pub value: Mlp,
    actor_opt: AdamState,
    value_opt: AdamState,
    pub rollout: RolloutBuffer,
    rng: ChaCha8Rng,
    updates: u64,
}

impl Ppo {
    pub fn new(hp: AlgoHyperparams, seed: u64) -> Result<Self, AlgoError> {
        hp.validate()?;
        let mut rng = agent_rng(seed);
        let head = GaussianHead::new(ACTION_SLOTS, false);
        let mut actor = build_mlp(&hp, FEATURES, head.output_size(), Activation::Identity, 1e-2, &mut rng)?;
        let initial_log_std = hp.exploration_noise.ln().clamp(head.log_std_min, head.log_std_max);
        actor.set_output_bias(ACTION_SLOTS..head.output_size(), initial_log_std);
        if !hp.state_dependent_std {
            for o in ACTION_SLOTS..head.output_size() {
                let range = actor.output_weights(o);
                actor.params_mut()[range].iter_mut().for_each(|w| *w = 0.0);
            }
        }
        let value = build_mlp(&hp, FEATURES, 1, Activation::Identity, 1.0, &mut rng)?;
        Ok(Self {
            actor_opt: AdamState::new(actor.param_count(), hp.learning_rate),
            value_opt: AdamState::new(value.param_count(), hp.learning_rate),
            actor,
            value,
            head,
            rollout: RolloutBuffer::default(),
            featurizer: Featurizer::default(),
            rng,
            hp,
            updates: 0,
        })
    }

    pub fn restore(checkpoint: &AgentCheckpoint, seed: u64) -> Result<Self, AlgoError> {
        check_restore(checkpoint, Algorithm::Ppo)?;
        let actor = checkpoint.network("actor")?;
        let value = checkpoint.network("value")?;
        let head = GaussianHead::new(ACTION_SLOTS, false);
        if actor.output_size() != head.output_size() {
            return Err(AlgoError::Checkpoint(
                "actor output does not match the policy head".into(),
            ));
        }
        Ok(Self {
            actor_opt: checkpoint.optimizer("actor", &actor)?,
            value_opt: checkpoint.optimizer("value", &value)?,
            actor,
            value,
            head,
            rollout: RolloutBuffer::default(),
            featurizer: checkpoint.featurizer,
            rng: agent_rng(seed),
            hp: checkpoint.hyperparams,
            updates: checkpoint.critic_updates,
        })
    }

    pub fn state_value(&self, features: &[f64; FEATURES]) -> Result<f64, AlgoError> {
        Ok(self.value.forward(features)?[0])
    }

    /// Runs the clipped-surrogate epochs over the stored rollout and clears it.
    pub fn update(&mut self) -> Result<LossReport, AlgoError> {
        self.rollout.compute_advantages(self.hp.discount, self.hp.gae_lambda);
        let n = self.rollout.len();
        let mut report = LossReport::default();
        let mut order: Vec<usize> = (0..n).collect();
        let mut first = true;
        'epochs: for _ in 0..self.hp.ppo_epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.hp.ppo_minibatch) {
                let m = chunk.len() as f64;
                self.actor.zero_grad();
                self.value.zero_grad();
                let mut policy_loss = 0.0;
                let mut value_loss = 0.0;
                let mut deviation: f64 = 0.0;
                let mut kl = 0.0;
                for &i in chunk {
                    let step = &self.rollout.steps[i];
                    let adv = self.rollout.advantages[i];
                    let ret = self.rollout.returns[i];
                    let (raw_out, tape) = self.actor.forward_tape(&step.features)?;
                    let out = bounded_mean(&raw_out);
                    let (log_prob, dlogp) = self.head.log_prob(&out, &step.raw_action, &step.mask);
                    let ratio = (log_prob - step.log_prob).exp();
                    if !ratio.is_finite() {
                        report.skipped_samples += 1;
                        continue;
                    }
                    deviation = deviation.max((ratio - 1.0).abs());
                    kl += (step.log_prob - log_prob) / m;
                    let (objective, dobj) = clipped_surrogate(ratio, adv, self.hp.clip_ratio);
                    policy_loss -= objective / m;
                    let mut upstream: Vec<f64> = dlogp.iter().map(|g| -dobj * ratio * g / m).collect();
                    if self.hp.entropy_coef > 0.0 {
                        let (entropy, dh) = self.head.entropy(&out, &step.mask);
                        policy_loss -= self.hp.entropy_coef * entropy / m;
                        for (u, g) in upstream.iter_mut().zip(dh) {
                            *u -= self.hp.entropy_coef * g / m;
                        }
                    }
                    for (u, m) in upstream.iter_mut().zip(&out[..ACTION_SLOTS]) {
                        *u *= 1.0 - m * m;
                    }
                    self.actor.backward(&tape, &upstream)?;

                    let (v, vtape) = self.value.forward_tape(&step.features)?;
                    let err = v[0] - ret;
                    value_loss += err * err / m;
                    self.value.backward(&vtape, &[2.0 * err / m])?;
                }
                if first {
                    report.first_ratio_deviation = Some(deviation);
                    first = false;
                }
                if matches!(self.hp.target_kl, Some(limit) if kl > 1.5 * limit) {
                    break 'epochs;
                }
                if !self.hp.state_dependent_std {
                    for o in ACTION_SLOTS..self.head.output_size() {
                        let range = self.actor.output_weights(o);
                        self.actor.grads_mut()[range].iter_mut().for_each(|g| *g = 0.0);
                    }
                }
                let rate = scheduled_rate(&self.hp, self.updates);
                self.actor_opt.learning_rate = rate;
                self.value_opt.learning_rate = rate;
                ensure_finite("policy loss", policy_loss)?;
                ensure_finite("value loss", value_loss)?;
                apply_update(&mut self.actor, &mut self.actor_opt, &self.hp)?;
                apply_update(&mut self.value, &mut self.value_opt, &self.hp)?;
                report.actor_updates += 1;
                report.critic_updates += 1;
                report.actor_loss_sum += policy_loss;
                report.critic_loss_sum += value_loss;
                self.updates += 1;
            }
        }
        self.rollout.clear();
        Ok(report)
    }
}

fn clamp_unit(raw: &[f64], mask: &ActionMask) -> PaddedAction {
    let mut a = [0.0; ACTION_SLOTS];
    for i in 0..ACTION_SLOTS {
        if mask[i] {
            a[i] = raw[i].clamp(-1.0, 1.0);
        }
    }
    a
}

impl Agent for Ppo {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Ppo
    }

    fn hyperparams(&self) -> &AlgoHyperparams {
        &self.hp
    }

    fn act(&mut self, state: &StateVector, mask: &ActionMask, mode: ActMode) -> Result<PolicyAction, AlgoError> {
        let f = self.featurizer.features(state, mask);
        let out = bounded_mean(&self.actor.forward(&f)?);
        match mode {
            ActMode::Eval => {
                let mean = self.head.deterministic(&out, mask);
                Ok(PolicyAction {
                    action: clamp_unit(&mean, mask),
                    raw: clamp_unit(&mean, mask),
                    log_prob: 0.0,
                    value: self.state_value(&f)?,
                })
            }
            ActMode::Train => {
                let s = self.head.sample(&out, mask, &mut self.rng);
                let mut raw = [0.0; ACTION_SLOTS];
                raw.copy_from_slice(&s.raw_action);
                Ok(PolicyAction {
                    action: clamp_unit(&raw, mask),
                    raw,
                    log_prob: s.log_prob,
                    value: self.state_value(&f)?,
                })
            }
        }
    }

    /// Updates run at episode boundaries once a full horizon is stored, so
    /// every update sees complete episodes.
    fn observe(&mut self, experience: &Experience) -> Result<LossReport, AlgoError> {
        let term = experience.termination;
        let bootstrap = if term.is_over() && !term.is_terminal() {
            let next = self.featurizer.features(&experience.next_state, &experience.mask);
            self.state_value(&next)?
        } else {
            0.0
        };
        let step = RolloutStep {
            features: self.featurizer.features(&experience.state, &experience.mask),
            mask: experience.mask,
            raw_action: experience.chosen.raw,
            log_prob: experience.chosen.log_prob,
            reward: experience.reward * self.hp.reward_scale,
            value: experience.chosen.value,
            done: term.is_terminal(),
            episode_end: term.is_over(),
            bootstrap,
        };
        if !(step.reward.is_finite() && step.log_prob.is_finite() && step.value.is_finite()) {
            return Err(AlgoError::NonFinite {
                what: "rollout step",
                value: step.reward,
            });
        }
        self.rollout.push(step);
        if term.is_over() && self.rollout.len() >= self.hp.horizon() {
            self.update()
        } else {
            Ok(LossReport::default())
        }
    }

    fn checkpoint(&self) -> AgentCheckpoint {
        AgentCheckpoint {
            version: CHECKPOINT_VERSION,
            algorithm: Algorithm::Ppo,
            hyperparams: self.hp,
            featurizer: self.featurizer,
            networks: BTreeMap::from([
                ("actor".to_string(), self.actor.snapshot()),
                ("value".to_string(), self.value.snapshot()),
            ]),
            optimizers: BTreeMap::from([
                ("actor".to_string(), self.actor_opt.clone()),
                ("value".to_string(), self.value_opt.clone()),
            ]),
            log_temperature: None,
            critic_updates: self.updates,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::Termination;
    use rand::{Rng, SeedableRng};

    fn small() -> AlgoHyperparams {
        AlgoHyperparams {
            hidden_width: 32,
            rollout_horizon: Some(64),
            ppo_minibatch: 16,
            ppo_epochs: 3,
            learning_rate: 1e-3,
            ..AlgoHyperparams::default()
        }
    }

    #[test]
    fn surrogate_plateaus_outside_the_clip_range() {
        let eps = 0.2;
        let h = 1e-6;
        for (ratio, adv) in [
            (1.5, 2.0),
            (0.5, -1.0),
            (1.1, 2.0),
            (0.9, -1.0),
            (1.5, -1.0),
            (0.5, 2.0),
        ] {
            let (_, grad) = clipped_surrogate(ratio, adv, eps);
            let fd = (clipped_surrogate(ratio + h, adv, eps).0 - clipped_surrogate(ratio - h, adv, eps).0) / (2.0 * h);
            assert!((grad - fd).abs() < 1e-6, "ratio {ratio} adv {adv}: {grad} vs {fd}");
        }
        assert_eq!(clipped_surrogate(1.5, 2.0, eps).1, 0.0);
        assert_eq!(clipped_surrogate(0.5, -1.0, eps).1, 0.0);
    }

    fn run_episodes(agent: &mut Ppo, episodes: usize, seed: u64) -> LossReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut report = LossReport::default();
        let mask = [true, true, true, false];
        for _ in 0..episodes {
            for t in 0..20 {
                let mut s = [0.0; StateVector::LEN];
                s.iter_mut().for_each(|v| *v = rng.gen_range(0.0..20.0));
                let state = StateVector(s);
                let chosen = agent.act(&state, &mask, ActMode::Train).unwrap();
                let termination = if t == 19 {
                    Termination::Timeout
                } else {
                    Termination::Running
                };
                let exp = Experience {
                    state,
                    mask,
                    chosen,
                    reward: -chosen.action[0].powi(2),
                    next_state: state,
                    termination,
                };
                report.merge(&agent.observe(&exp).unwrap());
            }
        }
        report
    }

    #[test]
    fn first_minibatch_ratios_are_one() {
        let mut agent = Ppo::new(small(), 3).unwrap();
        let report = run_episodes(&mut agent, 4, 1);
        assert!(report.actor_updates > 0);
        assert!(report.first_ratio_deviation.unwrap() < 1e-6);
        assert!(agent.rollout.is_empty());
    }

    #[test]
    fn updates_wait_for_horizon_and_episode_end() {
        let mut agent = Ppo::new(small(), 3).unwrap();
        let report = run_episodes(&mut agent, 3, 2);
        assert_eq!(report.actor_updates, 0);
        assert_eq!(agent.rollout.len(), 60);
        let report = run_episodes(&mut agent, 1, 3);
        // 80 steps in minibatches of 16 for 3 epochs.
        assert_eq!(report.actor_updates, 15);
    }

    #[test]
    fn eval_is_deterministic() {
        let mut agent = Ppo::new(small(), 3).unwrap();
        let s = StateVector([7.0; StateVector::LEN]);
        let mask = [true; 4];
        assert_eq!(
            agent.act(&s, &mask, ActMode::Eval).unwrap(),
            agent.act(&s, &mask, ActMode::Eval).unwrap()
        );
    }

    #[test]
    fn learns_a_quadratic_bandit() {
        let mut agent = Ppo::new(small(), 5).unwrap();
        run_episodes(&mut agent, 60, 9);
        let s = StateVector([7.0; StateVector::LEN]);
        let mean = agent.act(&s, &[true, true, true, false], ActMode::Eval).unwrap().action[0];
        assert!(mean.abs() < 0.15, "mean {mean}");
    }
}
