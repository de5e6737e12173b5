use rand::Rng;

use super::{ActionMask, AlgoError, PaddedAction, FEATURES};
use crate::world::StateVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: StateVector,
    pub mask: ActionMask,
    /// Normalised action actually applied.
    pub action: PaddedAction,
    pub reward: f64,
    pub next_state: StateVector,
    /// True only for terminal outcomes; timeouts keep bootstrapping.
    pub done: bool,
}

impl Transition {
    pub fn is_finite(&self) -> bool {
        self.state.is_finite()
            && self.next_state.is_finite()
            && self.reward.is_finite()
            && self.action.iter().all(|a| a.is_finite())
    }
}

/// Fixed-capacity FIFO replay memory with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    warmup: usize,
    storage: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, warmup: usize) -> Result<Self, AlgoError> {
        if capacity == 0 || warmup > capacity {
            return Err(AlgoError::Config(format!(
                "replay capacity {capacity} must be positive and at least the warm-up {warmup}"
            )));
        }
        Ok(Self {
            capacity,
            warmup,
            storage: Vec::new(),
            next: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_warm(&self) -> bool {
        self.storage.len() >= self.warmup.max(1)
    }

    pub fn push(&mut self, transition: Transition) -> Result<(), AlgoError> {
        if !transition.is_finite() {
            return Err(AlgoError::NonFinite {
                what: "transition",
                value: transition.reward,
            });
        }
        if self.storage.len() < self.capacity {
            self.storage.push(transition);
        } else {
            self.storage[self.next] = transition;
        }
        self.next = (self.next + 1) % self.capacity;
        Ok(())
    }

    /// Stored transitions, oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.storage.len() < self.capacity {
            0
        } else {
            self.next
        };
        self.storage[split..].iter().chain(self.storage[..split].iter())
    }

    /// Uniform draw with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>, AlgoError> {
        if !self.is_warm() {
            return Err(AlgoError::WarmupPending {
                occupancy: self.storage.len(),
                warmup: self.warmup,
            });
        }
        if batch > self.storage.len() {
            return Err(AlgoError::BatchTooLarge {
                batch,
                occupancy: self.storage.len(),
            });
        }
        Ok((0..batch).map(|_| rng.gen_range(0..self.storage.len())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<Transition>, AlgoError> {
        Ok(self
            .sample_indices(batch, rng)?
            .into_iter()
            .map(|i| self.storage[i])
            .collect())
    }

    pub fn get(&self, index: usize) -> Option<&Transition> {
        self.storage.get(index)
    }
}

/// One on-policy step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutStep {
    pub features: [f64; FEATURES],
    pub mask: ActionMask,
    pub raw_action: PaddedAction,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    /// Terminal outcome: the return stops here.
    pub done: bool,
    /// Last step of an episode (terminal or truncated).
    pub episode_end: bool,
    /// Value of the state after a truncated final step.
    pub bootstrap: f64,
}

/// Ordered on-policy storage with advantage and return columns.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub steps: Vec<RolloutStep>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn push(&mut self, step: RolloutStep) {
        self.steps.push(step);
    }

    pub fn clear(&mut self) {
        self.steps.clear();
        self.advantages.clear();
        self.returns.clear();
    }

    /// Fills advantages (normalised to zero mean, unit std) and returns.
    pub fn compute_advantages(&mut self, discount: f64, lambda: f64) {
        let (adv, ret) = gae(&self.steps, discount, lambda);
        self.returns = ret;
        let n = adv.len().max(1) as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-8);
        self.advantages = adv.iter().map(|a| (a - mean) / std).collect();
    }
}

/// Generalised advantage estimates and the matching return targets
/// (`advantage + value`). Episodes are delimited by `episode_end`; a
/// truncated episode bootstraps from `bootstrap`.
pub fn gae(steps: &[RolloutStep], discount: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = steps.len();
    let mut adv = vec![0.0; n];
    let mut carry = 0.0;
    for t in (0..n).rev() {
        let s = &steps[t];
        let last = s.episode_end || t + 1 == n;
        let next_value = if s.done {
            0.0
        } else if last {
            s.bootstrap
        } else {
            steps[t + 1].value
        };
        if last {
            carry = 0.0;
        }
        let delta = s.reward + discount * next_value - s.value;
        carry = delta + discount * lambda * carry;
        adv[t] = carry;
    }
    let returns = adv.iter().zip(steps).map(|(a, s)| a + s.value).collect();
    (adv, returns)
}
