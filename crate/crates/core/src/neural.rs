//! Small dense networks with hand-written backpropagation, Adam, Polyak
//! averaging, diagonal Gaussian policy heads and a finite-difference checker.
//!
//! Parameters of an [`Mlp`] live in one flat vector (per layer: row-major
//! weights, then biases), so optimisers, target-network blending and
//! checkpoints all operate on plain slices.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("backward called without a matching forward pass")]
    MissingForward,
    #[error("non-finite {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("polyak coefficient must lie in (0, 1], got {0}")]
    InvalidTau(f64),
    #[error("invalid network layout: {0}")]
    Layout(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerSpan {
    inputs: usize,
    outputs: usize,
    weights: usize,
    biases: usize,
}

/// Fully connected feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    spans: Vec<LayerSpan>,
    params: Vec<f64>,
    grads: Vec<f64>,
}

/// Intermediate values of one forward pass, needed by [`Mlp::backward`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Tape {
    /// `values[0]` is the input, `values[k + 1]` the output of layer `k`.
    values: Vec<Vec<f64>>,
    param_count: usize,
}

impl Tape {
    pub fn output(&self) -> Option<&[f64]> {
        self.values.last().map(Vec::as_slice)
    }
}

fn spans_for(sizes: &[usize]) -> Vec<LayerSpan> {
    let mut offset = 0;
    sizes
        .windows(2)
        .map(|w| {
            let span = LayerSpan {
                inputs: w[0],
                outputs: w[1],
                weights: offset,
                biases: offset + w[0] * w[1],
            };
            offset += w[0] * w[1] + w[1];
            span
        })
        .collect()
}

impl Mlp {
    /// Builds a network with the given layer sizes. Hidden layers use
    /// `hidden`, the last layer `output`. Weights are uniform in
    /// `±1/sqrt(fan_in)`; the last layer is additionally scaled by
    /// `output_scale`. Biases start at zero.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        output_scale: f64,
        rng: &mut R,
    ) -> Result<Self, NeuralError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NeuralError::Layout(format!("bad layer sizes {sizes:?}")));
        }
        let layers = sizes.len() - 1;
        let activations: Vec<Activation> = (0..layers)
            .map(|k| if k + 1 == layers { output } else { hidden })
            .collect();
        let spans = spans_for(sizes);
        let total = spans.last().map(|s| s.biases + s.outputs).unwrap_or(0);
        let mut params = vec![0.0; total];
        for (k, span) in spans.iter().enumerate() {
            let limit = 1.0 / (span.inputs as f64).sqrt();
            let scale = if k + 1 == layers { output_scale } else { 1.0 };
            for w in &mut params[span.weights..span.biases] {
                *w = rng.gen_range(-limit..limit) * scale;
            }
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            activations,
            spans,
            params,
            grads: vec![0.0; total],
        })
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    /// Parameter indices of the last-layer weights that feed output `output`.
    pub fn output_weights(&self, output: usize) -> std::ops::Range<usize> {
        let span = self.spans.last().expect("a network has at least one layer");
        let start = span.weights + output * span.inputs;
        start..start + span.inputs
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Sets every bias of the output layer in `range` to `value`.
    pub fn set_output_bias(&mut self, range: std::ops::Range<usize>, value: f64) {
        let span = *self.spans.last().unwrap();
        for i in range {
            self.params[span.biases + i] = value;
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<(), NeuralError> {
        if input.len() != self.input_size() {
            return Err(NeuralError::Shape {
                expected: self.input_size(),
                actual: input.len(),
            });
        }
        Ok(())
    }

    fn layer_forward(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let span = self.spans[k];
        let act = self.activations[k];
        let w = &self.params[span.weights..span.biases];
        let b = &self.params[span.biases..span.biases + span.outputs];
        (0..span.outputs)
            .map(|o| {
                let row = &w[o * span.inputs..(o + 1) * span.inputs];
                let z = row.iter().zip(x).fold(b[o], |acc, (wi, xi)| acc + wi * xi);
                act.apply(z)
            })
            .collect()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NeuralError> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        for k in 0..self.spans.len() {
            x = self.layer_forward(k, &x);
        }
        Ok(x)
    }

    /// Forward pass that keeps the activations for a later backward pass.
    pub fn forward_tape(&self, input: &[f64]) -> Result<(Vec<f64>, Tape), NeuralError> {
        self.check_input(input)?;
        let mut values = Vec::with_capacity(self.spans.len() + 1);
        values.push(input.to_vec());
        for k in 0..self.spans.len() {
            let next = self.layer_forward(k, values.last().unwrap());
            values.push(next);
        }
        let out = values.last().unwrap().clone();
        Ok((
            out,
            Tape {
                values,
                param_count: self.params.len(),
            },
        ))
    }

    fn check_tape(&self, tape: &Tape, upstream: &[f64]) -> Result<(), NeuralError> {
        if tape.values.len() != self.spans.len() + 1 || tape.param_count != self.params.len() {
            return Err(NeuralError::MissingForward);
        }
        if upstream.len() != self.output_size() {
            return Err(NeuralError::Shape {
                expected: self.output_size(),
                actual: upstream.len(),
            });
        }
        Ok(())
    }

    fn backprop(&self, tape: &Tape, upstream: &[f64], mut grads: Option<&mut [f64]>) -> Vec<f64> {
        let mut delta = upstream.to_vec();
        for k in (0..self.spans.len()).rev() {
            let span = self.spans[k];
            let act = self.activations[k];
            let input = &tape.values[k];
            let output = &tape.values[k + 1];
            for (d, y) in delta.iter_mut().zip(output) {
                *d *= act.derivative_from_output(*y);
            }
            let w = &self.params[span.weights..span.biases];
            if let Some(g) = grads.as_deref_mut() {
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let row = &mut g[span.weights + o * span.inputs..span.weights + (o + 1) * span.inputs];
                    for (gw, xi) in row.iter_mut().zip(input) {
                        *gw += d * xi;
                    }
                    g[span.biases + o] += d;
                }
            }
            let mut next = vec![0.0; span.inputs];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &w[o * span.inputs..(o + 1) * span.inputs];
                for (n, wi) in next.iter_mut().zip(row) {
                    *n += d * wi;
                }
            }
            delta = next;
        }
        delta
    }

    /// Accumulates `∂L/∂θ` into the gradient buffers, where `upstream` is
    /// `∂L/∂output`, and returns `∂L/∂input`.
    pub fn backward(&mut self, tape: &Tape, upstream: &[f64]) -> Result<Vec<f64>, NeuralError> {
        self.check_tape(tape, upstream)?;
        let mut grads = std::mem::take(&mut self.grads);
        let dx = self.backprop(tape, upstream, Some(&mut grads));
        self.grads = grads;
        Ok(dx)
    }

    /// `∂L/∂input` only; parameter gradients are left untouched.
    pub fn input_gradient(&self, tape: &Tape, upstream: &[f64]) -> Result<Vec<f64>, NeuralError> {
        self.check_tape(tape, upstream)?;
        Ok(self.backprop(tape, upstream, None))
    }

    pub fn snapshot(&self) -> MlpSnapshot {
        MlpSnapshot {
            sizes: self.sizes.clone(),
            activations: self.activations.clone(),
            params: self.params.clone(),
        }
    }

    pub fn from_snapshot(snapshot: &MlpSnapshot) -> Result<Self, NeuralError> {
        let sizes = &snapshot.sizes;
        if sizes.len() < 2 || snapshot.activations.len() != sizes.len() - 1 {
            return Err(NeuralError::Layout("activation count does not match layers".into()));
        }
        let spans = spans_for(sizes);
        let total = spans.last().map(|s| s.biases + s.outputs).unwrap_or(0);
        if snapshot.params.len() != total {
            return Err(NeuralError::Shape {
                expected: total,
                actual: snapshot.params.len(),
            });
        }
        Ok(Self {
            sizes: sizes.clone(),
            activations: snapshot.activations.clone(),
            spans,
            params: snapshot.params.clone(),
            grads: vec![0.0; total],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSnapshot {
    pub sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    pub params: Vec<f64>,
}

/// Bias-corrected Adam state for one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
        }
    }
}

/// One Adam update. Nothing is modified if any gradient is non-finite.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<(), NeuralError> {
    if params.len() != grads.len() || state.first_moment.len() != params.len() {
        return Err(NeuralError::Shape {
            expected: params.len(),
            actual: grads.len(),
        });
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(NeuralError::NonFinite {
            what: "gradient",
            index,
        });
    }
    state.step += 1;
    let t = state.step as f64;
    let correction1 = 1.0 - state.beta1.powf(t);
    let correction2 = 1.0 - state.beta2.powf(t);
    let step_size = state.learning_rate / correction1;
    for i in 0..params.len() {
        let g = grads[i];
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        params[i] -= step_size * *m / ((*v / correction2).sqrt() + state.epsilon);
    }
    Ok(())
}

impl Mlp {
    /// Applies Adam with the accumulated gradients.
    pub fn adam_update(&mut self, state: &mut AdamState) -> Result<(), NeuralError> {
        adam_step(&mut self.params, &self.grads, state)
    }
}

/// Rescales `grads` so its L2 norm is at most `max_norm`; returns the original norm.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// `target ← (1 - τ) target + τ online`.
pub fn polyak_update(target: &mut [f64], online: &[f64], tau: f64) -> Result<(), NeuralError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(NeuralError::InvalidTau(tau));
    }
    if target.len() != online.len() {
        return Err(NeuralError::Shape {
            expected: target.len(),
            actual: online.len(),
        });
    }
    for (t, o) in target.iter_mut().zip(online) {
        *t = (1.0 - tau) * *t + tau * o;
    }
    Ok(())
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Squashed actions are kept this far inside `(-1, 1)`.
const SQUASH_LIMIT: f64 = 1.0 - 1e-12;

/// `ln(1 - tanh(u)^2)` without cancellation.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    let z = -2.0 * u;
    let softplus = if z > 30.0 { z } else { z.exp().ln_1p() };
    2.0 * (std::f64::consts::LN_2 - u - softplus)
}

/// Diagonal Gaussian policy head over `dim` action slots. The network emits
/// `[mean_0..mean_d, log_std_0..log_std_d]`; log-stds are clamped to
/// `[log_std_min, log_std_max]`. With `squash` the sample is passed through
/// `tanh` and the log-density carries the change-of-variables term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianHead {
    pub dim: usize,
    pub squash: bool,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

/// Reparameterised draw and its sensitivities with the noise held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSample {
    /// Action after optional squashing; masked slots are zero.
    pub action: Vec<f64>,
    /// Pre-squash sample.
    pub raw_action: Vec<f64>,
    pub noise: Vec<f64>,
    pub log_prob: f64,
    /// `∂ log π / ∂ head_output` (length `2 * dim`).
    pub dlogp_dhead: Vec<f64>,
    /// `∂ action_i / ∂ mean_i`, diagonal.
    pub daction_dmean: Vec<f64>,
    /// `∂ action_i / ∂ head_log_std_i`, diagonal.
    pub daction_dlogstd: Vec<f64>,
}

impl GaussianHead {
    pub fn new(dim: usize, squash: bool) -> Self {
        Self {
            dim,
            squash,
            log_std_min: -5.0,
            log_std_max: 2.0,
        }
    }

    pub fn output_size(&self) -> usize {
        2 * self.dim
    }

    fn log_std(&self, head: &[f64], i: usize) -> (f64, f64) {
        let raw = head[self.dim + i];
        if raw < self.log_std_min {
            (self.log_std_min, 0.0)
        } else if raw > self.log_std_max {
            (self.log_std_max, 0.0)
        } else {
            (raw, 1.0)
        }
    }

    /// Mean action (squashed if configured); masked slots are zero.
    pub fn deterministic(&self, head: &[f64], mask: &[bool]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| {
                if !mask[i] {
                    0.0
                } else if self.squash {
                    head[i].tanh().clamp(-SQUASH_LIMIT, SQUASH_LIMIT)
                } else {
                    head[i]
                }
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, head: &[f64], mask: &[bool], rng: &mut R) -> GaussianSample {
        let noise: Vec<f64> = (0..self.dim)
            .map(|i| if mask[i] { rng.sample(StandardNormal) } else { 0.0 })
            .collect();
        self.reparameterize(head, &noise, mask)
    }

    /// Evaluates `mean + std * noise` (then `tanh` if squashing) and the
    /// log-density of the result, with gradients for the reparameterisation trick.
    pub fn reparameterize(&self, head: &[f64], noise: &[f64], mask: &[bool]) -> GaussianSample {
        let d = self.dim;
        let mut out = GaussianSample {
            action: vec![0.0; d],
            raw_action: vec![0.0; d],
            noise: noise.to_vec(),
            log_prob: 0.0,
            dlogp_dhead: vec![0.0; 2 * d],
            daction_dmean: vec![0.0; d],
            daction_dlogstd: vec![0.0; d],
        };
        for i in 0..d {
            if !mask[i] {
                continue;
            }
            let (log_std, pass) = self.log_std(head, i);
            let std = log_std.exp();
            let u = head[i] + std * noise[i];
            out.raw_action[i] = u;
            out.log_prob += -0.5 * noise[i] * noise[i] - log_std - HALF_LN_2PI;
            out.dlogp_dhead[d + i] = -pass;
            if self.squash {
                let a = u.tanh();
                out.action[i] = a.clamp(-SQUASH_LIMIT, SQUASH_LIMIT);
                out.log_prob -= log_one_minus_tanh_sq(u);
                // d/du of -ln(1 - tanh²u) is 2 tanh u.
                let dterm = 2.0 * a;
                out.dlogp_dhead[i] = dterm;
                out.dlogp_dhead[d + i] += dterm * std * noise[i] * pass;
                let da_du = 1.0 - a * a;
                out.daction_dmean[i] = da_du;
                out.daction_dlogstd[i] = da_du * std * noise[i] * pass;
            } else {
                out.action[i] = u;
                out.daction_dmean[i] = 1.0;
                out.daction_dlogstd[i] = std * noise[i] * pass;
            }
        }
        out
    }

    /// Log-density of a stored unsquashed sample and its gradient with
    /// respect to the head output (the likelihood-ratio form used by PPO).
    pub fn log_prob(&self, head: &[f64], raw_action: &[f64], mask: &[bool]) -> (f64, Vec<f64>) {
        debug_assert!(!self.squash, "likelihood-ratio form is for unsquashed heads");
        let d = self.dim;
        let mut lp = 0.0;
        let mut grad = vec![0.0; 2 * d];
        for i in 0..d {
            if !mask[i] {
                continue;
            }
            let (log_std, pass) = self.log_std(head, i);
            let std = log_std.exp();
            let z = (raw_action[i] - head[i]) / std;
            lp += -0.5 * z * z - log_std - HALF_LN_2PI;
            grad[i] = z / std;
            grad[d + i] = (z * z - 1.0) * pass;
        }
        (lp, grad)
    }

    /// Differential entropy of the unsquashed Gaussian over active slots and
    /// its gradient with respect to the head output.
    pub fn entropy(&self, head: &[f64], mask: &[bool]) -> (f64, Vec<f64>) {
        let d = self.dim;
        let mut h = 0.0;
        let mut grad = vec![0.0; 2 * d];
        for i in 0..d {
            if mask[i] {
                let (log_std, pass) = self.log_std(head, i);
                h += log_std + 0.5 + HALF_LN_2PI;
                grad[d + i] = pass;
            }
        }
        (h, grad)
    }
}

/// Result of comparing backpropagated gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a ReLU kink.
    pub skipped_kinks: usize,
    pub max_relative_error: f64,
}

fn relu_pattern(net: &Mlp, input: &[f64]) -> Vec<bool> {
    let (_, tape) = net.forward_tape(input).expect("input checked by caller");
    tape.values[1..]
        .iter()
        .zip(net.activations())
        .filter(|(_, a)| **a == Activation::Relu)
        .flat_map(|(v, _)| v.iter().map(|x| *x > 0.0))
        .collect()
}

/// Checks `∂(c · net(x))/∂θ` and `∂/∂x` against central differences with
/// step `h`, for the coefficient vector `c` given by `upstream`. When
/// `max_params` is smaller than the parameter count, a uniform random
/// subset of parameters is checked.
pub fn gradient_check<R: Rng + ?Sized>(
    net: &Mlp,
    input: &[f64],
    upstream: &[f64],
    h: f64,
    max_params: usize,
    rng: &mut R,
) -> Result<GradCheckReport, NeuralError> {
    let mut work = net.clone();
    work.zero_grad();
    let (_, tape) = work.forward_tape(input)?;
    let dx = work.backward(&tape, upstream)?;
    let analytic = work.grads().to_vec();
    let loss = |n: &Mlp, x: &[f64]| -> f64 { n.forward(x).unwrap().iter().zip(upstream).map(|(y, c)| y * c).sum() };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);

    let mut report = GradCheckReport {
        checked: 0,
        skipped_kinks: 0,
        max_relative_error: 0.0,
    };
    let indices: Vec<usize> = if max_params >= work.param_count() {
        (0..work.param_count()).collect()
    } else {
        (0..max_params).map(|_| rng.gen_range(0..work.param_count())).collect()
    };
    for i in indices {
        let original = work.params[i];
        work.params[i] = original + h;
        let plus_pattern = relu_pattern(&work, input);
        let plus = loss(&work, input);
        work.params[i] = original - h;
        let minus_pattern = relu_pattern(&work, input);
        let minus = loss(&work, input);
        work.params[i] = original;
        if plus_pattern != minus_pattern {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        report.max_relative_error = report.max_relative_error.max(rel(analytic[i], numeric));
        report.checked += 1;
    }
    let mut x = input.to_vec();
    for j in 0..x.len() {
        let original = x[j];
        x[j] = original + h;
        let plus_pattern = relu_pattern(&work, &x);
        let plus = loss(&work, &x);
        x[j] = original - h;
        let minus_pattern = relu_pattern(&work, &x);
        let minus = loss(&work, &x);
        x[j] = original;
        if plus_pattern != minus_pattern {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        report.max_relative_error = report.max_relative_error.max(rel(dx[j], numeric));
        report.checked += 1;
    }
    Ok(report)
}
