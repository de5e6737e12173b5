//! Training runs, evaluation, utility tables and trajectory export.
//!
//! A run directory holds:
//! - `config.toml`: the resolved configuration
//! - `manifest.json`: seed, crate version and reward-coefficient digest
//! - `metrics.csv`: one row per training episode
//! - `checkpoints/*.json`: periodic and final learner checkpoints
//! - `trajectories/steps.csv`: step rows for recorded episodes
//! - `eval.csv`: periodic greedy evaluations, when enabled

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::algorithms::{
    build_agent, restore_agent, ActMode, ActionMask, Agent, AgentCheckpoint, AlgoError, AlgoHyperparams, Algorithm,
    Experience, LossReport, PaddedAction, PolicyAction,
};
use crate::environment::{
    ActionLayout, EnvConfig, EnvError, Environment, EpisodeConfig, Termination, TRAJECTORY_HEADER,
};
use crate::rewards::RewardBreakdown;
use crate::world::{CompositionMode, StateVector, VehicleRole};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Algo(#[from] AlgoError),
    #[error("{path}: malformed {what}: {detail}")]
    Parse {
        path: PathBuf,
        what: &'static str,
        detail: String,
    },
    #[error("training halted at episode {episode}: {source} (diagnostic checkpoint {checkpoint})")]
    Halted {
        episode: usize,
        checkpoint: PathBuf,
        #[source]
        source: AlgoError,
    },
    #[error("{0}")]
    Usage(String),
}

impl HarnessError {
    /// Errors caused by what the user asked for rather than by the run itself.
    pub fn is_usage(&self) -> bool {
        matches!(self, HarnessError::Config(_) | HarnessError::Usage(_))
            || matches!(self, HarnessError::Parse { what, .. } if *what == "config")
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Episode-level settings shared by every episode of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSettings {
    pub max_steps: usize,
    pub success_lateral_tol: f64,
    pub success_hold_steps: usize,
    pub composition_mode: CompositionMode,
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        let e = EpisodeConfig::default();
        Self {
            max_steps: e.max_steps,
            success_lateral_tol: e.success_lateral_tol,
            success_hold_steps: e.success_hold_steps,
            composition_mode: e.composition_mode,
        }
    }
}

impl EpisodeSettings {
    pub fn episode(&self, seed: u64) -> EpisodeConfig {
        EpisodeConfig {
            max_steps: self.max_steps,
            success_lateral_tol: self.success_lateral_tol,
            success_hold_steps: self.success_hold_steps,
            composition_mode: self.composition_mode,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgorithmSection {
    pub name: Algorithm,
    pub hyperparams: AlgoHyperparams,
}

impl Default for AlgorithmSection {
    fn default() -> Self {
        Self {
            name: Algorithm::Ppo,
            hyperparams: AlgoHyperparams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordMode {
    None,
    /// Only episodes inside the early, mid and late windows.
    Stages,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub episodes: usize,
    /// Write a checkpoint every this many episodes; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Greedy evaluation every this many episodes; 0 disables it.
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub moving_average_window: usize,
    /// Trailing episodes summarised for utility tables.
    pub utility_window: usize,
    pub record_trajectories: RecordMode,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            episodes: 5000,
            checkpoint_every: 500,
            eval_every: 0,
            eval_episodes: 20,
            moving_average_window: 50,
            utility_window: 1000,
            record_trajectories: RecordMode::Stages,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub environment: EnvConfig,
    pub episode: EpisodeSettings,
    pub algorithm: AlgorithmSection,
    pub schedule: Schedule,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.environment
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.episode
            .episode(0)
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.algorithm
            .hyperparams
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let s = &self.schedule;
        if s.episodes == 0 || s.moving_average_window == 0 || s.utility_window == 0 {
            return Err(HarnessError::Config(
                "schedule.episodes, moving_average_window and utility_window must be positive".into(),
            ));
        }
        if s.eval_every > 0 && s.eval_episodes == 0 {
            return Err(HarnessError::Config(
                "schedule.eval_episodes must be positive when evaluating".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run configuration always serialises")
    }

    /// Hex SHA-256 of the reward coefficients and fuel table, so runs with
    /// different reward shaping are never compared by accident.
    pub fn reward_digest(&self) -> String {
        let payload = serde_json::to_string(&(&self.environment.rewards, &self.environment.fuel))
            .expect("reward coefficients serialise");
        let digest = Sha256::digest(payload.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Seed of episode `index` within a run, via a SplitMix64 step.
pub fn episode_seed(run_seed: u64, index: usize) -> u64 {
    let mut z = run_seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Summary of one training episode, one metrics.csv row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub seed: u64,
    pub composition: String,
    pub total_reward: f64,
    pub components: RewardBreakdown,
    pub steps: usize,
    pub termination: Termination,
    pub warnings: usize,
    pub reward_moving_average: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub updates: usize,
    pub temperature: f64,
}

pub const METRICS_HEADER: &str = "episode,seed,composition,total_reward,r_safety,r_warning,r_comfort,r_fuel,r_lateral,\
steps,termination,warnings,crash,success,reward_ma,critic_loss,actor_loss,updates,temperature";

impl EpisodeRecord {
    pub fn crashed(&self) -> bool {
        self.termination == Termination::Crash
    }

    pub fn succeeded(&self) -> bool {
        self.termination == Termination::Success
    }

    pub fn to_csv_row(&self) -> String {
        let c = &self.components;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.episode,
            self.seed,
            self.composition,
            self.total_reward,
            c.safety,
            c.warning,
            c.comfort,
            c.fuel,
            c.lateral,
            self.steps,
            self.termination,
            self.warnings,
            u8::from(self.crashed()),
            u8::from(self.succeeded()),
            self.reward_moving_average,
            self.critic_loss,
            self.actor_loss,
            self.updates,
            self.temperature
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self, String> {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != METRICS_HEADER.split(',').count() {
            return Err(format!(
                "expected {} columns, found {}",
                METRICS_HEADER.split(',').count(),
                cols.len()
            ));
        }
        fn num<T: FromStr>(s: &str, name: &str) -> Result<T, String> {
            s.parse().map_err(|_| format!("bad {name} `{s}`"))
        }
        let termination = match cols[10] {
            "running" => Termination::Running,
            "success" => Termination::Success,
            "crash" => Termination::Crash,
            "out_of_bounds" => Termination::OutOfBounds,
            "timeout" => Termination::Timeout,
            other => return Err(format!("bad termination `{other}`")),
        };
        Ok(Self {
            episode: num(cols[0], "episode")?,
            seed: num(cols[1], "seed")?,
            composition: cols[2].to_string(),
            total_reward: num(cols[3], "total_reward")?,
            components: RewardBreakdown {
                safety: num(cols[4], "r_safety")?,
                warning: num(cols[5], "r_warning")?,
                comfort: num(cols[6], "r_comfort")?,
                fuel: num(cols[7], "r_fuel")?,
                lateral: num(cols[8], "r_lateral")?,
            },
            steps: num(cols[9], "steps")?,
            termination,
            warnings: num(cols[11], "warnings")?,
            reward_moving_average: num(cols[14], "reward_ma")?,
            critic_loss: num(cols[15], "critic_loss")?,
            actor_loss: num(cols[16], "actor_loss")?,
            updates: num(cols[17], "updates")?,
            temperature: num(cols[18], "temperature")?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpisodeRecord>, HarnessError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines.next().transpose().map_err(io_err(path))?.unwrap_or_default();
    if header != METRICS_HEADER {
        return Err(HarnessError::Parse {
            path: path.to_path_buf(),
            what: "metrics header",
            detail: header,
        });
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let line = line.map_err(io_err(path))?;
            EpisodeRecord::from_csv_row(&line).map_err(|detail| HarnessError::Parse {
                path: path.to_path_buf(),
                what: "metrics row",
                detail: format!("line {}: {detail}", i + 2),
            })
        })
        .collect()
}

/// Learner weights plus everything needed to rebuild its environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub run_seed: u64,
    pub episodes_completed: usize,
    pub environment: EnvConfig,
    pub episode: EpisodeSettings,
    pub agent: AgentCheckpoint,
}

impl RunCheckpoint {
    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let text = serde_json::to_string(self).expect("checkpoint serialises");
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
            path: path.to_path_buf(),
            what: "checkpoint",
            detail: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    algorithm: Algorithm,
    crate_version: String,
    reward_digest: String,
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub records: Vec<EpisodeRecord>,
}

/// Index windows of the trajectory stages for a run of `episodes` episodes.
/// Early, mid and late each span `min(200, episodes / 2)` episodes.
pub fn stage_windows(episodes: usize) -> [(Stage, Range<usize>); 3] {
    let k = 200.min(episodes / 2);
    let mid_start = (episodes - k) / 2;
    [
        (Stage::Early, 0..k),
        (Stage::Mid, mid_start..mid_start + k),
        (Stage::Late, episodes - k..episodes),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Early,
    Mid,
    Late,
    /// The late episode with the highest total reward.
    FinalOptimal,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Early, Stage::Mid, Stage::Late, Stage::FinalOptimal];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Early => "early",
            Stage::Mid => "mid",
            Stage::Late => "late",
            Stage::FinalOptimal => "final-optimal",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| {
            HarnessError::Usage(format!(
                "unknown stage `{s}` (expected early, mid, late or final-optimal)"
            ))
        })
    }
}

fn should_record(mode: RecordMode, episodes: usize, index: usize) -> bool {
    match mode {
        RecordMode::None => false,
        RecordMode::All => true,
        RecordMode::Stages => stage_windows(episodes).iter().any(|(_, r)| r.contains(&index)),
    }
}

/// Chooses actions for an episode and optionally learns from the outcome.
pub trait Driver {
    fn decide(&mut self, state: &StateVector, mask: &ActionMask) -> Result<PolicyAction, HarnessError>;

    fn learn(&mut self, _experience: &Experience) -> Result<(), HarnessError> {
        Ok(())
    }
}

/// A fixed, hand-written policy mapping observations to normalised actions.
pub struct ScriptedPolicy<F>(pub F);

impl<F> Driver for ScriptedPolicy<F>
where
    F: FnMut(&StateVector, &ActionMask) -> PaddedAction,
{
    fn decide(&mut self, state: &StateVector, mask: &ActionMask) -> Result<PolicyAction, HarnessError> {
        let action = (self.0)(state, mask);
        Ok(PolicyAction {
            action,
            raw: action,
            ..PolicyAction::default()
        })
    }
}

struct Learner<'a> {
    agent: &'a mut dyn Agent,
    losses: LossReport,
}

impl Driver for Learner<'_> {
    fn decide(&mut self, state: &StateVector, mask: &ActionMask) -> Result<PolicyAction, HarnessError> {
        Ok(self.agent.act(state, mask, ActMode::Train)?)
    }

    fn learn(&mut self, experience: &Experience) -> Result<(), HarnessError> {
        let report = self.agent.observe(experience)?;
        self.losses.merge(&report);
        Ok(())
    }
}

struct Greedy<'a> {
    agent: &'a mut dyn Agent,
}

impl Driver for Greedy<'_> {
    fn decide(&mut self, state: &StateVector, mask: &ActionMask) -> Result<PolicyAction, HarnessError> {
        Ok(self.agent.act(state, mask, ActMode::Eval)?)
    }
}

/// Totals of one played episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTally {
    pub composition: String,
    pub total_reward: f64,
    pub components: RewardBreakdown,
    pub steps: usize,
    pub termination: Termination,
    pub warnings: usize,
}

pub fn play_episode(
    env: &mut Environment,
    episode: &EpisodeConfig,
    driver: &mut dyn Driver,
) -> Result<EpisodeTally, HarnessError> {
    let (mut state, scenario) = env.reset(episode)?;
    let layout = ActionLayout::for_scenario(&scenario);
    let bounds = env.config().action_bounds;
    let mut tally = EpisodeTally {
        composition: scenario.composition.name().to_string(),
        total_reward: 0.0,
        components: RewardBreakdown::default(),
        steps: 0,
        termination: Termination::Running,
        warnings: 0,
    };
    while !tally.termination.is_over() {
        let chosen = driver.decide(&state, &layout.mask)?;
        let outcome = env.step(&layout.denormalize(&chosen.action, &bounds))?;
        tally.steps += 1;
        tally.total_reward += outcome.reward;
        tally.components.add_assign(&outcome.breakdown);
        tally.warnings += outcome.warnings_triggered;
        tally.termination = outcome.terminated;
        driver.learn(&Experience {
            state,
            mask: layout.mask,
            chosen,
            reward: outcome.reward,
            next_state: outcome.next_state,
            termination: outcome.terminated,
        })?;
        state = outcome.next_state;
    }
    Ok(tally)
}

const EVAL_SALT: u64 = 0x00e7_a100_0000_0000;

/// Trains a learner as configured, writing the run directory as it goes.
pub fn train(config: &RunConfig, run_dir: &Path) -> Result<TrainSummary, HarnessError> {
    train_with_progress(config, run_dir, &mut |_| {})
}

/// As [`train`], calling `progress` after every finished episode.
pub fn train_with_progress(
    config: &RunConfig,
    run_dir: &Path,
    progress: &mut dyn FnMut(&EpisodeRecord),
) -> Result<TrainSummary, HarnessError> {
    config.validate()?;
    let metrics_path = run_dir.join("metrics.csv");
    if metrics_path.exists() {
        return Err(HarnessError::Usage(format!(
            "{} already holds a run; choose an empty directory",
            run_dir.display()
        )));
    }
    let checkpoint_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&checkpoint_dir).map_err(io_err(&checkpoint_dir))?;
    let config_path = run_dir.join("config.toml");
    fs::write(&config_path, config.to_toml_string()).map_err(io_err(&config_path))?;
    let manifest = Manifest {
        seed: config.seed,
        algorithm: config.algorithm.name,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        reward_digest: config.reward_digest(),
    };
    let manifest_path = run_dir.join("manifest.json");
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serialises"),
    )
    .map_err(io_err(&manifest_path))?;

    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(io_err(&metrics_path))?);
    writeln!(metrics, "{METRICS_HEADER}").map_err(io_err(&metrics_path))?;

    let schedule = config.schedule;
    let traj_path = run_dir.join("trajectories").join("steps.csv");
    let mut trajectories = if schedule.record_trajectories != RecordMode::None {
        let dir = run_dir.join("trajectories");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut w = BufWriter::new(File::create(&traj_path).map_err(io_err(&traj_path))?);
        writeln!(w, "{TRAJECTORY_HEADER}").map_err(io_err(&traj_path))?;
        Some(w)
    } else {
        None
    };
    let eval_path = run_dir.join("eval.csv");
    let mut eval_out = if schedule.eval_every > 0 {
        let mut w = BufWriter::new(File::create(&eval_path).map_err(io_err(&eval_path))?);
        writeln!(w, "episode,{EVAL_HEADER}").map_err(io_err(&eval_path))?;
        Some(w)
    } else {
        None
    };

    let mut env = Environment::new(config.environment)?;
    let mut agent = build_agent(config.algorithm.name, config.algorithm.hyperparams, config.seed)?;
    let checkpoint_at = |episodes_completed: usize, agent: &dyn Agent| RunCheckpoint {
        run_seed: config.seed,
        episodes_completed,
        environment: config.environment,
        episode: config.episode,
        agent: agent.checkpoint(),
    };
    let mut records: Vec<EpisodeRecord> = Vec::with_capacity(schedule.episodes);

    for index in 0..schedule.episodes {
        let seed = episode_seed(config.seed, index);
        let recording = trajectories.is_some() && should_record(schedule.record_trajectories, schedule.episodes, index);
        if recording {
            env.record_next_episode(index);
        }
        let mut learner = Learner {
            agent: agent.as_mut(),
            losses: LossReport::default(),
        };
        let tally = match play_episode(&mut env, &config.episode.episode(seed), &mut learner) {
            Ok(t) => t,
            Err(HarnessError::Algo(source)) => {
                metrics.flush().map_err(io_err(&metrics_path))?;
                let path = checkpoint_dir.join("diagnostic.json");
                checkpoint_at(index, agent.as_ref()).save(&path)?;
                return Err(HarnessError::Halted {
                    episode: index,
                    checkpoint: path,
                    source,
                });
            }
            Err(other) => return Err(other),
        };
        let losses = learner.losses;
        if recording {
            let rows = env.take_recording();
            if let Some(w) = trajectories.as_mut() {
                for row in rows {
                    row.write_csv(w).map_err(io_err(&traj_path))?;
                }
            }
        }

        let start = (index + 1).saturating_sub(schedule.moving_average_window);
        let window_sum: f64 = records[start..].iter().map(|r| r.total_reward).sum::<f64>() + tally.total_reward;
        let record = EpisodeRecord {
            episode: index,
            seed,
            composition: tally.composition,
            total_reward: tally.total_reward,
            components: tally.components,
            steps: tally.steps,
            termination: tally.termination,
            warnings: tally.warnings,
            reward_moving_average: window_sum / (index + 1 - start) as f64,
            critic_loss: losses.mean_critic_loss(),
            actor_loss: losses.mean_actor_loss(),
            updates: losses.critic_updates,
            temperature: losses.temperature.unwrap_or(0.0),
        };
        writeln!(metrics, "{}", record.to_csv_row()).map_err(io_err(&metrics_path))?;
        progress(&record);
        records.push(record);

        let done = index + 1;
        if schedule.checkpoint_every > 0 && done % schedule.checkpoint_every == 0 && done < schedule.episodes {
            let path = checkpoint_dir.join(format!("episode_{done:06}.json"));
            checkpoint_at(done, agent.as_ref()).save(&path)?;
        }
        if let Some(w) = eval_out.as_mut() {
            if done % schedule.eval_every == 0 {
                let ck = checkpoint_at(done, agent.as_ref());
                let stats = evaluate(&ck, schedule.eval_episodes, config.seed ^ EVAL_SALT)?;
                writeln!(w, "{done},{}", stats.to_csv_row()).map_err(io_err(&eval_path))?;
            }
        }
    }

    metrics.flush().map_err(io_err(&metrics_path))?;
    if let Some(mut w) = trajectories {
        w.flush().map_err(io_err(&traj_path))?;
    }
    if let Some(mut w) = eval_out {
        w.flush().map_err(io_err(&eval_path))?;
    }
    checkpoint_at(schedule.episodes, agent.as_ref()).save(&checkpoint_dir.join("final.json"))?;
    Ok(TrainSummary {
        run_dir: run_dir.to_path_buf(),
        records,
    })
}

/// Aggregate statistics over a set of episodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub episodes: usize,
    /// Steps to success; failed episodes count as `max_steps`.
    pub mean_completion_steps: f64,
    pub mean_steps: f64,
    pub crash_rate: f64,
    pub success_rate: f64,
    pub timeout_rate: f64,
    pub out_of_bounds_rate: f64,
    pub mean_total_reward: f64,
    /// Mean per-episode `|Σ R_c|`.
    pub mean_comfort_cost: f64,
    /// Mean per-episode `|Σ R_f|`.
    pub mean_fuel_cost: f64,
    pub mean_warnings: f64,
}

pub const EVAL_HEADER: &str = "episodes,mean_completion_steps,mean_steps,crash_rate,success_rate,timeout_rate,\
out_of_bounds_rate,mean_total_reward,mean_comfort_cost,mean_fuel_cost,mean_warnings";

impl EvalStats {
    pub fn from_records(records: &[EpisodeRecord], max_steps: usize) -> Self {
        let n = records.len().max(1) as f64;
        let mean = |f: &dyn Fn(&EpisodeRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        let rate = |t: Termination| records.iter().filter(|r| r.termination == t).count() as f64 / n;
        Self {
            episodes: records.len(),
            mean_completion_steps: mean(&|r| {
                if r.succeeded() {
                    r.steps as f64
                } else {
                    max_steps as f64
                }
            }),
            mean_steps: mean(&|r| r.steps as f64),
            crash_rate: rate(Termination::Crash),
            success_rate: rate(Termination::Success),
            timeout_rate: rate(Termination::Timeout),
            out_of_bounds_rate: rate(Termination::OutOfBounds),
            mean_total_reward: mean(&|r| r.total_reward),
            mean_comfort_cost: mean(&|r| r.components.comfort.abs()),
            mean_fuel_cost: mean(&|r| r.components.fuel.abs()),
            mean_warnings: mean(&|r| r.warnings as f64),
        }
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.episodes,
            self.mean_completion_steps,
            self.mean_steps,
            self.crash_rate,
            self.success_rate,
            self.timeout_rate,
            self.out_of_bounds_rate,
            self.mean_total_reward,
            self.mean_comfort_cost,
            self.mean_fuel_cost,
            self.mean_warnings
        )
    }

    pub fn utility_inputs(&self) -> UtilityInputs {
        UtilityInputs {
            completion_time: self.mean_completion_steps,
            crash_rate: self.crash_rate,
            comfort_cost: self.mean_comfort_cost,
            fuel_cost: self.mean_fuel_cost,
        }
    }
}

/// Plays `episodes` episodes with `driver`; episode `k` uses `episode_seed(seed, k)`.
pub fn run_episodes(
    environment: &EnvConfig,
    settings: &EpisodeSettings,
    episodes: usize,
    seed: u64,
    driver: &mut dyn Driver,
) -> Result<(EvalStats, Vec<EpisodeRecord>), HarnessError> {
    let mut env = Environment::new(*environment)?;
    let mut records = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let s = episode_seed(seed, k);
        let t = play_episode(&mut env, &settings.episode(s), driver)?;
        records.push(EpisodeRecord {
            episode: k,
            seed: s,
            composition: t.composition,
            total_reward: t.total_reward,
            components: t.components,
            steps: t.steps,
            termination: t.termination,
            warnings: t.warnings,
            reward_moving_average: 0.0,
            critic_loss: 0.0,
            actor_loss: 0.0,
            updates: 0,
            temperature: 0.0,
        });
    }
    Ok((EvalStats::from_records(&records, settings.max_steps), records))
}

/// Noiseless rollouts of a checkpointed policy.
pub fn evaluate(checkpoint: &RunCheckpoint, episodes: usize, seed: u64) -> Result<EvalStats, HarnessError> {
    if episodes == 0 {
        return Err(HarnessError::Usage("evaluation needs at least one episode".into()));
    }
    let mut agent = restore_agent(&checkpoint.agent, seed)
        .map_err(|e| HarnessError::Usage(format!("checkpoint does not load: {e}")))?;
    let mut driver = Greedy { agent: agent.as_mut() };
    Ok(run_episodes(
        &checkpoint.environment,
        &checkpoint.episode,
        episodes,
        seed,
        &mut driver,
    )?
    .0)
}

/// As [`evaluate`], but first checks the checkpoint was trained under `config`.
pub fn evaluate_with_config(
    checkpoint: &RunCheckpoint,
    config: &RunConfig,
    episodes: usize,
    seed: u64,
) -> Result<EvalStats, HarnessError> {
    if checkpoint.environment != config.environment || checkpoint.episode != config.episode {
        return Err(HarnessError::Usage(
            "checkpoint was trained with a different environment or episode configuration".into(),
        ));
    }
    if checkpoint.agent.algorithm != config.algorithm.name {
        return Err(HarnessError::Usage(format!(
            "checkpoint holds a {} policy but the configuration names {}",
            checkpoint.agent.algorithm, config.algorithm.name
        )));
    }
    evaluate(checkpoint, episodes, seed)
}

/// Raw lower-is-better measures behind one utility row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityInputs {
    pub completion_time: f64,
    pub crash_rate: f64,
    pub comfort_cost: f64,
    pub fuel_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilityRow {
    pub name: String,
    pub efficiency: f64,
    pub safety: f64,
    pub comfort: f64,
    pub ecology: f64,
}

impl UtilityRow {
    pub fn as_array(&self) -> [f64; 4] {
        [self.efficiency, self.safety, self.comfort, self.ecology]
    }

    /// Whether this row is at least as good as `other` in every column.
    pub fn dominates(&self, other: &UtilityRow) -> bool {
        self.as_array().iter().zip(other.as_array()).all(|(a, b)| *a >= b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilityReport {
    pub rows: Vec<UtilityRow>,
}

impl UtilityReport {
    pub fn row(&self, name: &str) -> Option<&UtilityRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

impl fmt::Display for UtilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>6} {:>6} {:>6} {:>6}",
            "algorithm", "U_t", "U_s", "U_c", "U_e"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<12} {:>6.3} {:>6.3} {:>6.3} {:>6.3}",
                r.name, r.efficiency, r.safety, r.comfort, r.ecology
            )?;
        }
        Ok(())
    }
}

/// Min-max normalisation of lower-is-better measures: `U = (max - x) / (max - min)`.
/// A column where every entry is equal scores 1 throughout.
pub fn compute_utilities(stats: &[(String, UtilityInputs)]) -> Result<UtilityReport, HarnessError> {
    if stats.len() < 2 {
        return Err(HarnessError::Usage(format!(
            "utilities need at least two algorithms, got {}",
            stats.len()
        )));
    }
    let column = |pick: fn(&UtilityInputs) -> f64| -> Result<Vec<f64>, HarnessError> {
        let raw: Vec<f64> = stats.iter().map(|(_, s)| pick(s)).collect();
        if let Some(bad) = raw.iter().find(|v| !v.is_finite()) {
            return Err(HarnessError::Usage(format!("non-finite utility input {bad}")));
        }
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(raw
            .iter()
            .map(|x| {
                if max == min {
                    1.0
                } else {
                    ((max - x) / (max - min)).clamp(0.0, 1.0)
                }
            })
            .collect())
    };
    let t = column(|s| s.completion_time)?;
    let s = column(|s| s.crash_rate)?;
    let c = column(|s| s.comfort_cost)?;
    let e = column(|s| s.fuel_cost)?;
    Ok(UtilityReport {
        rows: stats
            .iter()
            .enumerate()
            .map(|(i, (name, _))| UtilityRow {
                name: name.clone(),
                efficiency: t[i],
                safety: s[i],
                comfort: c[i],
                ecology: e[i],
            })
            .collect(),
    })
}

/// Utility inputs of a finished run: its trailing `utility_window` training episodes.
pub fn run_utility_inputs(run_dir: &Path) -> Result<(Algorithm, EvalStats), HarnessError> {
    let config = RunConfig::load(&run_dir.join("config.toml"))?;
    let records = read_metrics(&run_dir.join("metrics.csv"))?;
    if records.is_empty() {
        return Err(HarnessError::Usage(format!(
            "{} has no finished episodes",
            run_dir.display()
        )));
    }
    let start = records.len().saturating_sub(config.schedule.utility_window);
    Ok((
        config.algorithm.name,
        EvalStats::from_records(&records[start..], config.episode.max_steps),
    ))
}

/// Utility table over several run directories, one row per run named after
/// its algorithm (suffixed with the directory name on clashes).
pub fn utilities_for_runs(run_dirs: &[PathBuf]) -> Result<UtilityReport, HarnessError> {
    let mut stats = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let (algorithm, s) = run_utility_inputs(dir)?;
        stats.push((algorithm, dir, s));
    }
    let named: Vec<(String, UtilityInputs)> = stats
        .iter()
        .map(|(a, dir, s)| {
            let clash = stats.iter().filter(|(b, _, _)| b == a).count() > 1;
            let name = if clash {
                format!(
                    "{a}:{}",
                    dir.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
                )
            } else {
                a.to_string()
            };
            (name, s.utility_inputs())
        })
        .collect();
    compute_utilities(&named)
}

/// Episodes belonging to `stage` in a run with the given per-episode rewards.
pub fn stage_episodes(stage: Stage, total_rewards: &[f64]) -> Vec<usize> {
    let windows = stage_windows(total_rewards.len());
    match stage {
        Stage::Early => windows[0].1.clone().collect(),
        Stage::Mid => windows[1].1.clone().collect(),
        Stage::Late => windows[2].1.clone().collect(),
        Stage::FinalOptimal => {
            let late = windows[2].1.clone();
            late.max_by(|a, b| total_rewards[*a].total_cmp(&total_rewards[*b]).then(b.cmp(a)))
                .into_iter()
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportReport {
    pub path: PathBuf,
    pub episodes_written: usize,
    /// Requested episodes with no recorded steps.
    pub missing: Vec<usize>,
}

pub const EXPORT_HEADER: &str = "stage,episode,step,x,y";

/// Writes the ego `(x, y)` polylines of `episodes` from a run's recorded
/// trajectories to `out`, tagged with `label`.
pub fn export_episodes(
    run_dir: &Path,
    label: &str,
    episodes: &[usize],
    out: &Path,
) -> Result<ExportReport, HarnessError> {
    let wanted: std::collections::BTreeSet<usize> = episodes.iter().copied().collect();
    let mut found = std::collections::BTreeSet::new();
    let mut rows: Vec<(usize, u64, String, String)> = Vec::new();
    let traj = run_dir.join("trajectories").join("steps.csv");
    if !wanted.is_empty() && traj.exists() {
        let file = File::open(&traj).map_err(io_err(&traj))?;
        let ego = VehicleRole::Ego.name();
        for (i, line) in BufReader::new(file).lines().enumerate().skip(1) {
            let line = line.map_err(io_err(&traj))?;
            let cols: Vec<&str> = line.split(',').collect();
            let parse_err = |detail: String| HarnessError::Parse {
                path: traj.clone(),
                what: "trajectory row",
                detail: format!("line {}: {detail}", i + 1),
            };
            if cols.len() != TRAJECTORY_HEADER.split(',').count() {
                return Err(parse_err(format!("{} columns", cols.len())));
            }
            let episode: usize = cols[0]
                .parse()
                .map_err(|_| parse_err(format!("episode `{}`", cols[0])))?;
            if cols[2] != ego || !wanted.contains(&episode) {
                continue;
            }
            let step: u64 = cols[1].parse().map_err(|_| parse_err(format!("step `{}`", cols[1])))?;
            found.insert(episode);
            rows.push((episode, step, cols[3].to_string(), cols[4].to_string()));
        }
    }
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut w = BufWriter::new(File::create(out).map_err(io_err(out))?);
    writeln!(w, "{EXPORT_HEADER}").map_err(io_err(out))?;
    for (episode, step, x, y) in &rows {
        writeln!(w, "{label},{episode},{step},{x},{y}").map_err(io_err(out))?;
    }
    w.flush().map_err(io_err(out))?;
    Ok(ExportReport {
        path: out.to_path_buf(),
        episodes_written: found.len(),
        missing: wanted.difference(&found).copied().collect(),
    })
}

/// Exports one stage of a run to `<run>/exports/<stage>.csv`.
pub fn export_trajectories(run_dir: &Path, stage: Stage) -> Result<ExportReport, HarnessError> {
    let records = read_metrics(&run_dir.join("metrics.csv"))?;
    let rewards: Vec<f64> = records.iter().map(|r| r.total_reward).collect();
    let episodes = stage_episodes(stage, &rewards);
    let out = run_dir.join("exports").join(format!("{}.csv", stage.name()));
    export_episodes(run_dir, stage.name(), &episodes, &out)
}
