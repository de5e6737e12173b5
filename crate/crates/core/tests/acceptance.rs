//! Acceptance suite. Runs every criterion and prints one PASS/FAIL line each.
//!
//! Pass criterion numbers as arguments to run a subset: `cargo test --test acceptance -- 1 3`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use clcmt::algorithms::{
    critic_input, gradient_suite, ActMode, Agent, AlgoHyperparams, Algorithm, Ddpg, Experience, Ppo, Sac, Td3,
    Transition,
};
use clcmt::dynamics::{equilibrium_gap, idm_acceleration, integrate_kinematics, IdmParams};
use clcmt::environment::{ActionLayout, EnvConfig, EnvError, Environment, EpisodeConfig, Termination};
use clcmt::harness::{compute_utilities, train, EvalStats, RunConfig, UtilityInputs};
use clcmt::rewards::{
    comfort_reward, fuel_emissions_reward, lateral_reward, safety_reward, total_reward, warning_penalty,
    RewardCoefficients, WarningPair,
};
use clcmt::world::{
    gap, sample_scenario, Adoption, Composition, CompositionMode, ControlMode, InitialConditions, LaneGeometry,
    VehicleRole, VehicleState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Verdict = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || {
        format!("took {:.1}s, limit {}s", elapsed.as_secs_f64(), limit.as_secs())
    })
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn desk_config(algorithm: Algorithm) -> RunConfig {
    let path = configs_dir().join(format!("{}_cavcav.toml", algorithm.name()));
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------- 1

fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut networks = 0;
    let widths = [
        (desk_config(Algorithm::Ppo).algorithm.hyperparams, usize::MAX),
        (AlgoHyperparams::default(), 3000),
    ];
    for (hp, max_params) in widths {
        for check in gradient_suite(hp, max_params, 7).map_err(|e| e.to_string())? {
            ensure(check.report.checked > 0, || {
                format!("{} {} checked nothing", check.algorithm.name(), check.network)
            })?;
            worst = worst.max(check.report.max_relative_error);
            networks += 1;
        }
    }
    ensure(worst < 1e-4, || format!("max relative error {worst:.3e}"))?;
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "{networks} networks, max relative error {worst:.2e}, {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 2

fn dynamics_oracles() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dt = 0.1;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (x0, y0) = (rng.gen_range(0.0..150.0), rng.gen_range(0.0..7.5));
        let (vx0, vy0) = (rng.gen_range(0.0..30.0), rng.gen_range(-1.0..1.0));
        let (ax, ay) = (rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));
        let mut s = VehicleState {
            vy: vy0,
            ..VehicleState::at(x0, y0, vx0, 5.0)
        };
        for k in 1..=10_000 {
            s = integrate_kinematics(&s, ax, ay, dt).map_err(|e| e.to_string())?;
            let t = k as f64 * dt;
            let closed = [
                x0 + vx0 * t + 0.5 * ax * t * t,
                y0 + vy0 * t + 0.5 * ay * t * t,
                vx0 + ax * t,
                vy0 + ay * t,
            ];
            for (got, want) in [s.x, s.y, s.vx, s.vy].iter().zip(closed) {
                worst = worst.max((got - want).abs() / want.abs().max(1.0));
            }
        }
    }
    ensure(worst < 1e-9, || format!("kinematics relative error {worst:.3e}"))?;

    let p = IdmParams::default();
    for _ in 0..10_000 {
        let v = rng.gen_range(0.0..35.0);
        let free = idm_acceleration(v, 0.0, f64::INFINITY, &p).accel;
        let expected = (p.max_accel * (1.0 - (v / p.desired_speed).powf(p.accel_exponent))).max(-p.max_brake);
        ensure((free - expected).abs() < 1e-12, || {
            format!("free road at v={v}: {free} vs {expected}")
        })?;
    }
    ensure(
        idm_acceleration(p.desired_speed, 0.0, f64::INFINITY, &p).accel.abs() < 1e-12,
        || "free road does not settle at the desired speed".into(),
    )?;

    for _ in 0..10_000 {
        let v = rng.gen_range(0.0..p.desired_speed * 0.999);
        let s_eq = equilibrium_gap(v, &p).ok_or("no equilibrium below the desired speed")?;
        let a = idm_acceleration(v, 0.0, s_eq, &p).accel;
        ensure(a.abs() < 1e-9, || format!("equilibrium at v={v}, s={s_eq}: a={a}"))?;
        ensure(idm_acceleration(v, 0.0, s_eq * 1.01, &p).accel > 0.0, || {
            format!("no restoring push above s_eq at v={v}")
        })?;
        ensure(idm_acceleration(v, 0.0, s_eq * 0.99, &p).accel < 0.0, || {
            format!("no restoring pull below s_eq at v={v}")
        })?;
    }
    ensure(equilibrium_gap(p.desired_speed, &p).is_none(), || {
        "equilibrium reported at the desired speed".into()
    })?;

    for _ in 0..10_000 {
        let (v, dv, s) = (
            rng.gen_range(0.0..30.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(0.5..200.0),
        );
        let bump = rng.gen_range(1e-3..5.0);
        let a = idm_acceleration(v, dv, s, &p).accel;
        ensure(idm_acceleration(v + bump, dv, s, &p).accel <= a + 1e-12, || {
            format!("not decreasing in speed at {v},{dv},{s}")
        })?;
        ensure(idm_acceleration(v, dv + bump, s, &p).accel <= a + 1e-12, || {
            format!("not decreasing in closing speed at {v},{dv},{s}")
        })?;
        ensure(idm_acceleration(v, dv, s + bump, &p).accel >= a - 1e-12, || {
            format!("not increasing in gap at {v},{dv},{s}")
        })?;
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "kinematics relative error {worst:.1e} over 1e4 steps, IDM properties on 3e4 samples"
    ))
}

// ---------------------------------------------------------------- 3

/// Second implementation of the warning rule: roll both vehicles forward one
/// step at their current accelerations and compare the resulting gap with d0.
fn forward_warning(pair: &WarningPair, dt: f64, c: &RewardCoefficients) -> Option<bool> {
    let follower = VehicleState {
        ax: pair.follower_accel,
        ..VehicleState::at(0.0, 0.0, pair.follower_speed, 5.0)
    };
    let leader = VehicleState {
        ax: pair.leader_accel,
        ..VehicleState::at(pair.gap + 5.0, 0.0, pair.leader_speed, 5.0)
    };
    let f = integrate_kinematics(&follower, pair.follower_accel, 0.0, dt).ok()?;
    let l = integrate_kinematics(&leader, pair.leader_accel, 0.0, dt).ok()?;
    let margin = gap(&l, &f) - c.min_distance;
    // Too close to the threshold for two float evaluations to agree.
    if margin.abs() < 1e-9 {
        return None;
    }
    Some(margin <= 0.0 && pair.follower_command > pair.leader_accel - c.safety_margin)
}

fn random_coefficients(rng: &mut ChaCha8Rng) -> RewardCoefficients {
    RewardCoefficients {
        lateral_slope: -rng.gen_range(0.0..2.0),
        lateral_curvature: -rng.gen_range(0.0..5.0),
        lateral_peak: rng.gen_range(-1.0..1.0),
        lateral_center: rng.gen_range(0.0..0.5),
        lateral_band: rng.gen_range(0.05..2.0),
        min_distance: rng.gen_range(0.5..5.0),
        safety_margin: rng.gen_range(0.0..2.0),
        warning_penalty: rng.gen_range(0.1..10.0),
        ..RewardCoefficients::default()
    }
}

fn reward_suite() -> Verdict {
    let start = Instant::now();
    let config = EnvConfig::default();
    let coeffs = config.rewards;
    let max_steps = 200;
    let envelope = config.reward_envelope(max_steps);
    let best_crash = envelope.best_crash_total(&coeffs);
    let worst_safe = envelope.worst_safe_total(&coeffs);
    ensure(best_crash < worst_safe, || {
        format!("envelope overlaps: crash {best_crash} vs safe {worst_safe}")
    })?;

    let mut env = Environment::new(config).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut steps, mut crash_steps) = (0usize, 0usize);
    let (mut max_crash, mut min_safe) = (f64::NEG_INFINITY, f64::INFINITY);
    let worlds = 10_000;
    for world in 0..worlds {
        let episode = EpisodeConfig {
            max_steps,
            composition_mode: CompositionMode::Mixed,
            seed: world as u64,
            ..EpisodeConfig::default()
        };
        let (_, scenario) = env.reset(&episode).map_err(|e| e.to_string())?;
        let dim = ActionLayout::for_scenario(&scenario).dim();
        let target = scenario.target_centerline();
        let aggression = rng.gen_range(0.0..1.0);
        for _ in 0..40 {
            let action: Vec<f64> = (0..dim).map(|_| rng.gen_range(-4.0..4.0) * aggression).collect();
            let before = env.fleet().clone();
            let out = env.step(&action).map_err(|e| e.to_string())?;
            let after = env.fleet();
            steps += 1;

            let ego_before = before.state(VehicleRole::Ego).map_err(|e| e.to_string())?;
            let ego_after = after.state(VehicleRole::Ego).map_err(|e| e.to_string())?;
            let failed = matches!(out.terminated, Termination::Crash | Termination::OutOfBounds);
            let mut comfort = 0.0;
            let mut controlled = Vec::new();
            for v in after.iter().filter(|v| v.mode == ControlMode::AgentControlled) {
                comfort += comfort_reward(
                    before.state(v.role).map_err(|e| e.to_string())?,
                    &v.state,
                    config.dt,
                    &coeffs,
                );
                controlled.push(v.state);
            }
            let expected = [
                safety_reward(failed, &[ego_after.x - ego_before.x], &coeffs),
                -coeffs.warning_penalty * out.warnings_triggered as f64,
                comfort,
                fuel_emissions_reward(&controlled, &coeffs, &config.fuel, config.dt).reward,
                lateral_reward(ego_after.y, target, &coeffs),
            ];
            for (name, (got, want)) in ["safety", "warning", "comfort", "fuel", "lateral"]
                .iter()
                .zip(out.breakdown.as_array().iter().zip(expected))
            {
                ensure((got - want).abs() <= 1e-12, || {
                    format!("world {world}: {name} {got} vs recomputed {want}")
                })?;
            }
            let summed: f64 = expected.iter().sum();
            ensure((out.reward - summed).abs() <= 1e-12, || {
                format!("world {world}: total {} vs sum {summed}", out.reward)
            })?;
            ensure(out.reward == total_reward(&out.breakdown), || {
                format!("world {world}: total differs from breakdown")
            })?;

            if failed {
                crash_steps += 1;
                max_crash = max_crash.max(out.reward);
                ensure(out.reward <= best_crash, || {
                    format!("world {world}: crash step scored {}", out.reward)
                })?;
            } else {
                min_safe = min_safe.min(out.reward);
                ensure(out.reward >= worst_safe, || {
                    format!("world {world}: safe step scored {}", out.reward)
                })?;
            }
            if out.terminated.is_over() {
                break;
            }
        }
    }
    ensure(crash_steps > 100, || format!("only {crash_steps} crash steps sampled"))?;
    ensure(max_crash < min_safe, || {
        format!("best crash step {max_crash} not below worst safe step {min_safe}")
    })?;

    let (mut pairs_checked, mut ambiguous) = (0usize, 0usize);
    for world in 0..worlds {
        let c = random_coefficients(&mut rng);
        let dt = rng.gen_range(0.05..0.5);
        let pairs: Vec<WarningPair> = (0..rng.gen_range(1..6))
            .map(|_| WarningPair {
                gap: rng.gen_range(-1.0..15.0),
                follower_speed: rng.gen_range(0.0..30.0),
                leader_speed: rng.gen_range(0.0..30.0),
                follower_accel: rng.gen_range(-6.0..3.0),
                leader_accel: rng.gen_range(-6.0..3.0),
                follower_command: rng.gen_range(-6.0..3.0),
            })
            .collect();
        let mut count = 0;
        let mut clear = true;
        for p in &pairs {
            match forward_warning(p, dt, &c) {
                Some(v) => {
                    ensure(v == p.violates(dt, &c), || {
                        format!("world {world}: rules disagree on {p:?}")
                    })?;
                    count += usize::from(v);
                    pairs_checked += 1;
                }
                None => {
                    ambiguous += 1;
                    clear = false;
                }
            }
        }
        if clear {
            let (penalty, n) = warning_penalty(&pairs, dt, &c);
            ensure(n == count, || format!("world {world}: {n} warnings vs {count}"))?;
            ensure(penalty == -c.warning_penalty * count as f64, || {
                format!("world {world}: penalty {penalty}")
            })?;
        }
    }

    for _ in 0..worlds {
        let c = random_coefficients(&mut rng);
        let center = rng.gen_range(0.0..10.0);
        let d = rng.gen_range(0.0..8.0);
        let (up, down) = (
            lateral_reward(center + d, center, &c),
            lateral_reward(center - d, center, &c),
        );
        ensure((up - down).abs() <= 1e-12 * up.abs().max(1.0), || {
            format!("lateral asymmetry at d={d}: {up} vs {down}")
        })?;
    }
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "{worlds} worlds, {steps} steps ({crash_steps} failing), worst crash {max_crash:.1} < worst safe {min_safe:.1}, \
         {pairs_checked} warning pairs agree, {ambiguous} on the threshold"
    ))
}

// ---------------------------------------------------------------- 4 and 5

const DESK_SEEDS: [u64; 3] = [1, 2, 3];

/// Final-window statistics of one desk-scale training run per seed.
fn desk_runs(algorithm: Algorithm) -> &'static [EvalStats] {
    static RUNS: OnceLock<std::sync::Mutex<BTreeMap<&'static str, &'static [EvalStats]>>> = OnceLock::new();
    let cache = RUNS.get_or_init(Default::default);
    if let Some(runs) = cache.lock().unwrap().get(algorithm.name()) {
        return runs;
    }
    let base = desk_config(algorithm);
    let runs: Vec<EvalStats> = DESK_SEEDS
        .iter()
        .map(|&seed| {
            let mut config = base;
            config.seed = seed;
            config.schedule.checkpoint_every = 0;
            config.schedule.record_trajectories = clcmt::harness::RecordMode::None;
            let dir = tempfile::tempdir().expect("tempdir");
            let summary = train(&config, &dir.path().join("run"))
                .unwrap_or_else(|e| panic!("{} seed {seed}: {e}", algorithm.name()));
            let window = config.schedule.utility_window.min(summary.records.len());
            EvalStats::from_records(
                &summary.records[summary.records.len() - window..],
                config.episode.max_steps,
            )
        })
        .collect();
    let runs: &'static [EvalStats] = Box::leak(runs.into_boxed_slice());
    cache.lock().unwrap().insert(algorithm.name(), runs);
    runs
}

fn seed_mean(runs: &[EvalStats], f: impl Fn(&EvalStats) -> f64) -> f64 {
    runs.iter().map(f).sum::<f64>() / runs.len() as f64
}

fn desk_training() -> Verdict {
    let start = Instant::now();
    let runs = desk_runs(Algorithm::Ppo);
    let crash = seed_mean(runs, |s| s.crash_rate);
    let steps = seed_mean(runs, |s| s.mean_steps);
    let per_seed: Vec<String> = runs.iter().map(|s| format!("{:.1}", s.mean_steps)).collect();
    let detail = format!(
        "PPO final-100 crash rate {:.3}, mean steps {steps:.1} (seeds: {}), {:.0}s",
        crash,
        per_seed.join(", "),
        start.elapsed().as_secs_f64()
    );
    ensure(crash <= 0.02, || detail.clone())?;
    ensure((20.0..=35.0).contains(&steps), || detail.clone())?;
    within(start.elapsed(), Duration::from_secs(30 * 60))?;
    Ok(detail)
}

fn algorithm_ordering() -> Verdict {
    let mut inputs = Vec::new();
    let mut crash_free = Vec::new();
    for algorithm in Algorithm::ALL {
        let runs = desk_runs(algorithm);
        let mean = |f: fn(&UtilityInputs) -> f64| seed_mean(runs, |s| f(&s.utility_inputs()));
        inputs.push((
            algorithm.name().to_string(),
            UtilityInputs {
                completion_time: mean(|u| u.completion_time),
                crash_rate: mean(|u| u.crash_rate),
                comfort_cost: mean(|u| u.comfort_cost),
                fuel_cost: mean(|u| u.fuel_cost),
            },
        ));
        if algorithm != Algorithm::Sac && runs.iter().all(|s| s.crash_rate == 0.0) {
            crash_free.push(algorithm.name());
        }
    }
    let report = compute_utilities(&inputs).map_err(|e| e.to_string())?;
    let ppo = report.row("ppo").ok_or("no ppo row")?;
    let sac = report.row("sac").ok_or("no sac row")?;
    let fmt = |r: [f64; 4]| r.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("/");
    let detail = format!(
        "PPO {} vs SAC {}; crash-free: {}",
        fmt(ppo.as_array()),
        fmt(sac.as_array()),
        if crash_free.is_empty() {
            "none".into()
        } else {
            crash_free.join(", ")
        }
    );
    eprintln_table(&report.to_string());
    ensure(ppo.dominates(sac), || detail.clone())?;
    ensure(crash_free.len() >= 2, || detail.clone())?;
    Ok(detail)
}

fn eprintln_table(table: &str) {
    for line in table.lines() {
        say(&format!("      {line}"));
    }
}

// ---------------------------------------------------------------- 6

fn determinism() -> Verdict {
    let start = Instant::now();
    for algorithm in Algorithm::ALL {
        let mut config = desk_config(algorithm);
        config.schedule.episodes = 50;
        config.schedule.checkpoint_every = 0;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let read = |name: &str| -> Result<Vec<u8>, String> {
            let run = dir.path().join(name);
            train(&config, &run).map_err(|e| e.to_string())?;
            std::fs::read(run.join("metrics.csv")).map_err(|e| e.to_string())
        };
        let (a, b) = (read("a")?, read("b")?);
        ensure(a.len() > 50, || {
            format!("{} wrote an empty metrics file", algorithm.name())
        })?;
        ensure(a == b, || {
            format!("{} metrics.csv differs between identical runs", algorithm.name())
        })?;
    }
    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(format!(
        "50-episode metrics.csv byte-identical for all four learners, {:.0}s",
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 7

/// Transitions from random play in the mixed scenario, so every mask occurs.
fn environment_batch(n: usize, seed: u64) -> Vec<Transition> {
    let mut env = Environment::new(EnvConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut episode = 0;
    while out.len() < n {
        let cfg = EpisodeConfig {
            composition_mode: CompositionMode::Mixed,
            seed: seed * 1000 + episode,
            ..EpisodeConfig::default()
        };
        episode += 1;
        let (mut state, scenario) = env.reset(&cfg).unwrap();
        let layout = ActionLayout::for_scenario(&scenario);
        while out.len() < n {
            let mut action = [0.0; 4];
            for slot in layout.active_slots() {
                action[slot] = rng.gen_range(-1.0..1.0);
            }
            let physical = layout.denormalize(&action, &env.config().action_bounds);
            let step = env.step(&physical).unwrap();
            out.push(Transition {
                state,
                mask: layout.mask,
                action,
                reward: step.reward,
                next_state: step.next_state,
                done: step.terminated.is_terminal(),
            });
            state = step.next_state;
            if step.terminated.is_over() {
                break;
            }
        }
    }
    out
}

fn algorithm_reductions() -> Verdict {
    let batch = environment_batch(256, 11);
    ensure(batch.iter().any(|t| t.done), || {
        "batch has no terminal transition".into()
    })?;
    let base = desk_config(Algorithm::Td3).algorithm.hyperparams;

    let hp = AlgoHyperparams {
        smoothing_noise: 0.0,
        policy_delay: 1,
        shared_twin_init: true,
        ..base
    };
    let ddpg = Ddpg::new(hp, 21).map_err(|e| e.to_string())?;
    let mut td3 = Td3::new(hp, 21).map_err(|e| e.to_string())?;
    let a = ddpg.td_targets(&batch).map_err(|e| e.to_string())?;
    let b = td3.td_targets(&batch).map_err(|e| e.to_string())?;
    let td3_gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    ensure(td3_gap < 1e-9, || {
        format!("TD3 targets differ from DDPG by {td3_gap:.3e}")
    })?;

    let hp = desk_config(Algorithm::Ppo).algorithm.hyperparams;
    let mut ppo = Ppo::new(hp, 5).map_err(|e| e.to_string())?;
    let mut env = Environment::new(desk_config(Algorithm::Ppo).environment).map_err(|e| e.to_string())?;
    let (mut updates, mut ratio_gap) = (0usize, 0.0f64);
    for episode in 0..40 {
        let cfg = EpisodeConfig {
            seed: episode,
            ..EpisodeConfig::default()
        };
        let (mut state, scenario) = env.reset(&cfg).map_err(|e| e.to_string())?;
        let layout = ActionLayout::for_scenario(&scenario);
        loop {
            let chosen = ppo
                .act(&state, &layout.mask, ActMode::Train)
                .map_err(|e| e.to_string())?;
            let step = env
                .step(&layout.denormalize(&chosen.action, &env.config().action_bounds))
                .map_err(|e| e.to_string())?;
            let report = ppo
                .observe(&Experience {
                    state,
                    mask: layout.mask,
                    chosen,
                    reward: step.reward,
                    next_state: step.next_state,
                    termination: step.terminated,
                })
                .map_err(|e| e.to_string())?;
            if let Some(d) = report.first_ratio_deviation {
                updates += 1;
                ratio_gap = ratio_gap.max(d);
            }
            state = step.next_state;
            if step.terminated.is_over() {
                break;
            }
        }
    }
    ensure(updates > 0, || "PPO never updated".into())?;
    ensure(ratio_gap < 1e-6, || {
        format!("first-minibatch ratio deviates by {ratio_gap:.3e}")
    })?;

    let hp = AlgoHyperparams {
        initial_temperature: 0.0,
        auto_temperature: false,
        ..desk_config(Algorithm::Sac).algorithm.hyperparams
    };
    let mut sac = Sac::new(hp, 4).map_err(|e| e.to_string())?;
    // Collapse the policy onto its mean so the target action is deterministic.
    sac.head.log_std_min = -40.0;
    sac.head.log_std_max = -40.0;
    let targets = sac.td_targets(&batch).map_err(|e| e.to_string())?;
    let mut sac_gap = 0.0f64;
    for (t, y) in batch.iter().zip(targets) {
        let expected = if t.done {
            t.reward
        } else {
            let f = sac.featurizer.features(&t.next_state, &t.mask);
            let head = sac.actor.forward(&f).map_err(|e| e.to_string())?;
            let mean = sac.head.deterministic(&head, &t.mask);
            let mut action = [0.0; 4];
            action.copy_from_slice(&mean[..4]);
            let x = critic_input(&f, &action, &t.mask);
            let q0 = sac.critic_targets[0].forward(&x).map_err(|e| e.to_string())?[0];
            let q1 = sac.critic_targets[1].forward(&x).map_err(|e| e.to_string())?[0];
            t.reward + hp.discount * q0.min(q1)
        };
        sac_gap = sac_gap.max((y - expected).abs());
    }
    ensure(sac_gap < 1e-9, || {
        format!("entropy-off SAC targets differ by {sac_gap:.3e}")
    })?;
    Ok(format!(
        "TD3-DDPG gap {td3_gap:.1e}, PPO ratio gap {ratio_gap:.1e} over {updates} updates, SAC gap {sac_gap:.1e}"
    ))
}

// ---------------------------------------------------------------- 8

fn chi_square(observed: &[usize], expected: &[f64]) -> (f64, f64) {
    let stat = observed
        .iter()
        .zip(expected)
        .map(|(o, e)| (*o as f64 - e).powi(2) / e)
        .sum();
    let dist = ChiSquared::new((observed.len() - 1) as f64).unwrap();
    (stat, dist.inverse_cdf(0.99))
}

/// Kolmogorov-Smirnov statistic of `samples` against U(0, 1).
fn ks_uniform(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, x)| (x - i as f64 / n).max((i + 1) as f64 / n - x))
        .fold(0.0, f64::max)
}

fn scenario_statistics() -> Verdict {
    let n = 10_000;
    let base = InitialConditions::default();
    let geometry = LaneGeometry::default();
    let nominal = base.nominal_layout(&geometry);
    let ego_nominal = nominal.iter().find(|(r, _)| *r == VehicleRole::Ego).unwrap().1;
    let p = 0.5;

    let mut joint = [0usize; 4];
    let mut offsets = [Vec::new(), Vec::new(), Vec::new()];
    for seed in 0..n {
        let s = sample_scenario(
            seed as u64,
            p,
            &base,
            &geometry,
            CompositionMode::Fixed(Composition::HvHv),
        )
        .map_err(|e| e.to_string())?;
        let lead = s.adoption.lead.ok_or("HV lead without an adoption draw")?;
        let lag = s.adoption.lag.ok_or("HV lag without an adoption draw")?;
        joint[usize::from(lead) * 2 + usize::from(lag)] += 1;
        let ego = s.fleet.state(VehicleRole::Ego).map_err(|e| e.to_string())?;
        offsets[0].push((ego.x - ego_nominal.x) / base.noise.x);
        offsets[1].push((ego.y - ego_nominal.y) / base.noise.y);
        offsets[2].push((ego.vx - ego_nominal.vx) / base.noise.v);
    }
    let expected = [
        n as f64 * (1.0 - p) * (1.0 - p),
        n as f64 * (1.0 - p) * p,
        n as f64 * p * (1.0 - p),
        n as f64 * p * p,
    ];
    let (adopt_stat, adopt_crit) = chi_square(&joint, &expected);
    ensure(adopt_stat < adopt_crit, || {
        format!("adoption chi-square {adopt_stat:.2} >= {adopt_crit:.2}")
    })?;

    let ks_crit = (-0.5 * (0.01f64 / 2.0).ln()).sqrt() / (n as f64).sqrt();
    let mut ks_worst = 0.0f64;
    for (axis, samples) in ["x", "y", "v"].iter().zip(offsets) {
        ensure(samples.iter().all(|u| (0.0..=1.0).contains(u)), || {
            format!("{axis} noise outside its range")
        })?;
        let d = ks_uniform(samples);
        ensure(d < ks_crit, || format!("{axis} noise KS {d:.4} >= {ks_crit:.4}"))?;
        ks_worst = ks_worst.max(d);
    }

    let mut compositions = [0usize; 4];
    for seed in 0..n {
        let s = sample_scenario(seed as u64, p, &base, &geometry, CompositionMode::Mixed).map_err(|e| e.to_string())?;
        compositions[s.composition as usize] += 1;
        let agents = [VehicleRole::Lead, VehicleRole::Lag]
            .iter()
            .filter(|r| {
                s.fleet
                    .get(**r)
                    .map(|v| v.mode == ControlMode::AgentControlled)
                    .unwrap_or(false)
            })
            .count();
        ensure(ActionLayout::for_scenario(&s).dim() == 2 + agents, || {
            format!("seed {seed}: action dimension off")
        })?;
    }
    let (mix_stat, mix_crit) = chi_square(&compositions, &[n as f64 / 4.0; 4]);
    ensure(mix_stat < mix_crit, || {
        format!("composition chi-square {mix_stat:.2} >= {mix_crit:.2}")
    })?;

    let mut env = Environment::new(EnvConfig::default()).map_err(|e| e.to_string())?;
    let mut cases = 0;
    for composition in Composition::ALL {
        for (lead_adopts, lag_adopts) in [(false, false), (false, true), (true, false), (true, true)] {
            let mut s = sample_scenario(0, 0.0, &base, &geometry, CompositionMode::Fixed(composition))
                .map_err(|e| e.to_string())?;
            s.adoption = Adoption {
                lead: (!composition.lead_is_cav()).then_some(lead_adopts),
                lag: (!composition.lag_is_cav()).then_some(lag_adopts),
            };
            let lead = composition.lead_is_cav() || lead_adopts;
            let lag = composition.lag_is_cav() || lag_adopts;
            for (role, controlled) in [(VehicleRole::Lead, lead), (VehicleRole::Lag, lag)] {
                s.fleet.get_mut(role).map_err(|e| e.to_string())?.mode = if controlled {
                    ControlMode::AgentControlled
                } else {
                    ControlMode::IdmControlled
                };
            }
            let want = 2 + usize::from(lead) + usize::from(lag);
            env.reset_to(&EpisodeConfig::default(), s).map_err(|e| e.to_string())?;
            let layout = env.action_layout().map_err(|e| e.to_string())?;
            ensure(layout.dim() == want, || {
                format!(
                    "{composition} {lead_adopts}/{lag_adopts}: dim {} vs {want}",
                    layout.dim()
                )
            })?;
            ensure(
                matches!(env.step(&vec![0.0; want + 1]), Err(EnvError::DimensionMismatch { .. })),
                || format!("{composition}: oversized action accepted"),
            )?;
            env.step(&vec![0.0; want]).map_err(|e| format!("{composition}: {e}"))?;
            cases += 1;
        }
    }
    Ok(format!(
        "adoption chi2 {adopt_stat:.2} < {adopt_crit:.2}, composition chi2 {mix_stat:.2}, reset-noise KS {ks_worst:.4} < {ks_crit:.4}, \
         {cases} action-dimension cases"
    ))
}

// ----------------------------------------------------------------

fn say(line: &str) {
    use std::io::Write;
    // Bypasses test output capture so the verdicts always reach the log.
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Verdict); 8] = [
        (1, "gradient fidelity", gradient_fidelity),
        (2, "dynamics oracles", dynamics_oracles),
        (3, "reward suite", reward_suite),
        (4, "desk-scale PPO training", desk_training),
        (5, "algorithm ordering", algorithm_ordering),
        (6, "determinism", determinism),
        (7, "algorithm reductions", algorithm_reductions),
        (8, "scenario statistics", scenario_statistics),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let verdict = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match verdict {
            Ok(detail) => say(&format!("PASS {id} {name}: {detail}")),
            Err(why) => {
                failed += 1;
                say(&format!("FAIL {id} {name}: {why}"));
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
