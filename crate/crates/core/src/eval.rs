//! Evaluation protocols: success/cycle-time/energy summaries, sensitivity
//! suites, and boom-tip trajectory profiles.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crane::{CraneModel, DT, NUM_JOINTS};
use crate::curriculum::LessonSpec;
use crate::env::{Action, Env, EnvConfig, RunningStats, TerminationCause, SIM_STEPS_PER_DECISION};
use crate::error::Result;
use crate::nn::PolicyNet;
use crate::world::{BaseCompliance, LogMode, PerturbationConfig};

/// Decides an action from the environment and its observation.
pub trait Controller {
    fn reset(&mut self) {}
    fn act(&mut self, env: &Env, obs: &[f64]) -> Result<Action>;
}

/// Acts at the policy mean.
#[derive(Clone, Copy, Debug)]
pub struct PolicyController<'a> {
    pub net: &'a PolicyNet,
}

impl Controller for PolicyController<'_> {
    fn act(&mut self, _env: &Env, obs: &[f64]) -> Result<Action> {
        let (mean, _, _) = self.net.policy_forward(obs)?;
        Ok(std::array::from_fn(|j| mean[j]))
    }
}

/// Always commands zero joint speed.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroController;

impl Controller for ZeroController {
    fn act(&mut self, _env: &Env, _obs: &[f64]) -> Result<Action> {
        Ok([0.0; NUM_JOINTS])
    }
}

/// Replays a fixed action sequence, then holds zero.
#[derive(Clone, Debug, Default)]
pub struct ScriptedSequence {
    pub actions: Vec<Action>,
    cursor: usize,
}

impl ScriptedSequence {
    pub fn new(actions: Vec<Action>) -> Self {
        Self { actions, cursor: 0 }
    }
}

impl Controller for ScriptedSequence {
    fn reset(&mut self) {
        self.cursor = 0;
    }

    fn act(&mut self, _env: &Env, _obs: &[f64]) -> Result<Action> {
        let a = self.actions.get(self.cursor).copied().unwrap_or([0.0; NUM_JOINTS]);
        self.cursor += 1;
        Ok(a)
    }
}

/// Joint positions placing the boom tip at `tip` (crane frame) with the
/// given telescope extension, elbow up. `None` when out of reach or range.
pub fn boom_ik(tip: &Vector3<f64>, q4: f64, model: &CraneModel) -> Option<[f64; 4]> {
    let g = &model.geometry;
    let a = &model.actuators;
    let mut q1 = tip.y.atan2(tip.x);
    if q1 < a[0].range_min {
        q1 += 2.0 * PI;
    }
    let r = tip.x.hypot(tip.y);
    let h = tip.z - g.pillar_height;
    let (l1, l2) = (g.inner_boom_length, g.outer_boom_length + q4);
    let c3 = (r * r + h * h - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
    if !(-1.0..=1.0).contains(&c3) {
        return None;
    }
    let q3 = -c3.acos();
    let q2 = h.atan2(r) - (l2 * q3.sin()).atan2(l1 + l2 * q3.cos());
    let q = [q1, q2, q3, q4];
    q.iter()
        .zip(a.iter())
        .all(|(v, s)| *v >= s.range_min && *v <= s.range_max)
        .then_some(q)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum GraspPhase {
    Approach,
    Descend,
    Close,
    Lift,
}

/// Hand-written joint-space grasp: hover above the observed log, align
/// the claws, descend, close, lift.
#[derive(Clone, Debug)]
pub struct ScriptedGrasp {
    pub hover: f64,
    /// Grapple centre height above the log axis when closing.
    pub grip_height: f64,
    pub gain: f64,
    pub tolerance: f64,
    phase: GraspPhase,
    settle: u32,
}

impl Default for ScriptedGrasp {
    fn default() -> Self {
        Self {
            hover: 0.6,
            grip_height: 0.12,
            gain: 1.5,
            tolerance: 0.01,
            phase: GraspPhase::Approach,
            settle: 0,
        }
    }
}

impl ScriptedGrasp {
    fn joint_target(&self, env: &Env, centre_height: f64) -> Option<[f64; 5]> {
        let w = env.world();
        let log = w.observed_log_position();
        let model = env.model();
        let tip = Vector3::new(log.x, log.y, log.z + centre_height + model.geometry.pendulum_length);
        let q4 = (0..=16)
            .map(|k| 0.1 * k as f64)
            .filter(|q4| *q4 <= model.actuators[3].range_max)
            .find_map(|q4| boom_ik(&tip, q4, model))?;
        let yaw = w.observed_log_heading() - PI / 2.0;
        let q5 = (yaw - q4[0] + PI / 2.0).rem_euclid(PI) - PI / 2.0;
        Some([q4[0], q4[1], q4[2], q4[3], q5])
    }
}

impl Controller for ScriptedGrasp {
    fn reset(&mut self) {
        self.phase = GraspPhase::Approach;
        self.settle = 0;
    }

    fn act(&mut self, env: &Env, _obs: &[f64]) -> Result<Action> {
        let crane = env.crane();
        let model = env.model();
        let attached = env.world().log.attached;
        let height = match self.phase {
            GraspPhase::Approach => self.hover,
            GraspPhase::Descend | GraspPhase::Close => self.grip_height,
            GraspPhase::Lift => self.grip_height + 1.0,
        };
        let Some(target) = self.joint_target(env, height) else {
            return Ok([0.0; NUM_JOINTS]);
        };
        let mut action = [0.0; NUM_JOINTS];
        let mut err_max: f64 = 0.0;
        for i in 0..5 {
            let e = target[i] - crane.q[i];
            err_max = err_max.max(e.abs());
            action[i] = (self.gain * e / model.actuators[i].v_max).clamp(-1.0, 1.0);
        }
        let q6 = &model.actuators[5];
        action[5] = match self.phase {
            GraspPhase::Approach | GraspPhase::Descend => ((q6.range_max - 0.05 - crane.q[5]) * 4.0).clamp(-1.0, 1.0),
            GraspPhase::Close | GraspPhase::Lift => -1.0,
        };
        let swing = crane.pend_rate[0].abs() + crane.pend_rate[1].abs();
        let settled = err_max < self.tolerance && swing < 0.05;
        self.settle = if settled { self.settle + 1 } else { 0 };
        self.phase = match self.phase {
            GraspPhase::Approach if self.settle >= 5 => GraspPhase::Descend,
            GraspPhase::Descend if self.settle >= 5 => GraspPhase::Close,
            GraspPhase::Close if attached => GraspPhase::Lift,
            p => p,
        };
        Ok(action)
    }
}

/// One logged decision.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSample {
    pub t: f64,
    pub tip: Vector3<f64>,
    pub q: [f64; NUM_JOINTS],
    pub qdot: [f64; NUM_JOINTS],
    pub tau: [f64; NUM_JOINTS],
    pub energy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub success: bool,
    /// Reset to success (s); `None` for failures.
    pub cycle_time: Option<f64>,
    /// Energy of q1..q4 up to grasp initiation (J).
    pub energy: f64,
    pub cause: TerminationCause,
    pub sim_steps: u32,
    /// Per-decision trace; empty unless requested.
    pub trace: Vec<TraceSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub policy: String,
    pub n: usize,
    pub success_rate: f64,
    /// Means over successful episodes; NaN when there are none.
    pub mean_time_s: f64,
    pub mean_energy_j: f64,
    pub relative_energy: f64,
    /// 10/50/90 % energy quantiles over successful episodes.
    pub energy_quantiles: [f64; 3],
}

/// Parameters of an evaluation run.
#[derive(Clone, Debug)]
pub struct EvalSetup<'a> {
    pub env: &'a EnvConfig,
    pub lesson: &'a LessonSpec,
    pub log_mode: LogMode,
    /// Frozen normalization statistics from training.
    pub stats: Option<&'a RunningStats>,
    pub seed: u64,
    pub record_trace: bool,
}

fn episode_seed(seed: u64, episode: usize) -> u64 {
    seed ^ (episode as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn run_episode<C: Controller>(controller: &mut C, setup: &EvalSetup, episode: usize) -> Result<EpisodeRecord> {
    let mut env = Env::new(
        setup.env.clone(),
        setup.lesson.clone(),
        setup.log_mode,
        episode_seed(setup.seed, episode),
    );
    env.update_stats = false;
    if let Some(s) = setup.stats {
        env.sync_stats(s);
    }
    controller.reset();
    let mut obs = env.reset()?;
    let mut trace = Vec::new();
    let sample = |env: &Env| TraceSample {
        t: env.sim_steps() as f64 * DT,
        tip: env.grapple_world().tip,
        q: env.crane().q,
        qdot: env.crane().qdot,
        tau: env.crane().tau_applied,
        energy: env.energy(),
    };
    if setup.record_trace {
        trace.push(sample(&env));
    }
    loop {
        let action = controller.act(&env, &obs)?;
        let res = env.step(&action)?;
        if setup.record_trace {
            trace.push(sample(&env));
        }
        obs = res.obs;
        if res.done {
            let success = res.breakdown.cause == TerminationCause::Success;
            return Ok(EpisodeRecord {
                episode,
                success,
                cycle_time: success.then(|| env.sim_steps() as f64 * DT),
                energy: res.breakdown.energy_at_grasp,
                cause: res.breakdown.cause,
                sim_steps: env.sim_steps(),
                trace,
            });
        }
    }
}

/// Runs `n_episodes` episodes, in parallel, each with its own controller
/// from `make`. Episode `i` always sees the same log and initial state for
/// a given seed.
pub fn evaluate<C, F>(make: F, setup: &EvalSetup, n_episodes: usize) -> Result<Vec<EpisodeRecord>>
where
    C: Controller,
    F: Fn() -> C + Sync,
{
    (0..n_episodes)
        .into_par_iter()
        .map(|i| run_episode(&mut make(), setup, i))
        .collect()
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Aggregates records; `reference_energy` is the mean energy of the policy
/// the relative column compares against (defaults to this policy itself).
pub fn summarize(policy: &str, records: &[EpisodeRecord], reference_energy: Option<f64>) -> EvalSummary {
    let n = records.len();
    let ok: Vec<&EpisodeRecord> = records.iter().filter(|r| r.success).collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let times: Vec<f64> = ok.iter().filter_map(|r| r.cycle_time).collect();
    let mut energies: Vec<f64> = ok.iter().map(|r| r.energy).collect();
    let mean_energy = mean(&energies);
    energies.sort_by(f64::total_cmp);
    EvalSummary {
        policy: policy.to_string(),
        n,
        success_rate: if n == 0 { 0.0 } else { ok.len() as f64 / n as f64 },
        mean_time_s: mean(&times),
        mean_energy_j: mean_energy,
        relative_energy: mean_energy / reference_energy.unwrap_or(mean_energy),
        energy_quantiles: [
            quantile(&energies, 0.1),
            quantile(&energies, 0.5),
            quantile(&energies, 0.9),
        ],
    }
}

pub fn write_summary_csv<W: Write>(rows: &[EvalSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "policy",
        "n",
        "success_rate",
        "mean_time_s",
        "mean_energy_J",
        "relative_energy",
    ])?;
    for r in rows {
        w.write_record([
            r.policy.clone(),
            r.n.to_string(),
            r.success_rate.to_string(),
            r.mean_time_s.to_string(),
            r.mean_energy_j.to_string(),
            r.relative_energy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One named perturbation of a sensitivity suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteEntry {
    pub name: String,
    pub perturbation: PerturbationConfig,
}

/// The six robustness rows: log position noise at one and two log radii,
/// ±10° heading noise, 5 % heavier links, a 17.6 % uphill grade and a
/// compliant chassis.
pub fn default_suite(log_radius: f64) -> Vec<SuiteEntry> {
    let p = PerturbationConfig::default;
    vec![
        SuiteEntry {
            name: "position_noise_1r".into(),
            perturbation: PerturbationConfig {
                position_noise_radius: log_radius,
                ..p()
            },
        },
        SuiteEntry {
            name: "position_noise_2r".into(),
            perturbation: PerturbationConfig {
                position_noise_radius: 2.0 * log_radius,
                ..p()
            },
        },
        SuiteEntry {
            name: "heading_noise_10deg".into(),
            perturbation: PerturbationConfig {
                heading_noise: 10f64.to_radians(),
                ..p()
            },
        },
        SuiteEntry {
            name: "mass_x1.05".into(),
            perturbation: PerturbationConfig {
                mass_scale: 1.05,
                ..p()
            },
        },
        SuiteEntry {
            name: "slope_17.6pct".into(),
            perturbation: PerturbationConfig {
                slope_grade: 0.176,
                ..p()
            },
        },
        SuiteEntry {
            name: "base_compliance".into(),
            perturbation: PerturbationConfig {
                base_compliance: BaseCompliance {
                    enabled: true,
                    ..BaseCompliance::default()
                },
                ..p()
            },
        },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityRow {
    pub perturbation: String,
    pub baseline: f64,
    pub perturbed: f64,
    /// perturbed / baseline; NaN when the baseline is zero.
    pub retention: f64,
}

pub fn retention(baseline: f64, perturbed: f64) -> f64 {
    if baseline == 0.0 {
        f64::NAN
    } else {
        perturbed / baseline
    }
}

/// Evaluates the baseline and every suite entry over the same episode seeds.
pub fn sensitivity_suite<C, F>(
    make: F,
    setup: &EvalSetup,
    suite: &[SuiteEntry],
    n_episodes: usize,
) -> Result<Vec<SensitivityRow>>
where
    C: Controller,
    F: Fn() -> C + Sync,
{
    if suite.is_empty() {
        return Ok(Vec::new());
    }
    let base = summarize("baseline", &evaluate(&make, setup, n_episodes)?, None).success_rate;
    suite
        .iter()
        .map(|entry| {
            entry.perturbation.validate()?;
            let env = EnvConfig {
                perturbation: entry.perturbation.clone(),
                ..setup.env.clone()
            };
            let s = EvalSetup {
                env: &env,
                ..setup.clone()
            };
            let rate = summarize(&entry.name, &evaluate(&make, &s, n_episodes)?, None).success_rate;
            Ok(SensitivityRow {
                perturbation: entry.name.clone(),
                baseline: base,
                perturbed: rate,
                retention: retention(base, rate),
            })
        })
        .collect()
}

pub fn write_sensitivity_csv<W: Write>(rows: &[SensitivityRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["perturbation", "baseline", "perturbed", "retention"])?;
    for r in rows {
        w.write_record([
            r.perturbation.clone(),
            r.baseline.to_string(),
            r.perturbed.to_string(),
            r.retention.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Boom-tip speed and acceleration along a trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryProfile {
    pub speed: Vec<f64>,
    pub accel: Vec<f64>,
    pub jerk_rms: f64,
}

/// Speed from backward differences, acceleration magnitude from central
/// second differences (endpoints copy their neighbour), and the RMS of the
/// jerk from differences of the acceleration vectors.
pub fn profile_trajectory(positions: &[Vector3<f64>], dt: f64) -> TrajectoryProfile {
    let n = positions.len();
    let mut speed = vec![0.0; n];
    for i in 1..n {
        speed[i] = (positions[i] - positions[i - 1]).norm() / dt;
    }
    if n < 3 {
        return TrajectoryProfile {
            speed,
            accel: vec![0.0; n],
            jerk_rms: 0.0,
        };
    }
    let acc_vec: Vec<Vector3<f64>> = (1..n - 1)
        .map(|i| (positions[i + 1] - positions[i] * 2.0 + positions[i - 1]) / (dt * dt))
        .collect();
    let mut accel = Vec::with_capacity(n);
    accel.push(acc_vec[0].norm());
    accel.extend(acc_vec.iter().map(|a| a.norm()));
    accel.push(acc_vec[acc_vec.len() - 1].norm());
    let jerk_sq: Vec<f64> = acc_vec
        .windows(2)
        .map(|w| ((w[1] - w[0]) / dt).norm_squared())
        .collect();
    let jerk_rms = if jerk_sq.is_empty() {
        0.0
    } else {
        (jerk_sq.iter().sum::<f64>() / jerk_sq.len() as f64).sqrt()
    };
    TrajectoryProfile { speed, accel, jerk_rms }
}

/// Time between two logged decisions.
pub const DECISION_DT: f64 = DT * SIM_STEPS_PER_DECISION as f64;

pub fn write_trajectory_csv<W: Write>(record: &EpisodeRecord, out: W) -> Result<()> {
    let positions: Vec<Vector3<f64>> = record.trace.iter().map(|s| s.tip).collect();
    let prof = profile_trajectory(&positions, DECISION_DT);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["t", "tip_x", "tip_y", "tip_z", "speed", "accel"]
        .map(String::from)
        .to_vec();
    for name in ["q", "qdot", "tau"] {
        header.extend((1..=NUM_JOINTS).map(|i| format!("{name}{i}")));
    }
    header.push("energy_cum".into());
    w.write_record(&header)?;
    for (k, s) in record.trace.iter().enumerate() {
        let mut row = vec![s.t, s.tip.x, s.tip.y, s.tip.z, prof.speed[k], prof.accel[k]];
        row.extend(s.q);
        row.extend(s.qdot);
        row.extend(s.tau);
        row.push(s.energy);
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
