//! The grasping MDP: observation assembly and normalization, action
//! application at 25 Hz over the 50 Hz simulation, reward and termination.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crane::{
    clamp_target_rate, grapple_pose, gravity_forces, step_dynamics, work_increment, CraneModel, CraneState,
    GrapplePose, StepInputs, DT, NUM_JOINTS,
};
use crate::curriculum::LessonSpec;
use crate::error::{config_err, Error, Result};
use crate::world::{
    apply_perturbations, check_success, default_bunk, effort_at_limit, sample_log, BunkBox, CollisionConfig,
    GraspConfig, LogConfig, LogMode, PerturbationConfig, WorldState,
};

/// Values per observation frame.
pub const FRAME_DIM: usize = 23;
/// Frames stacked per observation.
pub const STACK: usize = 8;
pub const OBS_DIM: usize = FRAME_DIM * STACK;
pub const ACTION_DIM: usize = NUM_JOINTS;
/// Simulation steps per decision.
pub const SIM_STEPS_PER_DECISION: u32 = 2;
pub const OBS_CLIP: f64 = 5.0;

pub type ObservationFrame = [f64; FRAME_DIM];
pub type Action = [f64; ACTION_DIM];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Plain,
    EnergyOptimized,
}

impl std::str::FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "energy" | "energy_optimized" => Ok(Self::EnergyOptimized),
            other => Err(config_err(format!("unknown mode {other:?} (expected plain|energy)"))),
        }
    }
}

impl std::fmt::Display for RewardMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Plain => "plain",
            Self::EnergyOptimized => "energy_optimized",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub success_reward: f64,
    /// Energy (J) at which the energy-optimized success reward halves.
    pub energy_ref: f64,
    pub guidance_coef: f64,
    pub guidance_distance: f64,
    pub near_distance: f64,
    pub speed_bonus: f64,
    /// Orientation deviation (rad) beyond which guidance vanishes.
    pub max_orientation_dev: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            success_reward: 1.0,
            energy_ref: 50.0e3,
            guidance_coef: 5.0e-4,
            guidance_distance: 1.0,
            near_distance: 0.5,
            speed_bonus: 1.0,
            max_orientation_dev: 30f64.to_radians(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub max_sim_steps: u32,
    /// Initial joint positions before perturbation.
    pub nominal_q: [f64; NUM_JOINTS],
    /// Half-width of the uniform initial joint perturbation, as a fraction of
    /// each joint's range.
    pub init_perturbation: f64,
    pub std_floor: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_sim_steps: 2000,
            // grapple centred above the load bunk
            nominal_q: [PI, 1.367_234_474_840_468, -1.814_396_859_962_481_6, 0.1, 0.0, 1.0],
            init_perturbation: 0.02,
            std_floor: 1e-8,
        }
    }
}

/// Static description shared by every environment of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub model: CraneModel,
    pub grasp: GraspConfig,
    pub collision: CollisionConfig,
    pub log: LogConfig,
    pub bunk: BunkBox,
    pub reward: RewardConfig,
    pub reward_mode: RewardMode,
    pub episode: EpisodeConfig,
    pub perturbation: PerturbationConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            model: CraneModel::default(),
            grasp: GraspConfig::default(),
            collision: CollisionConfig::default(),
            log: LogConfig::default(),
            bunk: default_bunk(),
            reward: RewardConfig::default(),
            reward_mode: RewardMode::Plain,
            episode: EpisodeConfig::default(),
            perturbation: PerturbationConfig::default(),
        }
    }
}

/// Online per-dimension mean and variance (Welford, with Chan's merge).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: f64,
    pub mean: Vec<f64>,
    /// Sum of squared deviations from the mean.
    pub m2: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, x: &[f64]) {
        self.count += 1.0;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / self.count;
            *s += delta * (v - *m);
        }
    }

    /// Adds the moments of `other` to `self`.
    pub fn merge(&mut self, other: &RunningStats) {
        if other.count == 0.0 {
            return;
        }
        if self.count == 0.0 {
            *self = other.clone();
            return;
        }
        let n = self.count + other.count;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * other.count / n;
            self.m2[i] += other.m2[i] + delta * delta * self.count * other.count / n;
        }
        self.count = n;
    }

    /// Population variance.
    pub fn variance(&self, i: usize) -> f64 {
        if self.count > 0.0 {
            (self.m2[i] / self.count).max(0.0)
        } else {
            0.0
        }
    }

    pub fn normalize_into(&self, x: &[f64], std_floor: f64, out: &mut [f64]) {
        for (i, (o, &v)) in out.iter_mut().zip(x).enumerate() {
            let std = self.variance(i).sqrt().max(std_floor);
            *o = ((v - self.mean[i]) / std).clamp(-OBS_CLIP, OBS_CLIP);
        }
    }
}

/// Normalizes the last `STACK` frames, newest first. Missing history is
/// padded with the oldest available frame.
pub fn normalize_and_stack(history: &VecDeque<ObservationFrame>, stats: &RunningStats, std_floor: f64) -> Vec<f64> {
    let mut out = vec![0.0; OBS_DIM];
    let oldest = history.front().expect("observation history is never empty");
    for k in 0..STACK {
        let frame = if k < history.len() {
            &history[history.len() - 1 - k]
        } else {
            oldest
        };
        stats.normalize_into(frame, std_floor, &mut out[k * FRAME_DIM..(k + 1) * FRAME_DIM]);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationCause {
    Running,
    Success,
    EffortAtLimit,
    BunkCollision,
    Timeout,
}

impl TerminationCause {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Running => "running",
            Self::Success => "success",
            Self::EffortAtLimit => "effort_at_limit",
            Self::BunkCollision => "bunk_collision",
            Self::Timeout => "timeout",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardBreakdown {
    pub guidance: f64,
    pub success: f64,
    pub energy_at_grasp: f64,
    pub cause: TerminationCause,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub breakdown: RewardBreakdown,
}

/// Terminal success reward. Strictly decreasing in the consumed energy in
/// energy-optimized mode.
pub fn success_reward(energy: f64, mode: RewardMode, cfg: &RewardConfig) -> f64 {
    match mode {
        RewardMode::Plain => cfg.success_reward,
        RewardMode::EnergyOptimized => cfg.success_reward * cfg.energy_ref / (cfg.energy_ref + energy.max(0.0)),
    }
}

/// Angle between the closing-plane normal and the log axis, folded into [0, π/2].
pub fn orientation_deviation(grapple_yaw: f64, log_heading: f64) -> f64 {
    let d = (log_heading - (grapple_yaw + PI / 2.0)).rem_euclid(PI);
    d.min(PI - d)
}

/// Shaping signal pulling the boom tip toward the log.
pub fn guidance_reward(
    tip: &Vector3<f64>,
    grapple: &GrapplePose,
    log_com: &Vector3<f64>,
    log_heading: f64,
    q4: f64,
    qdot4: f64,
    model: &CraneModel,
    cfg: &RewardConfig,
) -> f64 {
    let tele = &model.actuators[3];
    if q4 <= tele.range_min || q4 >= tele.range_max {
        return 0.0;
    }
    if orientation_deviation(grapple.yaw, log_heading) > cfg.max_orientation_dev {
        return 0.0;
    }
    let d = (tip - log_com).norm();
    let f_speed = if d < cfg.near_distance {
        1.0 + cfg.speed_bonus * (1.0 - (qdot4.abs() / tele.v_max).min(1.0))
    } else {
        1.0
    };
    cfg.guidance_coef * (-d / cfg.guidance_distance).exp() * f_speed
}

/// One simulated grasping environment.
#[derive(Clone, Debug)]
pub struct Env {
    cfg: EnvConfig,
    pub log_mode: LogMode,
    lesson: LessonSpec,
    rng: ChaCha8Rng,
    perturb_rng: ChaCha8Rng,
    model: CraneModel,
    crane: CraneState,
    world: Option<WorldState>,
    energy: f64,
    sim_steps: u32,
    done: bool,
    cause: TerminationCause,
    guidance_sum: f64,
    history: VecDeque<ObservationFrame>,
    stats: RunningStats,
    delta: RunningStats,
    /// Update the running statistics with each new frame (training).
    pub update_stats: bool,
}

impl Env {
    pub fn new(cfg: EnvConfig, lesson: LessonSpec, log_mode: LogMode, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perturb_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let crane = CraneState::at_rest(cfg.episode.nominal_q);
        Self {
            model: cfg.model.clone(),
            cfg,
            log_mode,
            lesson,
            rng,
            perturb_rng,
            crane,
            world: None,
            energy: 0.0,
            sim_steps: 0,
            done: true,
            cause: TerminationCause::Running,
            guidance_sum: 0.0,
            history: VecDeque::with_capacity(STACK),
            stats: RunningStats::new(FRAME_DIM),
            delta: RunningStats::new(FRAME_DIM),
            update_stats: log_mode == LogMode::Training,
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn lesson(&self) -> &LessonSpec {
        &self.lesson
    }

    /// Lesson used from the next reset on.
    pub fn set_lesson(&mut self, lesson: LessonSpec) {
        self.lesson = lesson;
    }

    pub fn set_perturbation(&mut self, p: PerturbationConfig) {
        self.cfg.perturbation = p;
    }

    pub fn crane(&self) -> &CraneState {
        &self.crane
    }

    /// Crane model in effect for the current episode (after perturbation).
    pub fn model(&self) -> &CraneModel {
        &self.model
    }

    pub fn world(&self) -> &WorldState {
        self.world.as_ref().expect("environment has been reset")
    }

    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn sim_steps(&self) -> u32 {
        self.sim_steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn cause(&self) -> TerminationCause {
        self.cause
    }

    pub fn stats(&self) -> &RunningStats {
        &self.stats
    }

    /// Replaces the local statistics (e.g. with merged ones) and clears the
    /// pending delta.
    pub fn sync_stats(&mut self, stats: &RunningStats) {
        self.stats = stats.clone();
        self.delta = RunningStats::new(FRAME_DIM);
    }

    /// Statistics gathered since the last sync.
    pub fn take_stats_delta(&mut self) -> RunningStats {
        std::mem::replace(&mut self.delta, RunningStats::new(FRAME_DIM))
    }

    pub fn rng_state(&self) -> (&ChaCha8Rng, &ChaCha8Rng) {
        (&self.rng, &self.perturb_rng)
    }

    pub fn set_rng_state(&mut self, rng: ChaCha8Rng, perturb_rng: ChaCha8Rng) {
        self.rng = rng;
        self.perturb_rng = perturb_rng;
    }

    /// Boom tip and grapple in the world frame.
    pub fn grapple_world(&self) -> GrapplePose {
        self.world().grapple_in_world(&grapple_pose(&self.crane, &self.model))
    }

    /// Starts a new episode on the current lesson.
    pub fn reset(&mut self) -> Result<Vec<f64>> {
        let log = sample_log(&self.lesson, self.log_mode, &self.cfg.log, &mut self.rng)?;
        let mut q = self.cfg.episode.nominal_q;
        let frac = self.cfg.episode.init_perturbation;
        for (qi, a) in q.iter_mut().zip(&self.cfg.model.actuators) {
            let half = frac * a.range_width();
            if half > 0.0 {
                *qi += self.rng.random_range(-half..=half);
            }
        }
        self.cfg.model.clamp_to_range(&mut q);

        let view = apply_perturbations(&self.cfg.perturbation, &self.cfg.model, &mut self.perturb_rng);
        self.model = view.model.clone();
        let mut crane = CraneState::at_rest(q);
        // hang the grapple along gravity
        crane.pend = [
            view.gravity.x.atan2(-view.gravity.z),
            view.gravity.y.atan2(-view.gravity.z),
        ];
        let tau_g = gravity_forces(&crane.q, &crane.pend, &self.model, &view.gravity, 0.0);
        for i in 0..NUM_JOINTS {
            crane.tau_applied[i] =
                (-tau_g[i]).clamp(-self.model.actuators[i].effort_max, self.model.actuators[i].effort_max);
        }
        self.world = Some(WorldState::new(
            log,
            self.lesson.clone(),
            self.cfg.bunk.clone(),
            &view,
            &crane,
        ));
        self.crane = crane;
        self.energy = 0.0;
        self.sim_steps = 0;
        self.done = false;
        self.cause = TerminationCause::Running;
        self.guidance_sum = 0.0;

        let frame = self.frame();
        self.observe_stats(&frame);
        self.history.clear();
        self.history.extend(std::iter::repeat_n(frame, STACK));
        Ok(self.stacked())
    }

    fn observe_stats(&mut self, frame: &ObservationFrame) {
        if self.update_stats {
            self.stats.update(frame);
            self.delta.update(frame);
        }
    }

    fn stacked(&self) -> Vec<f64> {
        normalize_and_stack(&self.history, &self.stats, self.cfg.episode.std_floor)
    }

    /// Current raw observation frame.
    pub fn frame(&self) -> ObservationFrame {
        let world = self.world();
        let pos = world.observed_log_position();
        let psi = world.observed_log_heading();
        let mut f = [0.0; FRAME_DIM];
        f[0] = pos.x;
        f[1] = pos.y;
        f[2] = pos.z;
        f[3] = (2.0 * psi).sin();
        f[4] = (2.0 * psi).cos();
        for i in 0..NUM_JOINTS {
            f[5 + 3 * i] = self.crane.q[i];
            f[6 + 3 * i] = self.crane.qdot[i];
            f[7 + 3 * i] = self.crane.tau_applied[i];
        }
        f
    }

    /// Applies one decision: two simulation steps at the rate-limited targets.
    /// Events from either inner step are latched and judged afterwards.
    pub fn step(&mut self, action: &Action) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        if !action.iter().all(|a| a.is_finite()) {
            return Err(Error::NonFinite("action"));
        }
        let mut attached_or_success = false;
        let mut at_limit = false;
        let mut bunk = false;
        for _ in 0..SIM_STEPS_PER_DECISION {
            let mut v_target = [0.0; NUM_JOINTS];
            for i in 0..NUM_JOINTS {
                let spec = &self.model.actuators[i];
                let cmd = action[i].clamp(-1.0, 1.0) * spec.v_max;
                v_target[i] = clamp_target_rate(self.crane.v_target[i], cmd, spec, 1);
            }
            let world = self.world.as_mut().expect("reset before step");
            let inputs = StepInputs {
                gravity: world.crane_gravity(),
                payload_mass: world.payload_mass(),
            };
            self.crane = step_dynamics(&self.model, &self.crane, &v_target, DT, &inputs)?;
            self.sim_steps += 1;
            if !world.grasp_initiated {
                self.energy += work_increment(&self.crane.tau_applied, &self.crane.qdot, DT);
            }
            world.step_base(&self.crane, &self.model, DT);
            let grapple = grapple_pose(&self.crane, &self.model);
            let grapple_w = world.grapple_in_world(&grapple);
            world.update_grasp(
                &grapple_w,
                self.crane.q[5],
                self.crane.v_target[5] < 0.0,
                &self.cfg.grasp,
                DT,
            );

            if check_success(&world.log, &self.cfg.grasp) {
                attached_or_success = true;
            }
            if effort_at_limit(&self.crane, &self.model) {
                at_limit = true;
            }
            if world
                .collisions(&self.crane, &self.model, &grapple, &self.cfg.grasp, &self.cfg.collision)
                .bunk_collision()
            {
                bunk = true;
            }
        }

        let cause = if attached_or_success {
            TerminationCause::Success
        } else if at_limit {
            TerminationCause::EffortAtLimit
        } else if bunk {
            TerminationCause::BunkCollision
        } else if self.sim_steps >= self.cfg.episode.max_sim_steps {
            TerminationCause::Timeout
        } else {
            TerminationCause::Running
        };

        let world = self.world();
        let grapple = self.grapple_world();
        let guidance = guidance_reward(
            &grapple.tip,
            &grapple,
            &world.log.com,
            world.log.heading,
            self.crane.q[3],
            self.crane.qdot[3],
            &self.model,
            &self.cfg.reward,
        );
        let (reward, breakdown) = match cause {
            TerminationCause::Success => {
                let s = success_reward(self.energy, self.cfg.reward_mode, &self.cfg.reward);
                (
                    guidance + s,
                    RewardBreakdown {
                        guidance,
                        success: s,
                        energy_at_grasp: self.energy,
                        cause,
                    },
                )
            }
            // failures cancel the shaping collected so far: the episode returns zero
            TerminationCause::EffortAtLimit | TerminationCause::BunkCollision => (
                -self.guidance_sum,
                RewardBreakdown {
                    guidance: 0.0,
                    success: 0.0,
                    energy_at_grasp: self.energy,
                    cause,
                },
            ),
            TerminationCause::Timeout | TerminationCause::Running => (
                guidance,
                RewardBreakdown {
                    guidance,
                    success: 0.0,
                    energy_at_grasp: self.energy,
                    cause,
                },
            ),
        };
        self.guidance_sum += reward;
        self.cause = cause;
        self.done = cause != TerminationCause::Running;

        let frame = self.frame();
        self.observe_stats(&frame);
        self.history.pop_front();
        self.history.push_back(frame);
        Ok(StepResult {
            obs: self.stacked(),
            reward,
            done: self.done,
            breakdown,
        })
    }
}
