//! Independent oracles shared by the property tests and the acceptance
//! suite. Each check returns its worst error so callers can pin tolerances.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::VecDeque;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crane_rl::crane::{
    forward_kinematics, gravity_forces, step_dynamics, CraneModel, CraneState, StepInputs, DT, NUM_JOINTS,
};
use crane_rl::curriculum::ProgressTracker;
use crane_rl::env::{normalize_and_stack, Env, EnvConfig, ObservationFrame, RunningStats, FRAME_DIM, STACK};
use crane_rl::nn::PolicyNet;
use crane_rl::ppo::{compute_gae, loss_and_grad, Minibatch, PpoConfig};
use crane_rl::world::LogMode;

type Mat4 = [[f64; 4]; 4];

fn mat_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut c = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            c[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn rot_z(a: f64) -> Mat4 {
    let (s, c) = a.sin_cos();
    [
        [c, -s, 0.0, 0.0],
        [s, c, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn rot_y(a: f64) -> Mat4 {
    let (s, c) = a.sin_cos();
    [
        [c, 0.0, s, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [-s, 0.0, c, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn trans(x: f64, y: f64, z: f64) -> Mat4 {
    [
        [1.0, 0.0, 0.0, x],
        [0.0, 1.0, 0.0, y],
        [0.0, 0.0, 1.0, z],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn origin(m: &Mat4) -> [f64; 3] {
    [m[0][3], m[1][3], m[2][3]]
}

/// Homogeneous-transform chain: pillar top, elbow and tip frames.
pub fn transform_chain(q: &[f64; NUM_JOINTS], model: &CraneModel) -> [Mat4; 3] {
    let g = &model.geometry;
    let top = mat_mul(&rot_z(q[0]), &trans(0.0, 0.0, g.pillar_height));
    // boom pitch up is a negative rotation about the local y axis
    let elbow = mat_mul(&mat_mul(&top, &rot_y(-q[1])), &trans(g.inner_boom_length, 0.0, 0.0));
    let tip = mat_mul(
        &mat_mul(&elbow, &rot_y(-q[2])),
        &trans(g.outer_boom_length + q[3], 0.0, 0.0),
    );
    [top, elbow, tip]
}

pub fn random_q<R: Rng>(model: &CraneModel, rng: &mut R) -> [f64; NUM_JOINTS] {
    std::array::from_fn(|i| {
        let a = &model.actuators[i];
        rng.random_range(a.range_min..=a.range_max)
    })
}

/// Largest difference between library kinematics and the transform chain
/// over `n` random configurations (positions and rotation entries).
pub fn fk_max_error(n: usize, seed: u64) -> f64 {
    let model = CraneModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let q = random_q(&model, &mut rng);
        let frames = forward_kinematics(&q, &model).unwrap();
        let oracle = transform_chain(&q, &model);
        for (iso, m) in [frames.pillar_top, frames.elbow, frames.tip].iter().zip(&oracle) {
            let h = iso.to_homogeneous();
            for r in 0..4 {
                for c in 0..4 {
                    worst = worst.max((h[(r, c)] - m[r][c]).abs());
                }
            }
        }
    }
    worst
}

/// Potential energy of the crane bodies (pillar excluded: it never moves)
/// from the transform chain, for gravity `g` along −z.
fn potential(q: &[f64; NUM_JOINTS], pend: &[f64; 2], model: &CraneModel, payload: f64) -> f64 {
    let g = &model.geometry;
    let m = &g.masses;
    let [top, elbow, tip] = transform_chain(q, model);
    let along = |frame: &Mat4, d: f64| origin(&mat_mul(frame, &trans(d, 0.0, 0.0)));
    let inner_com = {
        let pitched = mat_mul(&top, &rot_y(-q[1]));
        along(&pitched, g.inner_boom_com)
    };
    let outer_frame = mat_mul(&elbow, &rot_y(-q[2]));
    let outer_com = along(&outer_frame, g.outer_boom_com);
    let tele_com = along(&outer_frame, g.telescope_com + q[3]);
    let tip_p = origin(&tip);
    let grapple_z = tip_p[2] - pend[0].cos() * pend[1].cos() * g.pendulum_length;
    9.81 * (m.inner_boom * inner_com[2]
        + m.outer_boom * outer_com[2]
        + m.telescope * tele_com[2]
        + m.rotator * tip_p[2]
        + (m.grapple + payload) * grapple_z)
}

/// Worst relative error of the gravity efforts of q1..q4 against a central
/// finite difference of the potential energy.
pub fn gravity_fd_max_rel_error(n: usize, seed: u64) -> f64 {
    let model = CraneModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gravity = nalgebra::Vector3::new(0.0, 0.0, -9.81);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let q = random_q(&model, &mut rng);
        let pend = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
        let payload = rng.random_range(0.0..100.0);
        let tau = gravity_forces(&q, &pend, &model, &gravity, payload);
        for i in 0..4 {
            let h = 1e-6;
            let (mut qp, mut qm) = (q, q);
            qp[i] += h;
            qm[i] -= h;
            let fd = -(potential(&qp, &pend, &model, payload) - potential(&qm, &pend, &model, payload)) / (2.0 * h);
            // scale: a 1 kN·m (or 1 kN) floor keeps near-zero efforts meaningful
            let err = (tau[i] - fd).abs() / fd.abs().max(1e3);
            worst = worst.max(err);
        }
    }
    worst
}

/// Brute-force advantage: A_t = Σ_l (γλ)^l δ_{t+l}, truncated at episode ends.
pub fn gae_brute(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let next_value = |t: usize| if t + 1 < n { values[t + 1] } else { bootstrap };
    let delta = |t: usize| {
        let nonterminal = if dones[t] { 0.0 } else { 1.0 };
        rewards[t] + gamma * nonterminal * next_value(t) - values[t]
    };
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            for l in 0..(n - t) {
                sum += (gamma * lambda).powi(l as i32) * delta(t + l);
                if dones[t + l] {
                    break;
                }
            }
            sum
        })
        .collect()
}

pub fn gae_max_error(trials: usize, max_len: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = rng.random_range(1..=max_len);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dones: Vec<bool> = (0..n).map(|_| rng.random_bool(0.05)).collect();
        let bootstrap = rng.random_range(-1.0..1.0);
        let gamma = rng.random_range(0.9..1.0);
        let lambda = rng.random_range(0.8..1.0);
        let (adv, ret) = compute_gae(&rewards, &values, &dones, bootstrap, gamma, lambda);
        let oracle = gae_brute(&rewards, &values, &dones, bootstrap, gamma, lambda);
        for t in 0..n {
            worst = worst.max((adv[t] - oracle[t]).abs());
            worst = worst.max((ret[t] - (oracle[t] + values[t])).abs());
        }
    }
    worst
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Compares `backward` with central differences of a random linear
/// functional of the network outputs on a 4-8-2 network.
pub fn backprop_max_rel_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = PolicyNet::new(4, &[8], 2, -0.3, &mut rng);
    // give the mean head real weight so its gradient is not tiny
    net.mean_head.w.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    let batch = 5;
    let x = Array2::from_shape_fn((batch, 4), |_| rng.random_range(-2.0..2.0));
    let wm = Array2::from_shape_fn((batch, 2), |_| rng.random_range(-1.0..1.0));
    let wv = Array1::from_shape_fn(batch, |_| rng.random_range(-1.0..1.0));
    let wl = Array1::from_shape_fn(2, |_| rng.random_range(-1.0..1.0));
    let objective = |n: &PolicyNet| {
        let out = n.forward(x.view()).unwrap();
        (&out.mean * &wm).sum() + (&out.value * &wv).sum() + (&n.clamped_log_std() * &wl).sum()
    };
    let cache = net.forward_cached(x.view()).unwrap();
    let grad = net.backward(&cache, &wm, &wv, &wl);
    compare_with_fd(&net, &grad, objective)
}

/// Same comparison for the full clipped-surrogate loss.
pub fn ppo_loss_grad_max_rel_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = PolicyNet::new(4, &[8], 2, -0.3, &mut rng);
    let n = 12;
    let obs = Array2::from_shape_fn((n, 4), |_| rng.random_range(-2.0..2.0));
    let actions = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
    let out = net.forward(obs.view()).unwrap();
    let ls = net.clamped_log_std().to_vec();
    // old log-probs close to the current ones keep ratios away from the clip edges
    let old_log_probs: Vec<f64> = (0..n)
        .map(|i| {
            let mean = out.mean.row(i).to_vec();
            let act = actions.row(i).to_vec();
            crane_rl::nn::gaussian_log_prob(&act, &mean, &ls) + rng.random_range(-0.05..0.05)
        })
        .collect();
    let advantages: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let returns: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mb = Minibatch {
        obs: &obs,
        actions: &actions,
        old_log_probs: &old_log_probs,
        advantages: &advantages,
        returns: &returns,
    };
    let idx: Vec<usize> = (0..n).collect();
    let cfg = PpoConfig::default();
    let (_, grad, _) = loss_and_grad(&net, &mb, &idx, &cfg).unwrap();
    compare_with_fd(&net, &grad, |p| loss_and_grad(p, &mb, &idx, &cfg).unwrap().0)
}

fn compare_with_fd<F: Fn(&PolicyNet) -> f64>(net: &PolicyNet, grad: &PolicyNet, f: F) -> f64 {
    let analytic: Vec<f64> = grad.tensors().iter().flat_map(|t| t.2.to_vec()).collect();
    let mut worst: f64 = 0.0;
    let mut k = 0;
    let n_tensors = net.tensors().len();
    for t in 0..n_tensors {
        let len = net.tensors()[t].2.len();
        for i in 0..len {
            let h = 1e-6;
            let mut plus = net.clone();
            plus.slices_mut()[t][i] += h;
            let mut minus = net.clone();
            minus.slices_mut()[t][i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            worst = worst.max(relative_error(analytic[k], fd));
            k += 1;
        }
    }
    worst
}

/// Steps the crane with random commands through the rate limiter and
/// returns the largest per-step change of any servo target, as a fraction
/// of that joint's `v_max`.
pub fn max_target_rate_fraction(steps: usize, seed: u64) -> f64 {
    let model = CraneModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = CraneState::at_rest(crane_rl::env::EpisodeConfig::default().nominal_q);
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        let mut target = [0.0; NUM_JOINTS];
        for i in 0..NUM_JOINTS {
            let spec = &model.actuators[i];
            let cmd = rng.random_range(-2.0..2.0) * spec.v_max;
            target[i] = crane_rl::crane::clamp_target_rate(state.v_target[i], cmd, spec, 1);
        }
        let next = step_dynamics(&model, &state, &target, DT, &StepInputs::default()).unwrap();
        for i in 0..NUM_JOINTS {
            let frac = (next.v_target[i] - state.v_target[i]).abs() / model.actuators[i].v_max;
            worst = worst.max(frac);
        }
        state = next;
    }
    worst
}

/// Runs random-action episodes and checks the energy meter trace:
/// nonnegative, nondecreasing and constant once a grasp is initiated.
/// Returns the number of violations and the number of decisions observed.
pub fn energy_meter_violations(
    episodes: usize,
    seed: u64,
    cfg: EnvConfig,
    lesson: crane_rl::curriculum::LessonSpec,
) -> (usize, usize) {
    let mut env = Env::new(cfg, lesson, LogMode::Training, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let (mut bad, mut seen) = (0, 0);
    for _ in 0..episodes {
        env.reset().unwrap();
        let mut prev = env.energy();
        let mut frozen_at: Option<f64> = None;
        if prev != 0.0 {
            bad += 1;
        }
        // bias toward closing so grasps are initiated on some episodes
        let bias: [f64; NUM_JOINTS] = std::array::from_fn(|i| if i == 5 { -0.3 } else { 0.0 });
        while !env.is_done() {
            let action: [f64; NUM_JOINTS] =
                std::array::from_fn(|i| (bias[i] + rng.random_range(-1.0..1.0f64)).clamp(-1.0, 1.0));
            env.step(&action).unwrap();
            let e = env.energy();
            seen += 1;
            if e < 0.0 || e < prev || !e.is_finite() {
                bad += 1;
            }
            if let Some(f) = frozen_at {
                if e != f {
                    bad += 1;
                }
            } else if env.world().grasp_initiated {
                frozen_at = Some(e);
            }
            prev = e;
        }
    }
    (bad, seen)
}

/// Largest absolute value of stacked observations under extreme stats.
pub fn normalization_max_abs(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut stats = RunningStats::new(FRAME_DIM);
        for _ in 0..rng.random_range(1..5) {
            let x: Vec<f64> = (0..FRAME_DIM).map(|_| rng.random_range(-1.0..1.0) * 1e-3).collect();
            stats.update(&x);
        }
        let history: VecDeque<ObservationFrame> = (0..STACK)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1e6..1e6)))
            .collect();
        let obs = normalize_and_stack(&history, &stats, 1e-8);
        worst = worst.max(obs.iter().fold(0.0, |m: f64, v| m.max(v.abs())));
    }
    worst
}

/// Reference advancement rule: after each outcome, advance when the last
/// `window` outcomes since the previous advance hold at least
/// ceil(threshold·window) successes.
pub fn curriculum_oracle(outcomes: &[bool], n_lessons: usize, window: usize, threshold: f64) -> Vec<usize> {
    let need = (threshold * window as f64 - 1e-9).ceil() as usize;
    let mut lesson = 0;
    let mut since: Vec<bool> = Vec::new();
    let mut trace = Vec::with_capacity(outcomes.len());
    for &o in outcomes {
        since.push(o);
        if since.len() >= window && lesson + 1 < n_lessons {
            let hits = since[since.len() - window..].iter().filter(|s| **s).count();
            if hits >= need {
                lesson += 1;
                since.clear();
            }
        }
        trace.push(lesson);
    }
    trace
}

/// Compares the tracker with the oracle on every outcome sequence of
/// length `len`; returns the number of mismatching sequences.
pub fn curriculum_mismatches_exhaustive(len: usize, n_lessons: usize, window: usize, threshold: f64) -> usize {
    let mut bad = 0;
    for bits in 0u32..(1 << len) {
        let outcomes: Vec<bool> = (0..len).map(|i| bits >> i & 1 == 1).collect();
        let mut t = ProgressTracker::new(n_lessons, window, threshold);
        let got: Vec<usize> = outcomes
            .iter()
            .map(|&o| {
                t.record_and_maybe_advance(o);
                t.lesson
            })
            .collect();
        if got != curriculum_oracle(&outcomes, n_lessons, window, threshold) {
            bad += 1;
        }
    }
    bad
}

/// Random long sequences on the default 30%-over-20 rule.
pub fn curriculum_mismatches_random(trials: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let p = rng.random_range(0.0..0.6);
        let outcomes: Vec<bool> = (0..400).map(|_| rng.random_bool(p)).collect();
        let mut t = ProgressTracker::new(30, 20, 0.3);
        let got: Vec<usize> = outcomes
            .iter()
            .map(|&o| {
                t.record_and_maybe_advance(o);
                t.lesson
            })
            .collect();
        if got != curriculum_oracle(&outcomes, 30, 20, 0.3) {
            bad += 1;
        }
    }
    bad
}

/// Runs one episode on the first default lesson with a constant action and
/// returns the termination cause and the simulation steps it took.
pub fn constant_action_episode(action: [f64; NUM_JOINTS], seed: u64) -> (crane_rl::env::TerminationCause, u32) {
    let cfg = EnvConfig::default();
    let lesson = crane_rl::curriculum::build_schedule(&crane_rl::curriculum::CurriculumConfig::default(), &cfg.model)
        .unwrap()[0]
        .clone();
    let mut env = Env::new(cfg, lesson, LogMode::Training, seed);
    env.reset().unwrap();
    loop {
        let r = env.step(&action).unwrap();
        if r.done {
            return (r.breakdown.cause, env.sim_steps());
        }
    }
}

/// Raising the outer boom until it stalls at its upper stop.
pub const EFFORT_ACTION: [f64; NUM_JOINTS] = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
/// Lowering the inner boom onto the load bunk behind the crane.
pub const BUNK_ACTION: [f64; NUM_JOINTS] = [0.0, -1.0, 0.0, 0.0, 0.0, 0.0];
