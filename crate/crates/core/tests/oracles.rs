mod common;

use approx::assert_relative_eq;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crane_rl::crane::{forward_kinematics, step_dynamics, CraneModel, CraneState, StepInputs, DT, STANDARD_GRAVITY};
use crane_rl::curriculum::{reach_annulus, CurriculumConfig};
use crane_rl::env::EnvConfig;
use crane_rl::nn::{sample_action, Adam, PolicyNet};
use crane_rl::ppo::{ppo_update, PpoConfig, RolloutBatch};

#[test]
fn kinematics_match_transform_chain() {
    let err = common::fk_max_error(2000, 1);
    assert!(err <= 1e-9, "max FK deviation {err:e}");
}

#[test]
fn gravity_matches_potential_gradient() {
    let err = common::gravity_fd_max_rel_error(500, 2);
    assert!(err <= 1e-4, "max relative gravity error {err:e}");
}

#[test]
fn gae_matches_double_sum() {
    let err = common::gae_max_error(200, 200, 3);
    assert!(err <= 1e-10, "max GAE deviation {err:e}");
}

#[test]
fn backprop_matches_finite_differences() {
    for seed in 0..4 {
        let err = common::backprop_max_rel_error(seed);
        assert!(err <= 1e-4, "seed {seed}: relative gradient error {err:e}");
    }
}

#[test]
fn surrogate_gradient_matches_finite_differences() {
    for seed in 0..4 {
        let err = common::ppo_loss_grad_max_rel_error(seed);
        assert!(err <= 1e-4, "seed {seed}: relative gradient error {err:e}");
    }
}

#[test]
fn servo_targets_respect_rate_limit() {
    let frac = common::max_target_rate_fraction(5000, 4);
    assert!(frac <= 1.0 / 30.0 + 1e-12, "largest target change {frac} of v_max");
}

#[test]
fn energy_meter_is_monotone_and_freezes() {
    let cfg = EnvConfig::default();
    let lesson = crane_rl::curriculum::build_schedule(&CurriculumConfig::default(), &cfg.model).unwrap()[0].clone();
    let (bad, seen) = common::energy_meter_violations(6, 5, cfg, lesson);
    assert!(seen > 100);
    assert_eq!(bad, 0);
}

#[test]
fn normalized_observations_are_clipped() {
    let m = common::normalization_max_abs(200, 6);
    assert!(m <= 5.0, "observation magnitude {m}");
    assert_eq!(m, 5.0, "extreme inputs should reach the clip");
}

#[test]
fn curriculum_matches_reference_rule_exhaustively() {
    assert_eq!(common::curriculum_mismatches_exhaustive(14, 4, 5, 0.4), 0);
    assert_eq!(common::curriculum_mismatches_exhaustive(12, 3, 4, 0.3), 0);
}

#[test]
fn curriculum_matches_reference_rule_on_long_runs() {
    assert_eq!(common::curriculum_mismatches_random(300, 7), 0);
}

#[test]
fn sampled_actions_have_requested_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mean = [0.3, -0.2];
    let log_std = [-1.0f64, -0.5];
    let n = 1_000_000;
    let mut sum = [0.0; 2];
    let mut sq = [0.0; 2];
    for _ in 0..n {
        let s = sample_action(&mean, &log_std, &mut rng);
        for j in 0..2 {
            sum[j] += s.raw[j];
            sq[j] += s.raw[j] * s.raw[j];
        }
        assert!(s.action.iter().all(|a| (-1.0..=1.0).contains(a)));
    }
    for j in 0..2 {
        let m = sum[j] / n as f64;
        let sd = (sq[j] / n as f64 - m * m).sqrt();
        let want_sd = log_std[j].exp();
        assert!((m - mean[j]).abs() <= 0.01 * want_sd.max(mean[j].abs()), "mean {m}");
        assert_relative_eq!(sd, want_sd, max_relative = 0.01);
    }
}

#[test]
fn zero_advantage_without_entropy_leaves_policy_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut net = PolicyNet::new(6, &[16, 16], 2, 0.0, &mut rng);
    let n = 64;
    let obs = Array2::from_shape_fn((n, 6), |_| rng.random_range(-1.0..1.0));
    let before = net.forward(obs.view()).unwrap().mean;
    let batch = RolloutBatch {
        n_envs: 1,
        horizon: n,
        obs: obs.clone(),
        actions: Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0)),
        log_probs: vec![-1.0; n],
        rewards: vec![0.0; n],
        values: vec![0.0; n],
        dones: vec![false; n],
        bootstrap: vec![0.0],
        advantages: vec![0.0; n],
        returns: vec![0.0; n],
    };
    let cfg = PpoConfig {
        entropy_coef: 0.0,
        value_coef: 0.0,
        minibatch_size: 16,
        horizon: n,
        num_envs: 1,
        ..PpoConfig::default()
    };
    let mut adam = Adam::new(&net);
    let stats = ppo_update(&mut net, &mut adam, &batch, &cfg, 1e-3, &mut rng).unwrap();
    let after = net.forward(obs.view()).unwrap().mean;
    assert_eq!(before, after);
    assert_eq!(stats.grad_norm, 0.0);
}

#[test]
fn reach_annulus_matches_sampled_workspace() {
    let model = CraneModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for height in [0.8, 1.5, 3.0] {
        let (lo, hi) = reach_annulus(&model, height).unwrap();
        let (mut s_lo, mut s_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..400_000 {
            let q = common::random_q(&model, &mut rng);
            let tip = forward_kinematics(&q, &model).unwrap().tip.translation.vector;
            if (tip.z - height).abs() < 0.02 {
                let r = (tip.x * tip.x + tip.y * tip.y).sqrt();
                s_lo = s_lo.min(r);
                s_hi = s_hi.max(r);
            }
        }
        // samples lie inside the annulus and come close to both rims
        assert!(
            s_lo >= lo - 0.1 && s_hi <= hi + 0.1,
            "h {height}: sampled [{s_lo}, {s_hi}] vs [{lo}, {hi}]"
        );
        assert!(
            s_lo - lo < 0.25 && hi - s_hi < 0.25,
            "h {height}: sampled [{s_lo}, {s_hi}] vs [{lo}, {hi}]"
        );
    }
}

#[test]
fn free_pendulum_swings_at_small_angle_period() {
    let model = CraneModel {
        pendulum_damping: 0.0,
        ..CraneModel::default()
    };
    let mut state = CraneState::at_rest(crane_rl::env::EpisodeConfig::default().nominal_q);
    state.pend = [0.02, 0.0];
    let inputs = StepInputs::default();
    let target = [0.0; 6];
    let mut crossings = Vec::new();
    let mut prev = state.pend[0];
    for k in 0..5000 {
        state = step_dynamics(&model, &state, &target, DT, &inputs).unwrap();
        let a = state.pend[0];
        if prev > 0.0 && a <= 0.0 {
            // linear interpolation of the crossing time
            crossings.push((k as f64 + prev / (prev - a)) * DT);
        }
        prev = a;
    }
    assert!(crossings.len() >= 10);
    let period = (crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64;
    let expected = 2.0 * std::f64::consts::PI * (model.geometry.pendulum_length / STANDARD_GRAVITY).sqrt();
    assert_relative_eq!(period, expected, max_relative = 0.01);
    // the boom stays put while the grapple swings
    assert_eq!(state.q, crane_rl::env::EpisodeConfig::default().nominal_q);
}
