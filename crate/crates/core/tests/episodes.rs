mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crane_rl::curriculum::{build_schedule, CurriculumConfig};
use crane_rl::env::{Env, EnvConfig, TerminationCause};
use crane_rl::eval::{evaluate, summarize, EvalSetup, ScriptedGrasp, ZeroController};
use crane_rl::world::LogMode;

#[test]
fn stalled_boom_ends_with_effort_at_limit() {
    let (cause, steps) = common::constant_action_episode(common::EFFORT_ACTION, 0);
    assert_eq!(cause, TerminationCause::EffortAtLimit);
    assert!(steps < 2000);
}

#[test]
fn lowering_onto_bunk_ends_with_collision() {
    let (cause, steps) = common::constant_action_episode(common::BUNK_ACTION, 0);
    assert_eq!(cause, TerminationCause::BunkCollision);
    assert!(steps < 2000);
}

#[test]
fn idle_crane_times_out_at_budget() {
    let (cause, steps) = common::constant_action_episode([0.0; 6], 1);
    assert_eq!(cause, TerminationCause::Timeout);
    assert_eq!(steps, 2000);
}

#[test]
fn random_episodes_end_within_budget_with_one_cause() {
    let cfg = EnvConfig::default();
    let schedule = build_schedule(&CurriculumConfig::default(), &cfg.model).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (k, lesson) in [&schedule[0], &schedule[15], &schedule[29]].into_iter().enumerate() {
        let mut env = Env::new(cfg.clone(), lesson.clone(), LogMode::Training, k as u64);
        for _ in 0..4 {
            env.reset().unwrap();
            let done_steps = loop {
                let a: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let r = env.step(&a).unwrap();
                if r.done {
                    assert_ne!(r.breakdown.cause, TerminationCause::Running);
                    assert_eq!(r.breakdown.cause, env.cause());
                    break env.sim_steps();
                }
                assert_eq!(r.breakdown.cause, TerminationCause::Running);
            };
            assert!(done_steps <= 2000);
            assert!(env.step(&[0.0; 6]).is_err());
        }
    }
}

#[test]
fn scripted_grasp_succeeds_and_zero_policy_never_does() {
    let cfg = EnvConfig::default();
    let schedule = build_schedule(&CurriculumConfig::default(), &cfg.model).unwrap();
    let setup = EvalSetup {
        env: &cfg,
        lesson: &schedule[0],
        log_mode: LogMode::Training,
        stats: None,
        seed: 11,
        record_trace: true,
    };
    let recs = evaluate(ScriptedGrasp::default, &setup, 6).unwrap();
    let s = summarize("scripted", &recs, None);
    assert_eq!(s.success_rate, 1.0);
    for r in &recs {
        // eval energy is the environment's frozen meter
        assert_eq!(r.energy, r.trace.last().unwrap().energy);
        assert!(r.cycle_time.unwrap() <= 2000.0 * 0.02);
    }
    let zero = summarize("zero", &evaluate(|| ZeroController, &setup, 3).unwrap(), None);
    assert_eq!(zero.success_rate, 0.0);
}

#[test]
fn evaluation_is_reproducible() {
    let cfg = EnvConfig::default();
    let schedule = build_schedule(&CurriculumConfig::default(), &cfg.model).unwrap();
    let setup = EvalSetup {
        env: &cfg,
        lesson: &schedule[29],
        log_mode: LogMode::Evaluation,
        stats: None,
        seed: 5,
        record_trace: true,
    };
    let a = evaluate(ScriptedGrasp::default, &setup, 3).unwrap();
    let b = evaluate(ScriptedGrasp::default, &setup, 3).unwrap();
    assert_eq!(a, b);
}
