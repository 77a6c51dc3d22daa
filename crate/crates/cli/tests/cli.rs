use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crane_rl::curriculum::build_schedule;
use crane_rl::eval::{evaluate, write_trajectory_csv, EvalSetup, ScriptedGrasp};
use crane_rl::world::LogMode;
use crane_rl::{Checkpoint, RunConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_crane-rl"));
    c.env("CRANE_RL_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn shrunk() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/shrunk.toml")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn print_config_without_file_prints_defaults() {
    let o = run(&["print-config"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = RunConfig::from_toml_str(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn overrides_show_in_printed_config() {
    let o = run(&[
        "print-config",
        "--seed",
        "42",
        "--mode",
        "energy",
        "--perturb",
        "slope_grade=0.176",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = RunConfig::from_toml_str(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg.seed, 42);
    assert_eq!(cfg.mode, crane_rl::RewardMode::EnergyOptimized);
    assert_eq!(cfg.perturbation.slope_grade, 0.176);
}

#[test]
fn unknown_config_key_fails_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[ppo]\nclip = 0.2\n").unwrap();
    let o = run(&[
        "train",
        "--config",
        path.to_str().unwrap(),
        "--steps",
        "0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("clip"), "{}", stderr(&o));
    assert!(!dir.path().join("checkpoint.bin").exists());
}

#[test]
fn zero_step_training_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&[
        "train",
        "--config",
        shrunk().to_str().unwrap(),
        "--steps",
        "0",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = Checkpoint::load(&out.join("checkpoint.bin")).unwrap();
    assert_eq!(ck.step, 0);
    assert_eq!(ck.config().unwrap().seed, 3);
    for f in [
        "train_log.csv",
        "episodes.csv",
        "returns.csv",
        "curriculum.csv",
        "schedule.csv",
        "config.toml",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,update,lesson,plane_height,episodes,mean_return,success_rate"));
    // resuming may only change the budget
    let o = run(&["train", "--resume", "--out", out.to_str().unwrap(), "--seed", "4"]);
    assert!(!o.status.success());
    let o = run(&["train", "--resume", "--out", out.to_str().unwrap(), "--steps", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn scripted_eval_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "eval",
        "--policy",
        "scripted",
        "--config",
        shrunk().to_str().unwrap(),
        "--episodes",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "policy,n,success_rate,mean_time_s,mean_energy_J,relative_energy"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "scripted");
    assert_eq!(row[1], "1");
    assert_eq!(row[2].parse::<f64>().unwrap(), 1.0);
    assert_eq!(row[5].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn empty_suite_gives_header_only_sensitivity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[eval]\nsuite = []\n").unwrap();
    let o = run(&[
        "sensitivity",
        "--policy",
        "zero",
        "--config",
        cfg.to_str().unwrap(),
        "--episodes",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("sensitivity.csv")).unwrap();
    assert_eq!(csv, "perturbation,baseline,perturbed,retention\n");
}

#[test]
fn exported_trajectory_matches_in_memory_record() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "export-trajectory",
        "--policy",
        "scripted",
        "--config",
        shrunk().to_str().unwrap(),
        "--episodes",
        "2",
        "--seed",
        "77",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let cfg = RunConfig::load(&shrunk()).unwrap();
    let env = cfg.env_config();
    let schedule = build_schedule(&cfg.curriculum, &cfg.crane).unwrap();
    let setup = EvalSetup {
        env: &env,
        lesson: schedule.last().unwrap(),
        log_mode: LogMode::Evaluation,
        stats: None,
        seed: 77,
        record_trace: true,
    };
    let records = evaluate(ScriptedGrasp::default, &setup, 2).unwrap();
    for r in &records {
        let mut expected = Vec::new();
        write_trajectory_csv(r, &mut expected).unwrap();
        let written = std::fs::read(dir.path().join(format!("trajectory_{}.csv", r.episode))).unwrap();
        assert_eq!(written, expected);
        let text = String::from_utf8(written).unwrap();
        assert_eq!(text.lines().count(), r.trace.len() + 1);
        assert!(text
            .lines()
            .next()
            .unwrap()
            .starts_with("t,tip_x,tip_y,tip_z,speed,accel,q1"));
    }
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "eval",
        "--checkpoint",
        dir.path().join("nope.bin").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nope.bin"), "{}", stderr(&o));
}

#[test]
fn invalid_thread_count_is_rejected() {
    let o = bin()
        .env("CRANE_RL_THREADS", "zero")
        .arg("print-config")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("CRANE_RL_THREADS"));
}
