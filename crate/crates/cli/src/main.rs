use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crane_rl::checkpoint::{write_atomic, Checkpoint};
use crane_rl::config::apply_perturb_override;
use crane_rl::curriculum::build_schedule;
use crane_rl::env::{EnvConfig, RunningStats};
use crane_rl::eval::{
    evaluate, sensitivity_suite, summarize, write_sensitivity_csv, write_summary_csv, write_trajectory_csv, Controller,
    EvalSetup, PolicyController, ScriptedGrasp, ZeroController,
};
use crane_rl::world::LogMode;
use crane_rl::{PolicyNet, RewardMode, RunConfig, Trainer};

#[derive(Parser, Debug)]
#[command(name = "crane-rl", version, about = "Timber-crane grasping with PPO")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a policy; writes checkpoint.bin and the CSV logs into --out.
    Train(TrainArgs),
    /// Evaluate a policy on the target lesson; writes summary.csv.
    Eval(EvalArgs),
    /// Run the perturbation suite; writes sensitivity.csv.
    Sensitivity(EvalArgs),
    /// Record episodes and write trajectory_<ep>.csv for each.
    ExportTrajectory(EvalArgs),
    /// Print the resolved configuration.
    PrintConfig(ConfigArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training budget in simulation steps.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    mode: Option<RewardMode>,
    /// Training perturbation override, NAME=VALUE (repeatable).
    #[arg(long = "perturb", value_name = "NAME=VALUE")]
    perturb: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (defaults to the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from <out>/checkpoint.bin.
    #[arg(long)]
    resume: bool,
    /// Write outputs every N updates (0 = only at the end).
    #[arg(long, default_value_t = 25)]
    checkpoint_every: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    /// The network stored in --checkpoint.
    Checkpoint,
    /// Hand-written inverse-kinematics grasp controller.
    Scripted,
    /// Commands zero speed on every joint.
    Zero,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Configuration for scripted/zero policies (ignored with a checkpoint).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PolicyKind::Checkpoint)]
    policy: PolicyKind,
    /// Checkpoint whose mean energy is the relative-energy reference.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Reward mode of the evaluation environment.
    #[arg(long)]
    mode: Option<RewardMode>,
    /// Evaluation perturbation, NAME=VALUE (repeatable).
    #[arg(long = "perturb", value_name = "NAME=VALUE")]
    perturb: Vec<String>,
    /// Lesson to evaluate on (defaults to the final one).
    #[arg(long)]
    lesson: Option<usize>,
    /// Sample logs the way training does instead of the fixed 3 m logs.
    #[arg(long)]
    training_logs: bool,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads().and_then(|_| run(cli)) {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CRANE_RL_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("CRANE_RL_THREADS={v:?} is not a count"))?;
        if n == 0 {
            bail!("CRANE_RL_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sensitivity(a) => cmd_sensitivity(a),
        Command::ExportTrajectory(a) => cmd_export(a),
        Command::PrintConfig(a) => {
            print!("{}", resolve_config(&a)?.to_toml_string()?);
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn resolve_config(a: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.total_steps = s;
    }
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    for p in &a.perturb {
        apply_perturb_override(&mut cfg.perturbation, p)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut trainer = if a.resume {
        let out = match &a.out {
            Some(o) => o.clone(),
            None => PathBuf::from(resolve_config(&a.config)?.out_dir),
        };
        let ck = Checkpoint::load(&out.join("checkpoint.bin")).context("loading checkpoint to resume")?;
        let saved = ck.config()?;
        let c = &a.config;
        if c.config.is_some() || c.seed.is_some() || c.mode.is_some() || !c.perturb.is_empty() {
            bail!("--resume takes its configuration from the checkpoint; only --steps may change");
        }
        let mut t = Trainer::from_checkpoint(&ck)?;
        if let Some(s) = c.steps {
            t.set_total_steps(s)?;
        }
        t.load_logs(&out)?;
        eprintln!("resuming {} at step {} ({} mode)", out.display(), t.step, saved.mode);
        (t, out)
    } else {
        let cfg = resolve_config(&a.config)?;
        let out = a.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
        (Trainer::new(cfg)?, out)
    };
    let (ref mut t, ref out) = trainer;
    std::fs::create_dir_all(out)?;
    let every = a.checkpoint_every;
    t.run(|t| {
        if let Some(r) = t.log.last() {
            eprintln!(
                "step {:>10} update {:>5} lesson {:>2} h {:.2} return {:>8.4} success {:.2}",
                r.step, r.update, r.lesson, r.plane_height, r.mean_return, r.success_rate
            );
        }
        if every > 0 && t.updates % every == 0 {
            t.write_outputs(out)?;
        }
        Ok(())
    })?;
    t.write_outputs(out)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

/// Everything an evaluation needs, owned.
struct Loaded {
    name: String,
    kind: PolicyKind,
    cfg: RunConfig,
    net: Option<PolicyNet>,
    stats: Option<RunningStats>,
}

fn load_policy(a: &EvalArgs) -> Result<Loaded> {
    match a.policy {
        PolicyKind::Checkpoint => {
            let path = a
                .checkpoint
                .as_ref()
                .context("--checkpoint is required for a checkpoint policy")?;
            let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            Ok(Loaded {
                name: path.display().to_string(),
                kind: a.policy,
                cfg: ck.config()?,
                net: Some(ck.net),
                stats: Some(ck.stats),
            })
        }
        kind => Ok(Loaded {
            name: format!("{kind:?}").to_lowercase(),
            kind,
            cfg: load_config(a.config.as_deref())?,
            net: None,
            stats: None,
        }),
    }
}

enum AnyController<'a> {
    Policy(PolicyController<'a>),
    Scripted(ScriptedGrasp),
    Zero(ZeroController),
}

impl Controller for AnyController<'_> {
    fn reset(&mut self) {
        match self {
            Self::Policy(c) => c.reset(),
            Self::Scripted(c) => c.reset(),
            Self::Zero(c) => c.reset(),
        }
    }

    fn act(&mut self, env: &crane_rl::Env, obs: &[f64]) -> crane_rl::Result<crane_rl::env::Action> {
        match self {
            Self::Policy(c) => c.act(env, obs),
            Self::Scripted(c) => c.act(env, obs),
            Self::Zero(c) => c.act(env, obs),
        }
    }
}

impl Loaded {
    fn controller(&self) -> AnyController<'_> {
        match (self.kind, &self.net) {
            (PolicyKind::Checkpoint, Some(net)) => AnyController::Policy(PolicyController { net }),
            (PolicyKind::Scripted, _) => AnyController::Scripted(ScriptedGrasp::default()),
            _ => AnyController::Zero(ZeroController),
        }
    }

    fn env_config(&self, a: &EvalArgs) -> Result<EnvConfig> {
        let mut env = self.cfg.env_config();
        // evaluation starts from a clean world unless perturbations are given
        env.perturbation = Default::default();
        for p in &a.perturb {
            apply_perturb_override(&mut env.perturbation, p)?;
        }
        if let Some(m) = a.mode {
            env.reward_mode = m;
        }
        Ok(env)
    }
}

fn run_eval(
    l: &Loaded,
    a: &EvalArgs,
    env: &EnvConfig,
    record_trace: bool,
) -> Result<Vec<crane_rl::eval::EpisodeRecord>> {
    let schedule = build_schedule(&l.cfg.curriculum, &l.cfg.crane)?;
    let lesson = match a.lesson {
        Some(i) => schedule
            .get(i)
            .with_context(|| format!("lesson {i} not in a {}-lesson schedule", schedule.len()))?,
        None => schedule.last().expect("schedule is never empty"),
    };
    let setup = EvalSetup {
        env,
        lesson,
        log_mode: if a.training_logs {
            LogMode::Training
        } else {
            LogMode::Evaluation
        },
        stats: l.stats.as_ref(),
        seed: a.seed.unwrap_or(l.cfg.eval.seed),
        record_trace,
    };
    Ok(evaluate(
        || l.controller(),
        &setup,
        a.episodes.unwrap_or(l.cfg.eval.episodes),
    )?)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let l = load_policy(&a)?;
    let env = l.env_config(&a)?;
    let records = run_eval(&l, &a, &env, false)?;
    let reference = match &a.reference {
        Some(path) => {
            let r = EvalArgs {
                checkpoint: Some(path.clone()),
                policy: PolicyKind::Checkpoint,
                config: None,
                reference: None,
                perturb: a.perturb.clone(),
                training_logs: a.training_logs,
                out: a.out.clone(),
                ..a
            };
            let rl = load_policy(&r)?;
            let s = summarize("reference", &run_eval(&rl, &r, &rl.env_config(&r)?, false)?, None);
            Some(s.mean_energy_j)
        }
        None => None,
    };
    let summary = summarize(&l.name, &records, reference);
    std::fs::create_dir_all(&a.out)?;
    let mut buf = Vec::new();
    write_summary_csv(std::slice::from_ref(&summary), &mut buf)?;
    write_atomic(&a.out.join("summary.csv"), &buf)?;
    eprintln!(
        "{}: n {} success {:.3} time {:.2} s energy {:.0} J",
        summary.policy, summary.n, summary.success_rate, summary.mean_time_s, summary.mean_energy_j
    );
    Ok(())
}

fn cmd_sensitivity(a: EvalArgs) -> Result<()> {
    let l = load_policy(&a)?;
    let env = l.env_config(&a)?;
    let schedule = build_schedule(&l.cfg.curriculum, &l.cfg.crane)?;
    let lesson = match a.lesson {
        Some(i) => schedule
            .get(i)
            .with_context(|| format!("lesson {i} not in the schedule"))?,
        None => schedule.last().expect("schedule is never empty"),
    };
    let setup = EvalSetup {
        env: &env,
        lesson,
        log_mode: if a.training_logs {
            LogMode::Training
        } else {
            LogMode::Evaluation
        },
        stats: l.stats.as_ref(),
        seed: a.seed.unwrap_or(l.cfg.eval.seed),
        record_trace: false,
    };
    let n = a.episodes.unwrap_or(l.cfg.eval.episodes);
    let rows = sensitivity_suite(|| l.controller(), &setup, &l.cfg.eval.suite, n)?;
    std::fs::create_dir_all(&a.out)?;
    let mut buf = Vec::new();
    write_sensitivity_csv(&rows, &mut buf)?;
    write_atomic(&a.out.join("sensitivity.csv"), &buf)?;
    for r in &rows {
        eprintln!(
            "{:<24} {:.3} -> {:.3} retention {:.3}",
            r.perturbation, r.baseline, r.perturbed, r.retention
        );
    }
    Ok(())
}

fn cmd_export(a: EvalArgs) -> Result<()> {
    let l = load_policy(&a)?;
    let env = l.env_config(&a)?;
    let a = EvalArgs {
        episodes: Some(a.episodes.unwrap_or(1)),
        ..a
    };
    let records = run_eval(&l, &a, &env, true)?;
    std::fs::create_dir_all(&a.out)?;
    for r in &records {
        let mut buf = Vec::new();
        write_trajectory_csv(r, &mut buf)?;
        let path = a.out.join(format!("trajectory_{}.csv", r.episode));
        write_atomic(&path, &buf)?;
        eprintln!(
            "{}: {} after {} sim steps",
            path.display(),
            r.cause.as_str(),
            r.sim_steps
        );
    }
    Ok(())
}
