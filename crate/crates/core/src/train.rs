//! Collect/update training loop with the curriculum and CSV logs.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::config::RunConfig;
use crate::curriculum::{build_schedule, write_schedule_csv, LessonSpec, ProgressTracker};
use crate::env::{Env, RunningStats, ACTION_DIM, FRAME_DIM, OBS_DIM, SIM_STEPS_PER_DECISION};
use crate::error::{Error, Result};
use crate::nn::{Adam, PolicyNet};
use crate::ppo::{lr_at, ppo_update, UpdateStats};
use crate::rollout::{collect_rollouts, EpisodeOutcome, Worker};
use crate::world::LogMode;

/// Episodes in the rolling success-rate window of the training log.
pub const SUCCESS_WINDOW: usize = 20;

/// One row per PPO update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub update: u64,
    pub lesson: usize,
    pub plane_height: f64,
    pub episodes: u64,
    /// Mean return of the episodes finished during this update's rollout.
    pub mean_return: f64,
    /// Over the last 20 finished episodes.
    pub success_rate: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub lr: f64,
}

/// One row per finished training episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLogRow {
    /// Training step at the end of the rollout containing the episode.
    pub step: u64,
    pub env: usize,
    pub lesson: usize,
    pub success: bool,
    pub cause: String,
    pub episode_return: f64,
    pub decisions: u32,
    pub sim_steps: u32,
    pub energy: f64,
}

pub struct Trainer {
    pub cfg: RunConfig,
    config_toml: String,
    pub schedule: Vec<LessonSpec>,
    pub tracker: ProgressTracker,
    pub net: PolicyNet,
    pub adam: Adam,
    pub stats: RunningStats,
    workers: Vec<Worker>,
    rng: ChaCha8Rng,
    pub step: u64,
    pub updates: u64,
    pub episodes: u64,
    recent: VecDeque<bool>,
    pub log: Vec<TrainLogRow>,
    pub episode_log: Vec<EpisodeLogRow>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let config_toml = cfg.to_toml_string()?;
        let schedule = build_schedule(&cfg.curriculum, &cfg.crane)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = PolicyNet::new(
            OBS_DIM,
            &cfg.ppo.hidden_layers,
            ACTION_DIM,
            cfg.ppo.initial_log_std,
            &mut rng,
        );
        let env_cfg = cfg.env_config();
        let workers = (0..cfg.ppo.num_envs)
            .map(|_| {
                let env = Env::new(env_cfg.clone(), schedule[0].clone(), LogMode::Training, rng.random());
                Worker::new(env, rng.random())
            })
            .collect();
        Ok(Self {
            tracker: ProgressTracker::for_schedule(&schedule),
            adam: Adam::new(&net),
            net,
            stats: RunningStats::new(FRAME_DIM),
            workers,
            rng,
            schedule,
            config_toml,
            cfg,
            step: 0,
            updates: 0,
            episodes: 0,
            recent: VecDeque::with_capacity(SUCCESS_WINDOW),
            log: Vec::new(),
            episode_log: Vec::new(),
        })
    }

    /// Restores a run; in-flight episodes are restarted.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck.config()?;
        let mut t = Self::new(cfg)?;
        if ck.rngs.len() != 1 + 3 * t.workers.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} RNG states, expected {}",
                ck.rngs.len(),
                1 + 3 * t.workers.len()
            )));
        }
        if ck.net.obs_dim() != OBS_DIM || ck.net.action_dim() != ACTION_DIM || ck.stats.dim() != FRAME_DIM {
            return Err(Error::Checkpoint(
                "network or statistics dimensions do not match".into(),
            ));
        }
        t.config_toml = ck.config_toml.clone();
        t.step = ck.step;
        t.updates = ck.updates;
        t.episodes = ck.episodes;
        t.net = ck.net.clone();
        t.adam = ck.adam.clone();
        t.stats = ck.stats.clone();
        t.tracker = ck.tracker.clone();
        t.rng = ck.rngs[0].clone();
        let lesson = t.current_lesson().clone();
        for (i, w) in t.workers.iter_mut().enumerate() {
            let base = 1 + 3 * i;
            w.env.set_rng_state(ck.rngs[base].clone(), ck.rngs[base + 1].clone());
            w.rng = ck.rngs[base + 2].clone();
            w.env.sync_stats(&t.stats);
            w.env.set_lesson(lesson.clone());
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut rngs = vec![self.rng.clone()];
        for w in &self.workers {
            let (a, b) = w.env.rng_state();
            rngs.extend([a.clone(), b.clone(), w.rng.clone()]);
        }
        Checkpoint {
            config_toml: self.config_toml.clone(),
            step: self.step,
            updates: self.updates,
            episodes: self.episodes,
            net: self.net.clone(),
            adam: self.adam.clone(),
            stats: self.stats.clone(),
            tracker: self.tracker.clone(),
            rngs,
        }
    }

    /// Changes the step budget (and the learning-rate horizon with it).
    pub fn set_total_steps(&mut self, total: u64) -> Result<()> {
        self.cfg.total_steps = total;
        self.config_toml = self.cfg.to_toml_string()?;
        Ok(())
    }

    pub fn current_lesson(&self) -> &LessonSpec {
        &self.schedule[self.tracker.lesson]
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    fn record_episodes(&mut self, outcomes: &[EpisodeOutcome]) -> f64 {
        let mut sum = 0.0;
        for o in outcomes {
            sum += o.episode_return;
            self.episodes += 1;
            if self.recent.len() == SUCCESS_WINDOW {
                self.recent.pop_front();
            }
            self.recent.push_back(o.success);
            // episodes begun on an earlier lesson do not count toward the new one
            if o.lesson == self.tracker.lesson && self.tracker.record_and_maybe_advance(o.success) {
                let lesson = self.current_lesson().clone();
                for w in &mut self.workers {
                    w.env.set_lesson(lesson.clone());
                }
            }
            self.episode_log.push(EpisodeLogRow {
                step: self.step,
                env: o.env,
                lesson: o.lesson,
                success: o.success,
                cause: o.cause.as_str().into(),
                episode_return: o.episode_return,
                decisions: o.decisions,
                sim_steps: o.sim_steps,
                energy: o.energy,
            });
        }
        if outcomes.is_empty() {
            f64::NAN
        } else {
            sum / outcomes.len() as f64
        }
    }

    /// One collection phase followed by one PPO update.
    pub fn update_once(&mut self) -> Result<&TrainLogRow> {
        let ppo = self.cfg.ppo.clone();
        let (mut batch, outcomes) = collect_rollouts(&self.net, &mut self.workers, ppo.horizon)?;
        for w in &mut self.workers {
            self.stats.merge(&w.env.take_stats_delta());
        }
        for w in &mut self.workers {
            w.env.sync_stats(&self.stats);
        }
        let lr = lr_at(self.step, self.cfg.total_steps, ppo.learning_rate);
        self.step += (batch.len() as u64) * SIM_STEPS_PER_DECISION as u64;
        let mean_return = self.record_episodes(&outcomes);
        batch.compute_advantages(ppo.gamma, ppo.gae_lambda);
        let stats = ppo_update(&mut self.net, &mut self.adam, &batch, &ppo, lr, &mut self.rng)?;
        self.updates += 1;
        let row = self.log_row(mean_return, &stats, lr);
        self.log.push(row);
        Ok(self.log.last().expect("just pushed"))
    }

    fn log_row(&self, mean_return: f64, s: &UpdateStats, lr: f64) -> TrainLogRow {
        let success_rate = if self.recent.is_empty() {
            f64::NAN
        } else {
            self.recent.iter().filter(|s| **s).count() as f64 / self.recent.len() as f64
        };
        TrainLogRow {
            step: self.step,
            update: self.updates,
            lesson: self.tracker.lesson,
            plane_height: self.current_lesson().plane_height,
            episodes: self.episodes,
            mean_return,
            success_rate,
            policy_loss: s.policy_loss,
            value_loss: s.value_loss,
            entropy: s.entropy,
            clip_fraction: s.clip_fraction,
            approx_kl: s.approx_kl,
            lr,
        }
    }

    /// Trains until the step budget is spent, calling `on_update` after
    /// every update.
    pub fn run<F: FnMut(&Trainer) -> Result<()>>(&mut self, mut on_update: F) -> Result<()> {
        while !self.is_finished() {
            self.update_once()?;
            on_update(self)?;
        }
        Ok(())
    }

    /// Final lesson's spec (the target task).
    pub fn final_lesson(&self) -> &LessonSpec {
        self.schedule.last().expect("schedule is never empty")
    }

    /// Writes the checkpoint and every CSV log into `dir`, each atomically.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.checkpoint().save(&dir.join("checkpoint.bin"))?;
        write_atomic(
            &dir.join("train_log.csv"),
            &serialize_rows(&TRAIN_LOG_HEADER, &self.log)?,
        )?;
        write_atomic(
            &dir.join("episodes.csv"),
            &serialize_rows(&EPISODE_LOG_HEADER, &self.episode_log)?,
        )?;
        let mut returns = csv::Writer::from_writer(Vec::new());
        returns.write_record(["step", "mean_return"])?;
        let mut curriculum = csv::Writer::from_writer(Vec::new());
        curriculum.write_record(["step", "lesson", "plane_height"])?;
        for r in &self.log {
            returns.write_record([r.step.to_string(), r.mean_return.to_string()])?;
            curriculum.write_record([r.step.to_string(), r.lesson.to_string(), r.plane_height.to_string()])?;
        }
        write_atomic(&dir.join("returns.csv"), &into_bytes(returns)?)?;
        write_atomic(&dir.join("curriculum.csv"), &into_bytes(curriculum)?)?;
        let mut sched = Vec::new();
        write_schedule_csv(&self.schedule, &mut sched)?;
        write_atomic(&dir.join("schedule.csv"), &sched)?;
        write_atomic(&dir.join("config.toml"), self.config_toml.as_bytes())?;
        Ok(())
    }

    /// Reloads the CSV logs of a previous session so a resumed run keeps
    /// its history.
    pub fn load_logs(&mut self, dir: &Path) -> Result<()> {
        let read = |name: &str| -> Result<Option<Vec<u8>>> {
            match std::fs::read(dir.join(name)) {
                Ok(b) => Ok(Some(b)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(e.into()),
            }
        };
        if let Some(b) = read("train_log.csv")? {
            self.log = deserialize_rows(&b)?;
            self.log.retain(|r| r.update <= self.updates);
        }
        if let Some(b) = read("episodes.csv")? {
            self.episode_log = deserialize_rows(&b)?;
            self.episode_log.retain(|r| r.step <= self.step);
            self.recent = self
                .episode_log
                .iter()
                .rev()
                .take(SUCCESS_WINDOW)
                .rev()
                .map(|r| r.success)
                .collect();
        }
        Ok(())
    }
}

fn into_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

const TRAIN_LOG_HEADER: [&str; 13] = [
    "step",
    "update",
    "lesson",
    "plane_height",
    "episodes",
    "mean_return",
    "success_rate",
    "policy_loss",
    "value_loss",
    "entropy",
    "clip_fraction",
    "approx_kl",
    "lr",
];

const EPISODE_LOG_HEADER: [&str; 9] = [
    "step",
    "env",
    "lesson",
    "success",
    "cause",
    "episode_return",
    "decisions",
    "sim_steps",
    "energy",
];

// Headers are written explicitly so that empty logs still carry them.
fn serialize_rows<T: Serialize>(header: &[&str], rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    into_bytes(w)
}

fn deserialize_rows<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<Vec<T>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(Error::from)
}
