//! Parallel experience collection with a frozen policy snapshot.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::env::{Action, Env, StepResult, TerminationCause, ACTION_DIM};
use crate::error::{Error, Result};
use crate::nn::{sample_action, PolicyNet, SampledAction};
use crate::ppo::RolloutBatch;

/// An environment plus the private RNG used to sample its actions.
#[derive(Clone, Debug)]
pub struct Worker {
    pub env: Env,
    pub rng: ChaCha8Rng,
    obs: Option<Vec<f64>>,
    episode_return: f64,
    episode_decisions: u32,
}

/// Summary of a finished training episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub env: usize,
    /// Lesson the episode was sampled from.
    pub lesson: usize,
    pub success: bool,
    pub cause: TerminationCause,
    pub episode_return: f64,
    pub decisions: u32,
    pub sim_steps: u32,
    pub energy: f64,
}

impl Worker {
    pub fn new(env: Env, seed: u64) -> Self {
        Self {
            env,
            rng: ChaCha8Rng::seed_from_u64(seed),
            obs: None,
            episode_return: 0.0,
            episode_decisions: 0,
        }
    }

    /// Drops the running episode; the next collection starts with a reset.
    pub fn abandon_episode(&mut self) {
        self.obs = None;
        self.episode_return = 0.0;
        self.episode_decisions = 0;
    }

    fn ensure_obs(&mut self) -> Result<&[f64]> {
        if self.obs.is_none() {
            self.obs = Some(self.env.reset()?);
            self.episode_return = 0.0;
            self.episode_decisions = 0;
        }
        Ok(self.obs.as_deref().expect("just set"))
    }

    fn advance(&mut self, index: usize, sample: &SampledAction) -> Result<(StepResult, Option<EpisodeOutcome>)> {
        let action: Action = std::array::from_fn(|j| sample.action[j]);
        let lesson = self.env.lesson().index;
        let res = self.env.step(&action)?;
        self.episode_return += res.reward;
        self.episode_decisions += 1;
        let outcome = if res.done {
            let o = EpisodeOutcome {
                env: index,
                lesson,
                success: res.breakdown.cause == TerminationCause::Success,
                cause: res.breakdown.cause,
                episode_return: self.episode_return,
                decisions: self.episode_decisions,
                sim_steps: self.env.sim_steps(),
                energy: res.breakdown.energy_at_grasp,
            };
            self.obs = Some(self.env.reset()?);
            self.episode_return = 0.0;
            self.episode_decisions = 0;
            Some(o)
        } else {
            self.obs = Some(res.obs.clone());
            None
        };
        Ok((res, outcome))
    }
}

fn stack_obs(workers: &[Worker], dim: usize) -> Array2<f64> {
    let mut x = Array2::zeros((workers.len(), dim));
    for (mut row, w) in x.rows_mut().into_iter().zip(workers) {
        row.assign(&ndarray::ArrayView1::from(
            w.obs.as_deref().expect("observation present"),
        ));
    }
    x
}

/// Advances every worker `horizon` decisions with the same policy snapshot.
/// Returns the batch (advantages not yet computed) and the episodes that
/// finished, ordered by decision index and then environment index.
pub fn collect_rollouts(
    net: &PolicyNet,
    workers: &mut [Worker],
    horizon: usize,
) -> Result<(RolloutBatch, Vec<EpisodeOutcome>)> {
    let n_envs = workers.len();
    let dim = net.obs_dim();
    for (i, w) in workers.iter_mut().enumerate() {
        w.ensure_obs().map_err(|e| env_err(i, e))?;
    }
    let total = n_envs * horizon;
    let mut obs = Array2::zeros((total, dim));
    let mut actions = Array2::zeros((total, ACTION_DIM));
    let mut log_probs = vec![0.0; total];
    let mut rewards = vec![0.0; total];
    let mut values = vec![0.0; total];
    let mut dones = vec![false; total];
    let mut outcomes = Vec::new();
    let log_std = net.clamped_log_std().to_vec();

    for t in 0..horizon {
        let x = stack_obs(workers, dim);
        let out = net.forward(x.view())?;
        let samples: Vec<SampledAction> = workers
            .iter_mut()
            .enumerate()
            .map(|(e, w)| {
                sample_action(
                    out.mean.row(e).as_slice().expect("contiguous row"),
                    &log_std,
                    &mut w.rng,
                )
            })
            .collect();
        let stepped: Vec<Result<(StepResult, Option<EpisodeOutcome>)>> = workers
            .par_iter_mut()
            .zip(samples.par_iter())
            .enumerate()
            .map(|(e, (w, s))| w.advance(e, s))
            .collect();
        for (e, r) in stepped.into_iter().enumerate() {
            let (res, outcome) = r.map_err(|err| env_err(e, err))?;
            let k = e * horizon + t;
            obs.row_mut(k).assign(&x.row(e));
            actions.row_mut(k).assign(&ndarray::ArrayView1::from(&samples[e].raw));
            log_probs[k] = samples[e].log_prob;
            rewards[k] = res.reward;
            values[k] = out.value[e];
            dones[k] = res.done;
            outcomes.extend(outcome);
        }
    }
    let bootstrap = net.forward(stack_obs(workers, dim).view())?.value.to_vec();
    Ok((
        RolloutBatch {
            n_envs,
            horizon,
            obs,
            actions,
            log_probs,
            rewards,
            values,
            dones,
            bootstrap,
            advantages: Vec::new(),
            returns: Vec::new(),
        },
        outcomes,
    ))
}

fn env_err(index: usize, e: Error) -> Error {
    match e {
        Error::Env { .. } => e,
        other => Error::Env {
            index,
            source: Box::new(other),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curriculum::{LessonSpec, SamplingRegion};
    use crate::env::{EnvConfig, OBS_DIM};
    use crate::world::LogMode;

    fn lesson() -> LessonSpec {
        LessonSpec {
            index: 0,
            plane_height: 2.5,
            region: SamplingRegion {
                r_min: 2.6,
                r_max: 3.0,
                theta_min: 2.6,
                theta_max: 2.8,
            },
            plane_collision_enabled: false,
            advancement_threshold: 0.3,
            window: 20,
        }
    }

    fn workers(n: usize, same_seed: bool) -> Vec<Worker> {
        (0..n)
            .map(|i| {
                let s = if same_seed { 7 } else { i as u64 };
                Worker::new(Env::new(EnvConfig::default(), lesson(), LogMode::Training, s), 100 + s)
            })
            .collect()
    }

    #[test]
    fn env_major_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = PolicyNet::new(OBS_DIM, &[16], ACTION_DIM, 0.0, &mut rng);
        let mut ws = workers(2, false);
        let (batch, _) = collect_rollouts(&net, &mut ws, 4).unwrap();
        assert_eq!(batch.len(), 8);
        assert_eq!(batch.obs.nrows(), 8);
        assert_eq!(batch.bootstrap.len(), 2);
        // each block holds one env's own draws
        assert_ne!(batch.actions.row(0), batch.actions.row(4));
    }

    #[test]
    fn identical_seeds_identical_trajectories() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = PolicyNet::new(OBS_DIM, &[16], ACTION_DIM, 0.0, &mut rng);
        let mut ws = workers(2, true);
        let (batch, _) = collect_rollouts(&net, &mut ws, 6).unwrap();
        for t in 0..6 {
            assert_eq!(batch.obs.row(t), batch.obs.row(6 + t));
            assert_eq!(batch.actions.row(t), batch.actions.row(6 + t));
            assert_eq!(batch.rewards[t], batch.rewards[6 + t]);
        }
    }
}
