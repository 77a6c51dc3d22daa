//! Clipped-surrogate PPO with generalized advantage estimation.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::nn::{gaussian_entropy, Adam, PolicyNet};

/// Samples per parallel gradient chunk. Fixed so that the summation order,
/// and hence the result, does not depend on the thread count.
const GRAD_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub entropy_coef: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub num_envs: usize,
    /// Decisions per environment per rollout.
    pub horizon: usize,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub initial_log_std: f64,
    pub hidden_layers: Vec<usize>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.3,
            entropy_coef: 0.01,
            gae_lambda: 0.95,
            gamma: 0.995,
            learning_rate: 1e-3,
            num_envs: 8,
            horizon: 1024,
            minibatch_size: 2048,
            epochs: 3,
            value_coef: 0.5,
            max_grad_norm: 5.0,
            initial_log_std: 0.0,
            hidden_layers: vec![256, 256, 256],
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(config_err("clip_epsilon must lie in (0, 1)"));
        }
        if !(self.entropy_coef >= 0.0) {
            return Err(config_err("entropy_coef must be non-negative"));
        }
        if !unit(self.gae_lambda) || !unit(self.gamma) {
            return Err(config_err("gamma and gae_lambda must lie in (0, 1]"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate < 1.0) {
            return Err(config_err("learning_rate must lie in (0, 1)"));
        }
        if self.num_envs == 0 || self.horizon == 0 || self.minibatch_size == 0 || self.epochs == 0 {
            return Err(config_err(
                "num_envs, horizon, minibatch_size and epochs must be positive",
            ));
        }
        if !(self.value_coef >= 0.0 && self.max_grad_norm > 0.0) {
            return Err(config_err("value_coef must be non-negative and max_grad_norm positive"));
        }
        if self.hidden_layers.contains(&0) {
            return Err(config_err("hidden layer widths must be positive"));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.num_envs * self.horizon
    }
}

/// Linearly decaying learning rate, reaching zero at `max_steps`.
pub fn lr_at(step: u64, max_steps: u64, base: f64) -> f64 {
    if max_steps == 0 {
        return 0.0;
    }
    (base * (1.0 - step as f64 / max_steps as f64)).max(0.0)
}

/// Advantages and returns for one trajectory segment. `bootstrap` is the
/// value estimate of the state following the last step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "misaligned GAE inputs");
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Transitions from one collection phase, env-major: index `e * horizon + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    pub n_envs: usize,
    pub horizon: usize,
    pub obs: Array2<f64>,
    /// Pre-clamp Gaussian draws.
    pub actions: Array2<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value of the observation after each env's last step.
    pub bootstrap: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Fills `advantages` and `returns` per environment segment.
    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) {
        self.advantages = vec![0.0; self.len()];
        self.returns = vec![0.0; self.len()];
        for e in 0..self.n_envs {
            let r = e * self.horizon..(e + 1) * self.horizon;
            let (a, ret) = compute_gae(
                &self.rewards[r.clone()],
                &self.values[r.clone()],
                &self.dones[r.clone()],
                self.bootstrap[e],
                gamma,
                lambda,
            );
            self.advantages[r.clone()].copy_from_slice(&a);
            self.returns[r].copy_from_slice(&ret);
        }
    }
}

/// Zero-mean, unit-variance copy of `adv`.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return Vec::new();
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    adv.iter().map(|a| (a - mean) / std).collect()
}

/// Averages over the minibatches of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
}

/// Loss terms summed over a chunk.
#[derive(Clone, Copy, Debug, Default)]
struct ChunkSums {
    surrogate: f64,
    value_se: f64,
    clipped: f64,
    kl: f64,
}

/// Slice of a batch with the inputs a loss evaluation needs.
pub struct Minibatch<'a> {
    pub obs: &'a Array2<f64>,
    pub actions: &'a Array2<f64>,
    pub old_log_probs: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

fn chunk_grad(
    net: &PolicyNet,
    mb: &Minibatch,
    idx: &[usize],
    total: f64,
    cfg: &PpoConfig,
) -> Result<(PolicyNet, ChunkSums)> {
    let obs = mb.obs.select(Axis(0), idx);
    let cache = net.forward_cached(obs.view())?;
    let log_std = net.clamped_log_std();
    let inv_var = log_std.mapv(|l| (-2.0 * l).exp());
    let a_dim = net.action_dim();
    let n = idx.len();
    let mut d_mean = Array2::zeros((n, a_dim));
    let mut d_value = Array1::zeros(n);
    let mut d_log_std = Array1::zeros(a_dim);
    let mut sums = ChunkSums::default();
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let (lo, hi) = (1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
    for (row, &i) in idx.iter().enumerate() {
        let mean = cache.out.mean.row(row);
        let act = mb.actions.row(i);
        let mut logp = 0.0;
        for j in 0..a_dim {
            let z = act[j] - mean[j];
            logp += -0.5 * z * z * inv_var[j] - log_std[j] - 0.5 * ln_2pi;
        }
        let log_ratio = logp - mb.old_log_probs[i];
        let ratio = log_ratio.exp();
        let adv = mb.advantages[i];
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(lo, hi) * adv;
        sums.surrogate += unclipped.min(clipped);
        if ratio < lo || ratio > hi {
            sums.clipped += 1.0;
        }
        sums.kl += (ratio - 1.0) - log_ratio;
        // gradient of −min(...) flows through the ratio only on the unclipped branch
        let active = unclipped <= clipped;
        if active {
            let d_logp = -unclipped / total;
            for j in 0..a_dim {
                let z = act[j] - mean[j];
                d_mean[[row, j]] += d_logp * z * inv_var[j];
                d_log_std[j] += d_logp * (z * z * inv_var[j] - 1.0);
            }
        }
        let v_err = cache.out.value[row] - mb.returns[i];
        sums.value_se += v_err * v_err;
        d_value[row] = 2.0 * cfg.value_coef * v_err / total;
    }
    let g = net.backward(&cache, &d_mean, &d_value, &d_log_std);
    Ok((g, sums))
}

/// Total loss and its gradient over a minibatch.
pub fn loss_and_grad(
    net: &PolicyNet,
    mb: &Minibatch,
    idx: &[usize],
    cfg: &PpoConfig,
) -> Result<(f64, PolicyNet, UpdateStats)> {
    let total = idx.len() as f64;
    let parts: Vec<Result<(PolicyNet, ChunkSums)>> = idx
        .par_chunks(GRAD_CHUNK)
        .map(|c| chunk_grad(net, mb, c, total, cfg))
        .collect();
    let mut grad = net.zeros_like();
    let mut sums = ChunkSums::default();
    for p in parts {
        let (g, s) = p?;
        grad.add_scaled(&g, 1.0);
        sums.surrogate += s.surrogate;
        sums.value_se += s.value_se;
        sums.clipped += s.clipped;
        sums.kl += s.kl;
    }
    let log_std = net.clamped_log_std();
    let entropy = gaussian_entropy(log_std.as_slice().expect("contiguous"));
    // −β·H contributes −β to each (unclamped) log-std gradient
    grad.log_std += &net.masked_log_std_grad(&Array1::from_elem(net.action_dim(), -cfg.entropy_coef));

    let policy_loss = -sums.surrogate / total;
    let value_loss = sums.value_se / total;
    let loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy;
    let stats = UpdateStats {
        policy_loss,
        value_loss,
        entropy,
        clip_fraction: sums.clipped / total,
        approx_kl: sums.kl / total,
        grad_norm: grad.squared_norm().sqrt(),
    };
    Ok((loss, grad, stats))
}

/// Runs the configured epochs of minibatch Adam steps on `batch`. On a
/// non-finite loss the parameters and optimizer are restored and
/// [`Error::NonFiniteLoss`] is returned.
pub fn ppo_update<R: Rng + ?Sized>(
    net: &mut PolicyNet,
    adam: &mut Adam,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    lr: f64,
    rng: &mut R,
) -> Result<UpdateStats> {
    let n = batch.len();
    if n == 0 {
        return Ok(UpdateStats::default());
    }
    let advantages = normalize_advantages(&batch.advantages);
    let mb = Minibatch {
        obs: &batch.obs,
        actions: &batch.actions,
        old_log_probs: &batch.log_probs,
        advantages: &advantages,
        returns: &batch.returns,
    };
    let saved = (net.clone(), adam.clone());
    let mut order: Vec<usize> = (0..n).collect();
    let mut acc = UpdateStats::default();
    let mut count = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.minibatch_size.min(n)) {
            let (loss, mut grad, stats) = loss_and_grad(net, &mb, idx, cfg)?;
            if !loss.is_finite() || !stats.grad_norm.is_finite() {
                *net = saved.0;
                *adam = saved.1;
                return Err(Error::NonFiniteLoss);
            }
            if stats.grad_norm > cfg.max_grad_norm {
                let s = cfg.max_grad_norm / stats.grad_norm;
                for g in grad.slices_mut() {
                    g.iter_mut().for_each(|v| *v *= s);
                }
            }
            adam.step(net, &grad, lr);
            acc.policy_loss += stats.policy_loss;
            acc.value_loss += stats.value_loss;
            acc.entropy += stats.entropy;
            acc.clip_fraction += stats.clip_fraction;
            acc.approx_kl += stats.approx_kl;
            acc.grad_norm += stats.grad_norm;
            count += 1.0;
        }
    }
    Ok(UpdateStats {
        policy_loss: acc.policy_loss / count,
        value_loss: acc.value_loss / count,
        entropy: acc.entropy / count,
        clip_fraction: acc.clip_fraction / count,
        approx_kl: acc.approx_kl / count,
        grad_norm: acc.grad_norm / count,
    })
}
