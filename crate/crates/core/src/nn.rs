//! Gaussian policy/value network with hand-written backpropagation and Adam.
//!
//! A tanh MLP trunk feeds a tanh-squashed action-mean head and a linear
//! value head. The action log-std is a free parameter vector.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `(out, in)`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((output, input)),
            b: Array1::zeros(output),
        }
    }

    /// Weights drawn from N(0, gain²/fan_in), zero biases.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain / (input as f64).sqrt();
        let w = Array2::from_shape_simple_fn((output, input), || {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        Self {
            w,
            b: Array1::zeros(output),
        }
    }

    fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }
}

/// Network parameters. The same type holds gradients and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    pub trunk: Vec<Dense>,
    pub mean_head: Dense,
    pub value_head: Dense,
    pub log_std: Array1<f64>,
}

/// Per-sample outputs for a batch.
#[derive(Clone, Debug)]
pub struct PolicyOutput {
    /// `(batch, action_dim)`, each entry in (−1, 1).
    pub mean: Array2<f64>,
    pub value: Array1<f64>,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input: Array2<f64>,
    hidden: Vec<Array2<f64>>,
    pub out: PolicyOutput,
}

impl PolicyNet {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: &[usize],
        action_dim: usize,
        init_log_std: f64,
        rng: &mut R,
    ) -> Self {
        let mut trunk = Vec::with_capacity(hidden.len());
        let mut prev = obs_dim;
        for &h in hidden {
            trunk.push(Dense::init(prev, h, 1.0, rng));
            prev = h;
        }
        Self {
            trunk,
            mean_head: Dense::init(prev, action_dim, 0.01, rng),
            value_head: Dense::init(prev, 1, 1.0, rng),
            log_std: Array1::from_elem(action_dim, init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            trunk: self
                .trunk
                .iter()
                .map(|d| Dense::zeros(d.input_dim(), d.output_dim()))
                .collect(),
            mean_head: Dense::zeros(self.mean_head.input_dim(), self.mean_head.output_dim()),
            value_head: Dense::zeros(self.value_head.input_dim(), 1),
            log_std: Array1::zeros(self.log_std.len()),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.trunk.first().unwrap_or(&self.mean_head).input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    /// Named parameter tensors with their shapes, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (i, d) in self.trunk.iter().enumerate() {
            out.push((
                format!("trunk{i}.w"),
                d.w.shape().to_vec(),
                d.w.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("trunk{i}.b"),
                d.b.shape().to_vec(),
                d.b.as_slice().expect("standard layout"),
            ));
        }
        for (name, d) in [("mean", &self.mean_head), ("value", &self.value_head)] {
            out.push((
                format!("{name}.w"),
                d.w.shape().to_vec(),
                d.w.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("{name}.b"),
                d.b.shape().to_vec(),
                d.b.as_slice().expect("standard layout"),
            ));
        }
        out.push((
            "log_std".into(),
            vec![self.log_std.len()],
            self.log_std.as_slice().expect("standard layout"),
        ));
        out
    }

    /// Mutable views of every parameter tensor, same order as [`tensors`](Self::tensors).
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for d in self.trunk.iter_mut() {
            out.push(d.w.as_slice_mut().expect("standard layout"));
            out.push(d.b.as_slice_mut().expect("standard layout"));
        }
        for d in [&mut self.mean_head, &mut self.value_head] {
            out.push(d.w.as_slice_mut().expect("standard layout"));
            out.push(d.b.as_slice_mut().expect("standard layout"));
        }
        out.push(self.log_std.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.2.iter().all(|v| v.is_finite()))
    }

    /// Log-std actually used by the policy.
    pub fn clamped_log_std(&self) -> Array1<f64> {
        self.log_std.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        if x.ncols() != self.obs_dim() {
            return Err(Error::Shape {
                expected: self.obs_dim(),
                got: x.ncols(),
            });
        }
        let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(self.trunk.len());
        for (i, layer) in self.trunk.iter().enumerate() {
            let inp = if i == 0 { x.view() } else { hidden[i - 1].view() };
            let mut z: Array2<f64> = layer.forward(&inp);
            z.mapv_inplace(f64::tanh);
            hidden.push(z);
        }
        let last = hidden.last().map(|h| h.view()).unwrap_or(x.view());
        let mut mean = self.mean_head.forward(&last);
        mean.mapv_inplace(f64::tanh);
        let value = self.value_head.forward(&last).index_axis_move(Axis(1), 0);
        Ok(ForwardCache {
            input: x.to_owned(),
            hidden,
            out: PolicyOutput { mean, value },
        })
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<PolicyOutput> {
        Ok(self.forward_cached(x)?.out)
    }

    /// Single-observation forward pass: `(mean, log_std, value)`.
    pub fn policy_forward(&self, obs: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let x = ArrayView2::from_shape((1, obs.len()), obs).expect("row vector");
        let out = self.forward(x)?;
        Ok((out.mean.row(0).to_vec(), self.clamped_log_std().to_vec(), out.value[0]))
    }

    /// Gradients of a scalar loss given its derivatives with respect to the
    /// squashed means, the values and the (clamped) log-std.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_mean: &Array2<f64>,
        d_value: &Array1<f64>,
        d_log_std: &Array1<f64>,
    ) -> PolicyNet {
        let mut g = self.zeros_like();
        let last = cache.hidden.last().unwrap_or(&cache.input);

        // through tanh of the mean head
        let d_mean_pre = d_mean * &cache.out.mean.mapv(|m| 1.0 - m * m);
        g.mean_head.w = standard(d_mean_pre.t().dot(last));
        g.mean_head.b = d_mean_pre.sum_axis(Axis(0));
        let d_v = d_value.view().insert_axis(Axis(1));
        g.value_head.w = standard(d_v.t().dot(last));
        g.value_head.b = d_v.sum_axis(Axis(0));

        let mut d_h = d_mean_pre.dot(&self.mean_head.w) + d_v.dot(&self.value_head.w);
        for i in (0..self.trunk.len()).rev() {
            let h = &cache.hidden[i];
            let d_z = d_h * &h.mapv(|a| 1.0 - a * a);
            let inp = if i == 0 { &cache.input } else { &cache.hidden[i - 1] };
            g.trunk[i].w = standard(d_z.t().dot(inp));
            g.trunk[i].b = d_z.sum_axis(Axis(0));
            if i > 0 {
                d_h = d_z.dot(&self.trunk[i].w);
            } else {
                break;
            }
        }
        g.log_std = self.masked_log_std_grad(d_log_std);
        g
    }

    /// Passes `d` through the log-std clamp, which blocks gradients outside
    /// its range.
    pub fn masked_log_std_grad(&self, d: &Array1<f64>) -> Array1<f64> {
        ndarray::Zip::from(d).and(&self.log_std).map_collect(|&d, &p| {
            if (LOG_STD_MIN..=LOG_STD_MAX).contains(&p) {
                d
            } else {
                0.0
            }
        })
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, other: &PolicyNet, alpha: f64) {
        for (a, b) in self.slices_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b.2) {
                *x += alpha * y;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.2.iter()).map(|v| v * v).sum()
    }
}

fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Entropy of the diagonal Gaussian head.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    let n = log_std.len() as f64;
    log_std.iter().sum::<f64>() + 0.5 * n * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()
}

/// Log density of `x` under N(mean, exp(log_std)²) with independent dimensions.
pub fn gaussian_log_prob(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    x.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((&x, &m), &ls)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * ln_2pi
        })
        .sum()
}

/// A sampled action: the raw Gaussian draw, its clamped version sent to the
/// environment, and the log-probability of the raw draw.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledAction {
    pub raw: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob: f64,
}

pub fn sample_action<R: Rng + ?Sized>(mean: &[f64], log_std: &[f64], rng: &mut R) -> SampledAction {
    let raw: Vec<f64> = mean
        .iter()
        .zip(log_std)
        .map(|(&m, &ls)| {
            let z: f64 = StandardNormal.sample(rng);
            m + ls.exp() * z
        })
        .collect();
    let log_prob = gaussian_log_prob(&raw, mean, log_std);
    let action = raw.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
    SampledAction { raw, action, log_prob }
}

/// Adam optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: PolicyNet,
    pub v: PolicyNet,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: &PolicyNet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut PolicyNet, grads: &PolicyNet, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let ps = params.slices_mut();
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for (((p, m), v), g) in ps.into_iter().zip(ms).zip(vs).zip(grads.tensors()) {
            for i in 0..p.len() {
                let gi = g.2[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = PolicyNet::new(184, &[256, 256, 256], 6, 0.0, &mut rng).zeros_like();
        let (mean, log_std, value) = net.policy_forward(&[0.3; 184]).unwrap();
        assert_eq!(mean, vec![0.0; 6]);
        assert_eq!(log_std, vec![0.0; 6]);
        assert_eq!(value, 0.0);
    }

    #[test]
    fn single_unit_matches_hand_computation() {
        let net = PolicyNet {
            trunk: vec![Dense {
                w: array![[0.5, -1.0]],
                b: array![0.1],
            }],
            mean_head: Dense {
                w: array![[2.0]],
                b: array![-0.3],
            },
            value_head: Dense {
                w: array![[-1.5]],
                b: array![0.7],
            },
            log_std: array![0.0],
        };
        let (mean, _, value) = net.policy_forward(&[0.4, 0.2]).unwrap();
        let h = (0.5f64 * 0.4 - 0.2 + 0.1).tanh();
        assert_abs_diff_eq!(mean[0], (2.0 * h - 0.3).tanh(), epsilon = 1e-15);
        assert_abs_diff_eq!(value, -1.5 * h + 0.7, epsilon = 1e-15);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = PolicyNet::new(4, &[8], 2, 0.0, &mut rng);
        assert!(matches!(
            net.policy_forward(&[0.0; 3]),
            Err(Error::Shape { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn mode_log_prob() {
        let ls = [0.1, -0.2, 0.3, 0.0, -1.0, 0.5];
        let m = [0.2; 6];
        let lp = gaussian_log_prob(&m, &m, &ls);
        let expected = -ls.iter().sum::<f64>() - 3.0 * (2.0 * std::f64::consts::PI).ln();
        assert_abs_diff_eq!(lp, expected, epsilon = 1e-12);
    }

    #[test]
    fn tiny_std_returns_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = sample_action(&[0.3, -0.9], &[-60.0, -60.0], &mut rng);
        assert_abs_diff_eq!(a.action[0], 0.3, epsilon = 1e-20);
        assert_abs_diff_eq!(a.action[1], -0.9, epsilon = 1e-20);
    }

    #[test]
    fn entropy_closed_form() {
        let ls = [0.1, -0.2, 0.3, 0.0, -1.0, 0.5];
        let e = gaussian_entropy(&ls);
        let expected = ls.iter().sum::<f64>() + 3.0 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert_eq!(e, expected);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = PolicyNet::new(2, &[3], 1, 0.0, &mut rng);
        let before = p.clone();
        let mut g = p.zeros_like();
        g.log_std[0] = 4.0;
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &g, 0.01);
        assert_abs_diff_eq!(p.log_std[0], before.log_std[0] - 0.01, epsilon = 1e-9);
        assert_eq!(p.trunk, before.trunk);
    }
}
