//! Minimal dense networks with hand-written backprop and Adam.
//!
//! Parameters live in one flat vector per network (layer weights row-major,
//! then biases), which keeps optimizer state, checkpointing and
//! finite-difference gradient checks trivial.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Fully connected network with tanh hidden layers and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub params: Vec<f64>,
}

/// Per-layer activations recorded by [`Mlp::forward_cache`].
pub struct ForwardCache {
    /// `activations[0]` is the input; `activations[l+1]` the (post-tanh for
    /// hidden, linear for output) activation of layer l.
    activations: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut params = Vec::with_capacity(Self::param_count(dims));
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-scale..scale));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Mlp {
            dims: dims.to_vec(),
            params,
        }
    }

    pub fn param_count(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        // (params offset, in, out) per layer
        let mut offset = 0;
        self.dims.windows(2).map(move |w| {
            let entry = (offset, w[0], w[1]);
            offset += w[0] * w[1] + w[1];
            entry
        })
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_cache(input).0
    }

    pub fn forward_cache(&self, input: &[f64]) -> (Vec<f64>, ForwardCache) {
        assert_eq!(input.len(), self.dims[0], "input dimension mismatch");
        let n_layers = self.dims.len() - 1;
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(input.to_vec());
        for (l, (offset, n_in, n_out)) in self.layer_offsets().enumerate() {
            let x = &activations[l];
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let mut y = vec![0.0; n_out];
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut acc = b[o];
                for (wi, xi) in row.iter().zip(x.iter()) {
                    acc += wi * xi;
                }
                *yo = if l + 1 < n_layers { acc.tanh() } else { acc };
            }
            activations.push(y);
        }
        let out = activations[n_layers].clone();
        (out, ForwardCache { activations })
    }

    /// Backpropagate `d_out` (gradient of the loss w.r.t. the output),
    /// accumulating parameter gradients into `grad` (same layout as
    /// `params`) and returning the gradient w.r.t. the input.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.params.len());
        let layers: Vec<(usize, usize, usize)> = self.layer_offsets().collect();
        let n_layers = layers.len();
        let mut delta = d_out.to_vec();
        for l in (0..n_layers).rev() {
            let (offset, n_in, n_out) = layers[l];
            let x = &cache.activations[l];
            // Hidden layers recorded post-tanh activations; fold the tanh
            // derivative into delta (output layer is linear).
            if l + 1 < n_layers {
                let a = &cache.activations[l + 1];
                for (d, ai) in delta.iter_mut().zip(a.iter()) {
                    *d *= 1.0 - ai * ai;
                }
            }
            let (w_grad, b_grad) = grad[offset..offset + n_in * n_out + n_out]
                .split_at_mut(n_in * n_out);
            let w = &self.params[offset..offset + n_in * n_out];
            let mut d_in = vec![0.0; n_in];
            for (o, d) in delta.iter().enumerate() {
                b_grad[o] += d;
                let row = &w[o * n_in..(o + 1) * n_in];
                let g_row = &mut w_grad[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    g_row[i] += d * x[i];
                    d_in[i] += d * row[i];
                }
            }
            delta = d_in;
        }
        delta
    }
}

/// Adam optimizer over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - log_z).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).iter().map(|l| l.exp()).collect()
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}
