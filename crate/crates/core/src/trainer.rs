//! Advantage actor-critic updates for the hybrid policy.
//!
//! The trainer consumes rollout segments, builds n-step bootstrapped
//! returns, regresses the critic toward them and ascends the
//! advantage-weighted joint log-probability with an entropy bonus. Both
//! gradients are computed by hand through the shared-trunk actor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::{PolicyParams, PolicyState, SampledAction};
use crate::nn::{l2_norm, log_softmax, Adam};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in {context} (norm {norm})")]
    NonFiniteGradient { context: &'static str, norm: f64 },
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Entropy bonus for the torque head.
    pub entropy_coeff: f64,
    /// Entropy bonus for the gear head; the categorical collapses much
    /// faster than the Gaussian, so it gets its own (larger) coefficient.
    pub gear_entropy_coeff: f64,
    /// n of the n-step return.
    pub n_step: usize,
    /// Clip threshold for the global gradient norm (0 disables).
    pub max_grad_norm: f64,
    /// Standardize advantages within each segment before the policy update.
    pub normalize_advantages: bool,
    /// Multiplies the entropy coefficient, for scheduling; the harness
    /// decays it linearly over training.
    pub entropy_scale: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            entropy_coeff: 1e-3,
            gear_entropy_coeff: 3e-3,
            n_step: 8,
            max_grad_norm: 10.0,
            normalize_advantages: false,
            entropy_scale: 1.0,
        }
    }
}

/// One environment step as the trainer sees it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: PolicyState,
    pub sampled: SampledAction,
    pub reward: f64,
}

/// A rollout segment plus the state it was cut off at (for bootstrapping).
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub transitions: Vec<Transition>,
    pub bootstrap_state: PolicyState,
    /// False when the segment ended the episode (no bootstrap value).
    pub bootstrap: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    pub critic_loss: f64,
    pub mean_advantage: f64,
    pub gear_entropy: f64,
    pub torque_entropy: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
}

pub struct Trainer {
    pub cfg: TrainerConfig,
    actor_opt: Adam,
    critic_opt: Adam,
    base_actor_lr: f64,
}

impl Trainer {
    pub fn new(cfg: TrainerConfig, policy: &PolicyParams) -> Self {
        Trainer {
            actor_opt: Adam::new(policy.actor_lr, policy.actor.num_params()),
            critic_opt: Adam::new(policy.critic_lr, policy.critic.num_params()),
            base_actor_lr: policy.actor_lr,
            cfg,
        }
    }

    /// Scale the actor step size (the harness anneals it over training).
    pub fn set_actor_lr_scale(&mut self, scale: f64) {
        self.actor_opt.lr = self.base_actor_lr * scale.clamp(0.0, 1.0);
    }

    /// n-step bootstrapped returns for a segment under the current critic.
    pub fn returns(&self, policy: &PolicyParams, seg: &Segment) -> Vec<f64> {
        let n = seg.transitions.len();
        let gamma = policy.discount;
        let values: Vec<f64> = seg
            .transitions
            .iter()
            .map(|t| policy.value(&t.state))
            .chain(std::iter::once(if seg.bootstrap {
                policy.value(&seg.bootstrap_state)
            } else {
                0.0
            }))
            .collect();
        let mut out = vec![0.0; n];
        for t in 0..n {
            let horizon = self.cfg.n_step.min(n - t);
            let mut acc = 0.0;
            for i in 0..horizon {
                acc += gamma.powi(i as i32) * seg.transitions[t + i].reward;
            }
            acc += gamma.powi(horizon as i32) * values[t + horizon];
            out[t] = acc;
        }
        out
    }

    /// One gradient update on a segment. Returns diagnostics; a non-finite
    /// gradient aborts without touching the parameters.
    pub fn train_step(
        &mut self,
        policy: &mut PolicyParams,
        seg: &Segment,
    ) -> Result<TrainDiagnostics, TrainError> {
        self.train_batch(policy, std::slice::from_ref(seg))
    }

    /// One gradient update over a batch of rollout segments (one per
    /// worker). Returns and advantages are computed per segment; the
    /// gradient averages over every transition in the batch.
    pub fn train_batch(
        &mut self,
        policy: &mut PolicyParams,
        segments: &[Segment],
    ) -> Result<TrainDiagnostics, TrainError> {
        let total: usize = segments.iter().map(|s| s.transitions.len()).sum();
        if total == 0 {
            return Err(TrainError::EmptyBatch);
        }
        let n = total as f64;

        // Targets and advantages are constants for the update (semi-gradient).
        let mut targets = Vec::with_capacity(total);
        let mut raw_advantages = Vec::with_capacity(total);
        for seg in segments {
            let seg_targets = self.returns(policy, seg);
            for (t, target) in seg.transitions.iter().zip(&seg_targets) {
                raw_advantages.push(target - policy.value(&t.state));
            }
            targets.extend(seg_targets);
        }
        let advantages: Vec<f64> = if self.cfg.normalize_advantages && total > 1 {
            let mean = raw_advantages.iter().sum::<f64>() / n;
            let var =
                raw_advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            let std = var.sqrt().max(1e-6);
            raw_advantages.iter().map(|a| (a - mean) / std).collect()
        } else {
            raw_advantages.clone()
        };
        let beta_torque = self.cfg.entropy_coeff * self.cfg.entropy_scale;
        let beta_gear = self.cfg.gear_entropy_coeff * self.cfg.entropy_scale;

        let mut actor_grad = vec![0.0; policy.actor.num_params()];
        let mut critic_grad = vec![0.0; policy.critic.num_params()];
        let mut diag = TrainDiagnostics::default();

        let transitions = segments.iter().flat_map(|s| s.transitions.iter());
        for ((t, target), (raw_adv, advantage)) in transitions
            .zip(targets.iter())
            .zip(raw_advantages.iter().zip(advantages.iter()))
        {
            let (v, critic_cache) = policy.critic.forward_cache(&t.state.features);
            diag.mean_advantage += raw_adv / n;
            diag.critic_loss += 0.5 * (v[0] - target) * (v[0] - target) / n;
            policy
                .critic
                .backward(&critic_cache, &[(v[0] - target) / n], &mut critic_grad);

            let (out, actor_cache) = policy.actor.forward_cache(&t.state.features);
            let d_out = actor_head_gradient(
                &out,
                &t.sampled,
                *advantage,
                beta_torque,
                beta_gear,
                &mut diag,
                n,
            );
            policy.actor.backward(&actor_cache, &d_out, &mut actor_grad);
        }

        clip_grad(&mut actor_grad, self.cfg.max_grad_norm);
        clip_grad(&mut critic_grad, self.cfg.max_grad_norm);
        diag.actor_grad_norm = l2_norm(&actor_grad);
        diag.critic_grad_norm = l2_norm(&critic_grad);
        if !diag.actor_grad_norm.is_finite() {
            return Err(TrainError::NonFiniteGradient {
                context: "actor",
                norm: diag.actor_grad_norm,
            });
        }
        if !diag.critic_grad_norm.is_finite() {
            return Err(TrainError::NonFiniteGradient {
                context: "critic",
                norm: diag.critic_grad_norm,
            });
        }

        self.actor_opt.step(&mut policy.actor.params, &actor_grad);
        self.critic_opt.step(&mut policy.critic.params, &critic_grad);
        Ok(diag)
    }
}

/// Gradient of the per-transition actor loss
/// `-(advantage) log pi(a|s) - beta (H_gear + H_torque)` with respect to the
/// five actor outputs [logits x3, mu, log-std raw].
#[allow(clippy::too_many_arguments)]
fn actor_head_gradient(
    out: &[f64],
    sampled: &SampledAction,
    advantage: f64,
    entropy_coeff: f64,
    gear_entropy_coeff: f64,
    diag: &mut TrainDiagnostics,
    n: f64,
) -> Vec<f64> {
    let log_p = log_softmax(&out[..3]);
    let p: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
    let gear_entropy: f64 = -p.iter().zip(&log_p).map(|(pi, li)| pi * li).sum::<f64>();

    let (sigma, dsigma_draw) = sigma_and_derivative(out[4]);
    let mu = out[3];
    let torque_entropy = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()
        + sigma.ln();
    diag.gear_entropy += gear_entropy / n;
    diag.torque_entropy += torque_entropy / n;

    let mut d = vec![0.0; 5];
    // Categorical: d(log p_k)/d l_j = 1{j=k} - p_j;
    // dH/d l_j = -p_j (log p_j + H).
    for j in 0..3 {
        let dlogp = if j == sampled.gear_choice { 1.0 } else { 0.0 } - p[j];
        let dh = -p[j] * (log_p[j] + gear_entropy);
        d[j] = (-advantage * dlogp - gear_entropy_coeff * dh) / n;
    }
    // Gaussian likelihood of the recorded pre-squash draw u:
    // d logN / d mu = z / sigma, d logN / d ln(sigma) = z^2 - 1, and ln(sigma)
    // responds to the raw head through the soft clamp.
    let z = (sampled.u_torque - mu) / sigma;
    let dlogp_dmu = z / sigma;
    let dlogp_dlnsigma = z * z - 1.0;
    let dh_dlnsigma = 1.0;
    d[3] = -advantage * dlogp_dmu / n;
    d[4] = (-advantage * dlogp_dlnsigma - entropy_coeff * dh_dlnsigma) * dsigma_draw / n;
    d
}

/// (sigma, d ln(sigma) / d raw) of the soft-clamped log-std head.
fn sigma_and_derivative(raw: f64) -> (f64, f64) {
    const LOG_STD_MIN: f64 = -6.0;
    const LOG_STD_MAX: f64 = 1.0;
    let mid = (LOG_STD_MIN + LOG_STD_MAX) / 2.0;
    let half = (LOG_STD_MAX - LOG_STD_MIN) / 2.0;
    let tanh = raw.tanh();
    ((mid + half * tanh).exp(), half * (1.0 - tanh * tanh))
}

fn clip_grad(grad: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = l2_norm(grad);
    if norm > max_norm {
        let scale = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
}

/// The exact scalar loss whose gradient `train_step` follows, for
/// finite-difference verification: advantages and targets are supplied as
/// constants.
pub fn actor_critic_loss(
    policy: &PolicyParams,
    transitions: &[Transition],
    targets: &[f64],
    advantages: &[f64],
    entropy_coeff: f64,
    gear_entropy_coeff: f64,
) -> f64 {
    let n = transitions.len() as f64;
    let mut loss = 0.0;
    for ((t, target), adv) in transitions.iter().zip(targets).zip(advantages) {
        let v = policy.value(&t.state);
        loss += 0.5 * (v - target) * (v - target) / n;

        let out = policy.actor.forward(&t.state.features);
        let log_p = log_softmax(&out[..3]);
        let p: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
        let gear_entropy: f64 = -p.iter().zip(&log_p).map(|(pi, li)| pi * li).sum::<f64>();
        let (sigma, _) = sigma_and_derivative(out[4]);
        let z = (t.sampled.u_torque - out[3]) / sigma;
        let gauss = -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        // The squash-Jacobian part of log pi depends only on the recorded
        // draw, not on the parameters, so it is omitted here.
        let log_pi = log_p[t.sampled.gear_choice] + gauss;
        let torque_entropy =
            0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + sigma.ln();
        loss +=
            (-adv * log_pi - gear_entropy_coeff * gear_entropy - entropy_coeff * torque_entropy)
                / n;
    }
    loss
}
