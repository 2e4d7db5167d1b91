//! Gaussian actor-critic, GAE, and the clipped-surrogate PPO update.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::mlp::Mlp;
use crate::env::{ACT_DIM, OBS_DIM};

pub const ACTOR_SIZES: [usize; 5] = [OBS_DIM, 128, 128, 64, ACT_DIM];
pub const CRITIC_SIZES: [usize; 5] = [OBS_DIM, 128, 128, 64, 1];

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PpoError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite loss at epoch {epoch}, minibatch {minibatch}")]
    NonFiniteLoss { epoch: usize, minibatch: usize },
}

/// Separate actor and critic networks plus a state-independent log-std.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub actor: Mlp,
    pub log_std: DVector<f64>,
    pub critic: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub value: f64,
}

impl MlpParams {
    pub fn zeros(actor_sizes: &[usize], critic_sizes: &[usize]) -> Self {
        let actor = Mlp::zeros(actor_sizes);
        let act = actor.output_dim();
        Self {
            actor,
            log_std: DVector::zeros(act),
            critic: Mlp::zeros(critic_sizes),
        }
    }

    /// Orthogonal init: gain sqrt(2) on hidden layers, 0.01 on the action
    /// head, 1 on the value head; log-std starts at 0.
    pub fn init<R: Rng>(actor_sizes: &[usize], critic_sizes: &[usize], rng: &mut R) -> Self {
        let g = std::f64::consts::SQRT_2;
        let actor = Mlp::orthogonal(actor_sizes, g, 0.01, rng);
        let critic = Mlp::orthogonal(critic_sizes, g, 1.0, rng);
        Self {
            log_std: DVector::zeros(actor.output_dim()),
            actor,
            critic,
        }
    }

    pub fn standard<R: Rng>(rng: &mut R) -> Self {
        Self::init(&ACTOR_SIZES, &CRITIC_SIZES, rng)
    }

    pub fn is_standard(&self) -> bool {
        self.actor.sizes() == ACTOR_SIZES && self.critic.sizes() == CRITIC_SIZES
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.actor.output_dim()
    }

    pub fn forward(&self, obs: &[f64]) -> Result<PolicyOutput, PpoError> {
        if obs.len() != self.obs_dim() {
            return Err(PpoError::ShapeMismatch {
                expected: self.obs_dim(),
                got: obs.len(),
            });
        }
        let x = DMatrix::from_column_slice(obs.len(), 1, obs);
        let mean = self.actor.forward(&x);
        let value = self.critic.forward(&x)[(0, 0)];
        Ok(PolicyOutput {
            mean: mean.as_slice().to_vec(),
            log_std: self.log_std.as_slice().to_vec(),
            value,
        })
    }

    /// Means (`act x B`) and values for a feature-major batch.
    pub fn forward_batch(&self, obs: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
        let mean = self.actor.forward(obs);
        let value = self.critic.forward(obs);
        (mean, value.as_slice().to_vec())
    }

    pub fn values(&self, obs: &DMatrix<f64>) -> Vec<f64> {
        self.critic.forward(obs).as_slice().to_vec()
    }

    /// Differential entropy of the diagonal Gaussian head.
    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|s| s + 0.5 * (LN_2PI + 1.0)).sum()
    }

    pub fn n_params(&self) -> usize {
        self.actor.n_params() + self.log_std.len() + self.critic.n_params()
    }

    /// Actor, then log-std, then critic.
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        self.actor.write_flat(out);
        out.extend_from_slice(self.log_std.as_slice());
        self.critic.write_flat(out);
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        self.write_flat(&mut v);
        v
    }

    pub fn read_flat(&mut self, src: &[f64]) -> usize {
        let mut at = self.actor.read_flat(src);
        let k = self.log_std.len();
        self.log_std.as_mut_slice().copy_from_slice(&src[at..at + k]);
        at += k;
        at + self.critic.read_flat(&src[at..])
    }

    /// Draws `mean + exp(log_std) * z`.
    pub fn sample_action<R: Rng>(&self, mean: &[f64], rng: &mut R) -> Vec<f64> {
        mean.iter()
            .zip(self.log_std.iter())
            .map(|(m, s)| m + s.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn log_prob(&self, mean: &[f64], action: &[f64]) -> f64 {
        gaussian_log_prob(mean, self.log_std.as_slice(), action)
    }
}

pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    let mut lp = 0.0;
    for i in 0..mean.len() {
        let z = (action[i] - mean[i]) * (-log_std[i]).exp();
        lp += -0.5 * z * z - log_std[i] - 0.5 * LN_2PI;
    }
    lp
}

/// Cosine decay from `lr_init` at step 0 to `lr_final` at `total`.
pub fn lr_schedule(step: u64, total: u64, lr_init: f64, lr_final: f64) -> f64 {
    if step == 0 || total == 0 {
        return lr_init;
    }
    if step >= total {
        return lr_final;
    }
    let frac = step as f64 / total as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Recursive GAE over one contiguous segment. `dones[t]` marks that the
/// episode ended after step `t`; `last_value` bootstraps past the segment end.
/// Returns `(advantages, returns)` with `returns = advantages + values`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut gae = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { last_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        gae = delta + gamma * lambda * live * gae;
        adv[t] = gae;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shifts and scales to zero mean and unit population std.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    adv.iter().map(|a| (a - mean) / std).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub batch: usize,
    pub epochs_per_rollout: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub n_envs: usize,
    pub total_steps: u64,
    pub lr_init: f64,
    pub lr_final: f64,
    /// Starting value of every log-std entry.
    pub init_log_std: f64,
    pub rollout_length: usize,
    pub adam_eps: f64,
    pub obs_clip: f64,
    /// Scale rewards by a running std of the discounted return.
    pub normalize_reward: bool,
    /// Checkpoint every this many updates (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            batch: 1024,
            epochs_per_rollout: 10,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            n_envs: 30,
            total_steps: 20_000_000,
            lr_init: 6e-4,
            lr_final: 2e-4,
            init_log_std: 0.0,
            rollout_length: 512,
            adam_eps: 1e-5,
            obs_clip: 10.0,
            normalize_reward: true,
            checkpoint_every: 50,
        }
    }
}

impl PpoConfig {
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut v = Vec::new();
        let mut bad = |k: &str, m: &str| v.push((k.to_string(), m.to_string()));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.gamma) {
            bad("gamma", "must be in [0, 1]");
        }
        if !unit(self.gae_lambda) {
            bad("gae_lambda", "must be in [0, 1]");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            bad("clip", "must be in (0, 1)");
        }
        if self.batch == 0 {
            bad("batch", "must be positive");
        }
        if self.epochs_per_rollout == 0 {
            bad("epochs_per_rollout", "must be positive");
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            bad("entropy_coef", "must be finite and >= 0");
        }
        if !(self.value_coef > 0.0 && self.value_coef.is_finite()) {
            bad("value_coef", "must be finite and > 0");
        }
        if !(self.max_grad_norm > 0.0) {
            bad("max_grad_norm", "must be > 0");
        }
        if self.n_envs == 0 {
            bad("n_envs", "must be positive");
        }
        if self.total_steps == 0 {
            bad("total_steps", "must be positive");
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            bad("lr_init", "must be finite and > 0");
        }
        if !(self.lr_final > 0.0 && self.lr_final.is_finite()) {
            bad("lr_final", "must be finite and > 0");
        }
        if !self.init_log_std.is_finite() {
            bad("init_log_std", "must be finite");
        }
        if self.rollout_length == 0 {
            bad("rollout_length", "must be positive");
        }
        if !(self.adam_eps > 0.0) {
            bad("adam_eps", "must be > 0");
        }
        if !(self.obs_clip > 0.0) {
            bad("obs_clip", "must be > 0");
        }
        v
    }

    pub fn samples_per_rollout(&self) -> usize {
        self.n_envs * self.rollout_length
    }
}

/// One env's contiguous slice of a rollout.
#[derive(Debug, Clone, Default)]
pub struct EnvRollout {
    /// Normalized observations as fed to the networks.
    pub obs: Vec<Vec<f64>>,
    /// Pre-clip sampled actions.
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub last_value: f64,
    pub advantages: Option<Vec<f64>>,
    pub returns: Option<Vec<f64>>,
}

impl EnvRollout {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn push(&mut self, obs: Vec<f64>, action: Vec<f64>, log_prob: f64, value: f64, reward: f64, done: bool) {
        self.obs.push(obs);
        self.actions.push(action);
        self.log_probs.push(log_prob);
        self.values.push(value);
        self.rewards.push(reward);
        self.dones.push(done);
        self.advantages = None;
        self.returns = None;
    }

    fn consistent(&self) -> bool {
        let n = self.obs.len();
        self.actions.len() == n
            && self.log_probs.len() == n
            && self.values.len() == n
            && self.rewards.len() == n
            && self.dones.len() == n
    }
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub envs: Vec<EnvRollout>,
}

impl RolloutBuffer {
    pub fn new(n_envs: usize) -> Self {
        Self {
            envs: vec![EnvRollout::default(); n_envs],
        }
    }

    pub fn len(&self) -> usize {
        self.envs.iter().map(EnvRollout::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consistent(&self) -> bool {
        self.envs.iter().all(EnvRollout::consistent)
    }

    pub fn compute_gae(&mut self, gamma: f64, lambda: f64) {
        for e in &mut self.envs {
            let (a, r) = compute_gae(&e.rewards, &e.values, &e.dones, e.last_value, gamma, lambda);
            e.advantages = Some(a);
            e.returns = Some(r);
        }
    }

    pub fn has_advantages(&self) -> bool {
        self.envs.iter().all(|e| e.advantages.is_some() && e.returns.is_some())
    }

    /// Flat views in env-major order.
    fn flatten(&self) -> Flat {
        let n = self.len();
        let obs_dim = self.envs.iter().find_map(|e| e.obs.first()).map_or(0, Vec::len);
        let act_dim = self.envs.iter().find_map(|e| e.actions.first()).map_or(0, Vec::len);
        let mut f = Flat {
            obs: Vec::with_capacity(n * obs_dim),
            actions: Vec::with_capacity(n * act_dim),
            log_probs: Vec::with_capacity(n),
            advantages: Vec::with_capacity(n),
            returns: Vec::with_capacity(n),
            obs_dim,
            act_dim,
        };
        for e in &self.envs {
            for o in &e.obs {
                f.obs.extend_from_slice(o);
            }
            for a in &e.actions {
                f.actions.extend_from_slice(a);
            }
            f.log_probs.extend_from_slice(&e.log_probs);
            f.advantages.extend(e.advantages.as_ref().expect("gae computed"));
            f.returns.extend(e.returns.as_ref().expect("gae computed"));
        }
        f
    }
}

struct Flat {
    obs: Vec<f64>,
    actions: Vec<f64>,
    log_probs: Vec<f64>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
    obs_dim: usize,
    act_dim: usize,
}

/// Samples for one gradient step, feature-major.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub obs: DMatrix<f64>,
    pub actions: DMatrix<f64>,
    pub old_log_probs: Vec<f64>,
    /// Raw advantages; normalized inside the loss.
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Minibatch {
    fn gather(flat: &Flat, idx: &[usize]) -> Self {
        let (od, ad) = (flat.obs_dim, flat.act_dim);
        let mut obs = DMatrix::zeros(od, idx.len());
        let mut actions = DMatrix::zeros(ad, idx.len());
        for (j, &i) in idx.iter().enumerate() {
            obs.column_mut(j).copy_from_slice(&flat.obs[i * od..(i + 1) * od]);
            actions.column_mut(j).copy_from_slice(&flat.actions[i * ad..(i + 1) * ad]);
        }
        Self {
            obs,
            actions,
            old_log_probs: idx.iter().map(|&i| flat.log_probs[i]).collect(),
            advantages: idx.iter().map(|&i| flat.advantages[i]).collect(),
            returns: idx.iter().map(|&i| flat.returns[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCoefs {
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
}

impl From<&PpoConfig> for LossCoefs {
    fn from(c: &PpoConfig) -> Self {
        Self {
            clip: c.clip,
            entropy_coef: c.entropy_coef,
            value_coef: c.value_coef,
        }
    }
}

/// Total loss `L = -mean(min(r A, clip(r) A)) + c_v mean((V - R)^2) - c_e H`
/// and its gradient with respect to every parameter.
pub fn loss_and_grad(params: &MlpParams, mb: &Minibatch, coefs: &LossCoefs) -> (LossReport, MlpParams) {
    let b = mb.len();
    let bf = b as f64;
    let adv = normalize_advantages(&mb.advantages);
    let (mean, actor_cache) = params.actor.forward_cached(&mb.obs);
    let (value, critic_cache) = params.critic.forward_cached(&mb.obs);
    let log_std = params.log_std.as_slice();
    let inv_var: Vec<f64> = log_std.iter().map(|s| (-2.0 * s).exp()).collect();
    let act = params.act_dim();

    let mut d_mean = DMatrix::zeros(act, b);
    let mut d_log_std = DVector::zeros(act);
    let mut report = LossReport::default();
    for j in 0..b {
        let mu = mean.column(j);
        let a = mb.actions.column(j);
        let logp = gaussian_log_prob(mu.as_slice(), log_std, a.as_slice());
        let log_ratio = logp - mb.old_log_probs[j];
        let ratio = log_ratio.exp();
        let clipped = ratio.clamp(1.0 - coefs.clip, 1.0 + coefs.clip);
        let s1 = ratio * adv[j];
        let s2 = clipped * adv[j];
        report.policy -= s1.min(s2) / bf;
        if (ratio - 1.0).abs() > coefs.clip {
            report.clip_fraction += 1.0 / bf;
        }
        report.approx_kl += ((ratio - 1.0) - log_ratio) / bf;
        // d(-min(s1, s2))/d logp; zero when the clipped branch is binding
        let g = if s1 <= s2 { -ratio * adv[j] / bf } else { 0.0 };
        if g != 0.0 {
            for d in 0..act {
                let diff = a[d] - mu[d];
                d_mean[(d, j)] = g * diff * inv_var[d];
                d_log_std[d] += g * (diff * diff * inv_var[d] - 1.0);
            }
        }
    }

    let mut d_value = DMatrix::zeros(1, b);
    for j in 0..b {
        let e = value[(0, j)] - mb.returns[j];
        report.value += e * e / bf;
        d_value[(0, j)] = coefs.value_coef * 2.0 * e / bf;
    }
    report.entropy = params.entropy();
    for d in 0..act {
        d_log_std[d] -= coefs.entropy_coef;
    }
    report.total = report.policy + coefs.value_coef * report.value - coefs.entropy_coef * report.entropy;

    let grads = MlpParams {
        actor: params.actor.backward(&actor_cache, &d_mean),
        log_std: d_log_std,
        critic: params.critic.backward(&critic_cache, &d_value),
    };
    (report, grads)
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize, eps: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Scales `grad` in place so its L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Runs `epochs_per_rollout` passes of shuffled minibatch updates; returns
/// losses averaged over all minibatches.
pub fn ppo_update<R: Rng>(
    params: &mut MlpParams,
    adam: &mut Adam,
    buffer: &RolloutBuffer,
    config: &PpoConfig,
    lr: f64,
    rng: &mut R,
) -> Result<LossReport, PpoError> {
    assert!(buffer.has_advantages(), "compute_gae must run before ppo_update");
    let flat = buffer.flatten();
    let n = flat.log_probs.len();
    let coefs = LossCoefs::from(config);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut sum = LossReport::default();
    let mut count = 0usize;
    let mut theta = params.to_flat();
    let mut grad = Vec::with_capacity(theta.len());
    for epoch in 0..config.epochs_per_rollout {
        idx.shuffle(rng);
        for (k, chunk) in idx.chunks(config.batch).enumerate() {
            let mb = Minibatch::gather(&flat, chunk);
            let (rep, g) = loss_and_grad(params, &mb, &coefs);
            if !rep.total.is_finite() {
                return Err(PpoError::NonFiniteLoss { epoch, minibatch: k });
            }
            grad.clear();
            g.write_flat(&mut grad);
            clip_grad_norm(&mut grad, config.max_grad_norm);
            adam.step(&mut theta, &grad, lr);
            params.read_flat(&theta);
            sum.policy += rep.policy;
            sum.value += rep.value;
            sum.entropy += rep.entropy;
            sum.clip_fraction += rep.clip_fraction;
            sum.approx_kl += rep.approx_kl;
            sum.total += rep.total;
            count += 1;
        }
    }
    let c = count.max(1) as f64;
    Ok(LossReport {
        policy: sum.policy / c,
        value: sum.value / c,
        entropy: sum.entropy / c,
        clip_fraction: sum.clip_fraction / c,
        approx_kl: sum.approx_kl / c,
        total: sum.total / c,
    })
}
