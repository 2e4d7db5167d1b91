//! Rollout collection across parallel envs and the PPO training loop.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{Checkpoint, CheckpointError, TrainProgress};
use super::norm::RunningNorm;
use super::ppo::{lr_schedule, ppo_update, Adam, LossReport, MlpParams, PpoConfig, PpoError, RolloutBuffer};
use crate::dataset::{Dataset, DatasetError};
use crate::env::{Action, CurriculumState, Env, EnvConfig, EnvError, Observation, OBS_DIM};
use crate::rod::{RodParams, SurfaceModel};
use crate::seeds::{rng_for, seed_for, Stream};

const REWARD_CLIP: f64 = 10.0;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub ppo: PpoConfig,
    pub env: EnvConfig,
    pub rod: RodParams,
    pub seed: u64,
    pub start_level: usize,
}

impl TrainConfig {
    pub fn new(rod: RodParams, seed: u64) -> Self {
        Self {
            ppo: PpoConfig::default(),
            env: EnvConfig::default(),
            rod,
            seed,
            start_level: 0,
        }
    }
}

/// One row of the per-update metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub update: u64,
    pub steps: u64,
    pub lr: f64,
    pub mean_step_reward: f64,
    pub episodes: usize,
    pub successes: usize,
    pub mean_episode_reward: Option<f64>,
    pub mean_final_e_mean: Option<f64>,
    pub level: usize,
    pub success_rate: f64,
    pub physics_failures: usize,
    pub losses: LossReport,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl MetricsRow {
    pub const HEADER: &'static str = "update,steps,lr,mean_step_reward,episodes,successes,mean_episode_reward,mean_final_e_mean,level,success_rate,physics_failures,policy_loss,value_loss,entropy,clip_fraction,approx_kl";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.update,
            self.steps,
            self.lr,
            self.mean_step_reward,
            self.episodes,
            self.successes,
            opt(self.mean_episode_reward),
            opt(self.mean_final_e_mean),
            self.level,
            self.success_rate,
            self.physics_failures,
            self.losses.policy,
            self.losses.value,
            self.losses.entropy,
            self.losses.clip_fraction,
            self.losses.approx_kl,
        )
    }
}

#[derive(Debug, Default)]
struct RolloutStats {
    reward_sum: f64,
    samples: usize,
    episode_rewards: Vec<f64>,
    final_errors: Vec<f64>,
    successes: usize,
    physics_failures: usize,
}

/// Training state: envs, networks, optimizer, normalizers and curriculum.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    dataset: &'a Dataset,
    envs: Vec<Env>,
    reset_rngs: Vec<ChaCha8Rng>,
    action_rngs: Vec<ChaCha8Rng>,
    last_obs: Vec<Observation>,
    episode_return: Vec<f64>,
    discounted: Vec<f64>,
    pub params: MlpParams,
    adam: Adam,
    pub obs_norm: RunningNorm,
    reward_norm: RunningNorm,
    pub curriculum: CurriculumState,
    pub progress: TrainProgress,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, dataset: &'a Dataset, resume: Option<Checkpoint>) -> Result<Self, TrainError> {
        let mut bad: Vec<String> = cfg
            .ppo
            .violations()
            .into_iter()
            .map(|(k, m)| format!("ppo.{k}: {m}"))
            .collect();
        bad.extend(cfg.env.violations().into_iter().map(|(k, m)| format!("env.{k}: {m}")));
        if let Err(e) = cfg.rod.validate() {
            bad.push(format!("rod: {e}"));
        }
        if !bad.is_empty() {
            return Err(TrainError::InvalidConfig(bad.join("; ")));
        }
        if dataset.is_empty() {
            return Err(DatasetError::EmptyDataset.into());
        }

        let n = cfg.ppo.n_envs;
        let (params, obs_norm, reward_norm, adam, progress) = match resume {
            Some(ck) => {
                let np = ck.params.n_params();
                let mut adam = ck.optimizer.unwrap_or_else(|| Adam::new(np, cfg.ppo.adam_eps));
                adam.eps = cfg.ppo.adam_eps;
                (
                    ck.params,
                    ck.obs_norm,
                    ck.reward_norm.unwrap_or_else(|| RunningNorm::new(1, f64::INFINITY)),
                    adam,
                    ck.progress,
                )
            }
            None => {
                let mut rng = rng_for(cfg.seed, Stream::Init, 0);
                let mut params = MlpParams::standard(&mut rng);
                params.log_std.fill(cfg.ppo.init_log_std);
                let np = params.n_params();
                (
                    params,
                    RunningNorm::new(OBS_DIM, cfg.ppo.obs_clip),
                    RunningNorm::new(1, f64::INFINITY),
                    Adam::new(np, cfg.ppo.adam_eps),
                    TrainProgress {
                        level: cfg.start_level,
                        ..TrainProgress::default()
                    },
                )
            }
        };
        if !params.is_standard() {
            return Err(TrainError::InvalidConfig("checkpoint has non-standard layer sizes".into()));
        }

        // a resumed run draws fresh per-env streams, offset by the update count
        let offset = progress.update * n as u64;
        let mut envs = Vec::with_capacity(n);
        let mut reset_rngs = Vec::with_capacity(n);
        let mut action_rngs = Vec::with_capacity(n);
        for i in 0..n as u64 {
            envs.push(Env::new(cfg.env.clone(), cfg.rod.clone(), SurfaceModel::FRICTIONLESS)?);
            reset_rngs.push(rng_for(cfg.seed, Stream::EnvReset, offset + i));
            action_rngs.push(rng_for(cfg.seed, Stream::Policy, offset + i));
        }
        let curriculum = CurriculumState::at_level(progress.level);
        let mut t = Self {
            cfg,
            dataset,
            envs,
            reset_rngs,
            action_rngs,
            last_obs: Vec::with_capacity(n),
            episode_return: vec![0.0; n],
            discounted: vec![0.0; n],
            params,
            adam,
            obs_norm,
            reward_norm,
            curriculum,
            progress,
        };
        for i in 0..n {
            let o = t.reset_env(i)?;
            t.last_obs.push(o);
        }
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn reset_env(&mut self, i: usize) -> Result<Observation, TrainError> {
        let rng = &mut self.reset_rngs[i];
        let (init, target) = self.dataset.sample_pair(rng)?;
        let seed = rng.random::<u64>();
        let env = &mut self.envs[i];
        env.set_level(self.curriculum.level)?;
        Ok(env.reset(init, target, seed)?)
    }

    pub fn is_finished(&self) -> bool {
        self.progress.steps >= self.cfg.ppo.total_steps
    }

    fn normalized_columns(&self, obs: &[Observation]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(OBS_DIM, obs.len());
        for (j, o) in obs.iter().enumerate() {
            self.obs_norm
                .normalize_into(o.as_slice(), m.column_mut(j).as_mut_slice());
        }
        m
    }

    fn scale_reward(&self, r: f64) -> f64 {
        if !self.cfg.ppo.normalize_reward {
            return r;
        }
        let var = self.reward_norm.variance()[0];
        (r / (var + 1e-8).sqrt()).clamp(-REWARD_CLIP, REWARD_CLIP)
    }

    fn collect(&mut self) -> Result<(RolloutBuffer, RolloutStats), TrainError> {
        let n = self.envs.len();
        let gamma = self.cfg.ppo.gamma;
        let mut buf = RolloutBuffer::new(n);
        let mut stats = RolloutStats::default();
        for _ in 0..self.cfg.ppo.rollout_length {
            for o in &self.last_obs {
                self.obs_norm.update(o.as_slice());
            }
            let x = self.normalized_columns(&self.last_obs);
            let (means, values) = self.params.forward_batch(&x);
            let mut actions = Vec::with_capacity(n);
            let mut log_probs = Vec::with_capacity(n);
            for i in 0..n {
                let mean = means.column(i);
                let a = self.params.sample_action(mean.as_slice(), &mut self.action_rngs[i]);
                log_probs.push(self.params.log_prob(mean.as_slice(), &a));
                actions.push(a);
            }
            let outcomes: Vec<_> = self
                .envs
                .par_iter_mut()
                .zip(actions.par_iter())
                .map(|(env, a)| env.step(&Action([a[0], a[1], a[2], a[3]])))
                .collect();

            for (i, outcome) in outcomes.into_iter().enumerate() {
                let (raw, done, next_obs) = match outcome {
                    Ok(out) => {
                        let r = out.reward.total;
                        stats.reward_sum += r;
                        self.episode_return[i] += r;
                        let mut next = None;
                        if out.done {
                            stats.episode_rewards.push(self.episode_return[i]);
                            stats.final_errors.push(out.info.error.e_mean);
                            if out.info.success {
                                stats.successes += 1;
                            }
                            self.curriculum.update(out.info.success);
                        } else {
                            next = Some(out.observation.clone());
                        }
                        (Some((r, out)), false, next)
                    }
                    Err(_) => {
                        stats.physics_failures += 1;
                        (None, true, None)
                    }
                };
                stats.samples += 1;
                let obs_col = x.column(i).as_slice().to_vec();
                let (reward, terminal) = match raw {
                    Some((r, out)) => {
                        self.discounted[i] = self.discounted[i] * gamma + r;
                        self.reward_norm.update(&[self.discounted[i]]);
                        let mut scaled = self.scale_reward(r);
                        if out.info.truncated {
                            let term = self.normalized_columns(std::slice::from_ref(&out.observation));
                            scaled += gamma * self.params.values(&term)[0];
                        }
                        (scaled, out.done || done)
                    }
                    None => (0.0, true),
                };
                buf.envs[i].push(obs_col, actions[i].clone(), log_probs[i], values[i], reward, terminal);
                if terminal {
                    self.episode_return[i] = 0.0;
                    self.discounted[i] = 0.0;
                    self.last_obs[i] = self.reset_env(i)?;
                } else {
                    self.last_obs[i] = next_obs.expect("non-terminal step has an observation");
                }
            }
        }
        let x = self.normalized_columns(&self.last_obs);
        let last = self.params.values(&x);
        for (e, v) in buf.envs.iter_mut().zip(last) {
            e.last_value = v;
        }
        Ok((buf, stats))
    }

    /// Collects one rollout and applies one PPO update.
    pub fn update(&mut self) -> Result<MetricsRow, TrainError> {
        let lr = lr_schedule(
            self.progress.steps,
            self.cfg.ppo.total_steps,
            self.cfg.ppo.lr_init,
            self.cfg.ppo.lr_final,
        );
        let (mut buf, stats) = self.collect()?;
        buf.compute_gae(self.cfg.ppo.gamma, self.cfg.ppo.gae_lambda);
        let mut rng = rng_for(self.cfg.seed, Stream::Minibatch, self.progress.update);
        let losses = ppo_update(&mut self.params, &mut self.adam, &buf, &self.cfg.ppo, lr, &mut rng)?;
        self.progress.update += 1;
        self.progress.steps += stats.samples as u64;
        self.progress.level = self.curriculum.level;
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        Ok(MetricsRow {
            update: self.progress.update,
            steps: self.progress.steps,
            lr,
            mean_step_reward: stats.reward_sum / stats.samples.max(1) as f64,
            episodes: stats.episode_rewards.len(),
            successes: stats.successes,
            mean_episode_reward: mean(&stats.episode_rewards),
            mean_final_e_mean: mean(&stats.final_errors),
            level: self.curriculum.level,
            success_rate: self.curriculum.success_rate(),
            physics_failures: stats.physics_failures,
            losses,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            obs_norm: self.obs_norm.clone(),
            progress: self.progress,
            optimizer: Some(self.adam.clone()),
            reward_norm: Some(self.reward_norm.clone()),
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

/// File layout inside a training output directory.
pub fn metrics_path(out: &Path) -> PathBuf {
    out.join("metrics.csv")
}

pub fn final_checkpoint_path(out: &Path) -> PathBuf {
    out.join("final.ckpt")
}

pub fn latest_checkpoint_path(out: &Path) -> PathBuf {
    out.join("latest.ckpt")
}

/// Trains until `ppo.total_steps`, writing metrics and checkpoints under
/// `out` when given. On a non-finite loss the last good state is saved as
/// `diverged.ckpt` before the error is returned.
pub fn train(
    cfg: TrainConfig,
    dataset: &Dataset,
    out: Option<&Path>,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome, TrainError> {
    let resumed = resume.is_some();
    let mut trainer = Trainer::new(cfg, dataset, resume)?;
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = metrics_path(dir);
            let fresh = !resumed || !path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(resumed)
                .truncate(!resumed)
                .open(path)?;
            if fresh {
                writeln!(f, "{}", MetricsRow::HEADER)?;
            }
            Some(f)
        }
        None => None,
    };
    let every = trainer.config().ppo.checkpoint_every;
    let mut metrics = Vec::new();
    while !trainer.is_finished() {
        let before = trainer.checkpoint();
        let row = match trainer.update() {
            Ok(r) => r,
            Err(e @ TrainError::Ppo(PpoError::NonFiniteLoss { .. })) => {
                if let Some(dir) = out {
                    before.save(&dir.join("diverged.ckpt"))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        log::info!(
            "update {} steps {} level {} reward {:.4} e_mean {}",
            row.update,
            row.steps,
            row.level,
            row.mean_step_reward,
            opt(row.mean_final_e_mean)
        );
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", row.to_csv())?;
            f.flush()?;
        }
        if let Some(dir) = out {
            if every > 0 && row.update % every as u64 == 0 {
                let ck = trainer.checkpoint();
                ck.save(&dir.join(format!("update_{:06}.ckpt", row.update)))?;
                ck.save(&latest_checkpoint_path(dir))?;
            }
        }
        metrics.push(row);
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = out {
        checkpoint.save(&final_checkpoint_path(dir))?;
        checkpoint.save(&latest_checkpoint_path(dir))?;
    }
    Ok(TrainOutcome { checkpoint, metrics })
}

/// Seed used for deployment-time randomness derived from a training seed.
pub fn eval_seed(root: u64, index: u64) -> u64 {
    seed_for(root, Stream::Eval, index)
}
