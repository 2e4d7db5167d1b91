//! Deployment of trained policies into perturbed simulators, the experiment
//! protocols built on top of it, and report output.

pub mod analysis;
pub mod experiments;
pub mod report;

use crate::dataset::ConfigRecord;
use crate::env::{threshold_for_level, Action, Env, EnvConfig, EnvError};
use crate::geometry::{Centerline, Vec2};
use crate::policy_trainer::Checkpoint;
use crate::rod::{RodParams, SurfaceModel};

pub use analysis::{bending_energy_analysis, spearman, BendingAnalysis};
pub use experiments::{
    generalization_experiment, holdout_evaluation, paired_ablation, repeatability_experiment, ExperimentReport,
};

/// Default Coulomb load per segment used by deployment surfaces.
pub const DEFAULT_NORMAL_LOAD: f64 = 0.05;
/// Default regularization speed of the friction law, mm/s.
pub const DEFAULT_STICTION_VELOCITY: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct DeployConfig {
    pub surface: SurfaceModel,
    /// Std of additive Gaussian noise on observed centerline points, mm.
    pub obs_noise_std: f64,
    /// Multiplier on joint stiffness (bending rigidity proxy).
    pub stiffness_scale: f64,
    /// Fiber length, mm.
    pub length: f64,
    /// Hz
    pub control_rate: f64,
    /// s
    pub max_duration: f64,
}

impl Default for DeployConfig {
    fn default() -> Self {
        Self {
            surface: SurfaceModel::coulomb(0.3, DEFAULT_NORMAL_LOAD, DEFAULT_STICTION_VELOCITY),
            obs_noise_std: 0.05,
            stiffness_scale: 1.0,
            length: 15.0,
            control_rate: 40.0,
            max_duration: 8.0,
        }
    }
}

impl DeployConfig {
    /// The training simulator: no friction, no noise, nominal rod.
    pub fn unperturbed(length: f64) -> Self {
        Self {
            surface: SurfaceModel::FRICTIONLESS,
            obs_noise_std: 0.0,
            length,
            ..Self::default()
        }
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.surface.mu = mu;
        self
    }

    pub fn violations(&self, env: &EnvConfig) -> Vec<(String, String)> {
        let mut v = Vec::new();
        let mut bad = |k: &str, m: String| v.push((k.to_string(), m));
        if let Err(e) = self.surface.validate() {
            bad("surface", e);
        }
        if !(self.obs_noise_std >= 0.0 && self.obs_noise_std.is_finite()) {
            bad("obs_noise_std", "must be finite and >= 0".into());
        }
        if !(self.stiffness_scale > 0.0 && self.stiffness_scale.is_finite()) {
            bad("stiffness_scale", "must be finite and > 0".into());
        }
        if !(self.length > 0.0 && self.length.is_finite()) {
            bad("length", "must be finite and > 0".into());
        }
        if !(self.control_rate > 0.0) || (1.0 / self.control_rate - env.control_dt).abs() > 1e-12 {
            bad(
                "control_rate",
                format!("must equal 1 / env.control_dt = {}", 1.0 / env.control_dt),
            );
        }
        if !(self.max_duration >= env.control_dt) {
            bad("max_duration", "must cover at least one control step".into());
        }
        v
    }

    pub fn steps(&self) -> usize {
        (self.max_duration * self.control_rate).round().max(1.0) as usize
    }

    /// Rod parameters for this deployment derived from the training rod.
    pub fn rod_params(&self, base: &RodParams) -> RodParams {
        let mut p = base.clone();
        p.joint_stiffness *= self.stiffness_scale;
        p.total_length = self.length;
        p
    }
}

/// Everything needed to deploy a policy besides the trial itself.
#[derive(Debug, Clone)]
pub struct Deployment<'a> {
    pub checkpoint: &'a Checkpoint,
    /// Rod the policy was trained on.
    pub rod: &'a RodParams,
    pub env: &'a EnvConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopMode {
    Closed,
    Open,
}

impl LoopMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LoopMode::Closed => "closed",
            LoopMode::Open => "open",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSample {
    pub t: f64,
    pub e_mean: f64,
    pub e_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub mode: LoopMode,
    pub init_id: usize,
    pub target_id: usize,
    pub deploy: DeployConfig,
    pub seed: u64,
    /// Starts at t = 0 with the initial error.
    pub series: Vec<ErrorSample>,
    pub final_e_mean: f64,
    pub final_e_max: f64,
    /// Bending energy of the target, mm^-2.
    pub target_bend_energy: f64,
    /// Final combined error passes the checkpoint's curriculum threshold.
    pub converged: bool,
    pub init_centerline: Centerline,
    pub target_centerline: Centerline,
    pub final_centerline: Centerline,
    /// Gripper positions after each control step.
    pub gripper_path: Vec<(Vec2, Vec2)>,
    /// Set when the simulator failed part-way.
    pub failure: Option<String>,
}

impl TrialResult {
    pub fn initial_e_mean(&self) -> f64 {
        self.series[0].e_mean
    }
}

fn deploy_env(dep: &Deployment, deploy: &DeployConfig, surface: SurfaceModel) -> Result<Env, EnvError> {
    let bad = deploy.violations(dep.env);
    if !bad.is_empty() {
        let msg = bad
            .iter()
            .map(|(k, m)| format!("deploy.{k}: {m}"))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(EnvError::InvalidConfig(msg));
    }
    let mut cfg = dep.env.clone();
    // run for the whole duration: no early termination
    cfg.horizon_steps = deploy.steps();
    cfg.hold_steps = deploy.steps();
    Env::new(cfg, deploy.rod_params(dep.rod), surface)
}

struct Rollout {
    series: Vec<ErrorSample>,
    actions: Vec<Action>,
    gripper_path: Vec<(Vec2, Vec2)>,
    init: Centerline,
    target: Centerline,
    last: Centerline,
    last_eps: f64,
    failure: Option<String>,
}

enum Driver<'p> {
    Policy(&'p Checkpoint),
    Replay(&'p [Action]),
}

fn roll(
    mut env: Env,
    driver: Driver,
    init: &ConfigRecord,
    target: &ConfigRecord,
    noise: f64,
    steps: usize,
    seed: u64,
) -> Result<Rollout, EnvError> {
    env.set_observation_noise(noise, seed);
    let mut obs = env.reset(init, target, seed)?;
    let dt = env.config().control_dt;
    let e0 = env.shape_error();
    let mut out = Rollout {
        series: vec![ErrorSample { t: 0.0, e_mean: e0.e_mean, e_max: e0.e_max }],
        actions: Vec::with_capacity(steps),
        gripper_path: Vec::with_capacity(steps),
        init: env.current().clone(),
        target: env.target().clone(),
        last: env.current().clone(),
        last_eps: e0.epsilon,
        failure: None,
    };
    for k in 0..steps {
        let action = match &driver {
            Driver::Policy(ck) => {
                let m = ck.act(obs.as_slice());
                Action([m[0], m[1], m[2], m[3]])
            }
            Driver::Replay(plan) => match plan.get(k) {
                Some(a) => *a,
                None => break,
            },
        };
        match env.step(&action) {
            Ok(o) => {
                out.series.push(ErrorSample {
                    t: (k + 1) as f64 * dt,
                    e_mean: o.info.error.e_mean,
                    e_max: o.info.error.e_max,
                });
                out.last_eps = o.info.error.epsilon;
                obs = o.observation;
            }
            Err(e) => {
                out.failure = Some(e.to_string());
                break;
            }
        }
        out.actions.push(action);
        let g = env.grippers();
        out.gripper_path.push((g.left, g.right));
        out.last = env.current().clone();
    }
    Ok(out)
}

fn finish(
    mode: LoopMode,
    dep: &Deployment,
    deploy: &DeployConfig,
    init: &ConfigRecord,
    target: &ConfigRecord,
    seed: u64,
    r: Rollout,
) -> TrialResult {
    let last = *r.series.last().expect("series starts with t = 0");
    let threshold = threshold_for_level(dep.checkpoint.progress.level.min(crate::env::N_LEVELS - 1))
        .expect("level clamped");
    TrialResult {
        mode,
        init_id: init.id,
        target_id: target.id,
        deploy: deploy.clone(),
        seed,
        final_e_mean: last.e_mean,
        final_e_max: last.e_max,
        target_bend_energy: target.bend_energy,
        converged: r.failure.is_none() && r.last_eps.sqrt() < threshold,
        series: r.series,
        init_centerline: r.init,
        target_centerline: r.target,
        final_centerline: r.last,
        gripper_path: r.gripper_path,
        failure: r.failure,
    }
}

/// Runs the policy deterministically (action = mean) with feedback from the
/// perturbed simulator at every control step.
pub fn run_closed_loop(
    dep: &Deployment,
    deploy: &DeployConfig,
    init: &ConfigRecord,
    target: &ConfigRecord,
    seed: u64,
) -> Result<TrialResult, EnvError> {
    let env = deploy_env(dep, deploy, deploy.surface)?;
    let r = roll(
        env,
        Driver::Policy(dep.checkpoint),
        init,
        target,
        deploy.obs_noise_std,
        deploy.steps(),
        seed,
    )?;
    Ok(finish(LoopMode::Closed, dep, deploy, init, target, seed, r))
}

/// Plans a gripper trajectory with the policy in the frictionless,
/// noise-free simulator, then replays it without feedback in the perturbed
/// simulator.
pub fn run_open_loop(
    dep: &Deployment,
    deploy: &DeployConfig,
    init: &ConfigRecord,
    target: &ConfigRecord,
    seed: u64,
) -> Result<TrialResult, EnvError> {
    let plan = plan_trajectory(dep, deploy, init, target, seed)?;
    let env = deploy_env(dep, deploy, deploy.surface)?;
    let r = roll(
        env,
        Driver::Replay(&plan.actions),
        init,
        target,
        0.0,
        plan.actions.len(),
        seed,
    )?;
    Ok(finish(LoopMode::Open, dep, deploy, init, target, seed, r))
}

/// The frictionless plan used by [`run_open_loop`]: commanded actions and
/// the resulting gripper path.
pub struct Plan {
    pub actions: Vec<Action>,
    pub gripper_path: Vec<(Vec2, Vec2)>,
}

pub fn plan_trajectory(
    dep: &Deployment,
    deploy: &DeployConfig,
    init: &ConfigRecord,
    target: &ConfigRecord,
    seed: u64,
) -> Result<Plan, EnvError> {
    let env = deploy_env(dep, deploy, SurfaceModel::FRICTIONLESS)?;
    let r = roll(env, Driver::Policy(dep.checkpoint), init, target, 0.0, deploy.steps(), seed)?;
    Ok(Plan {
        actions: r.actions,
        gripper_path: r.gripper_path,
    })
}
