//! The shape-regulation MDP: observation layout, action scaling, reward,
//! success hold and the success-threshold curriculum.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::dataset::ConfigRecord;
use crate::geometry::{resample, shape_error, Centerline, GeometryError, ShapeError, Vec2};
use crate::rod::{ChainState, GripperPair, Rod, RodError, RodParams, SurfaceModel};

pub const OBS_DIM: usize = 52;
pub const ACT_DIM: usize = 4;
pub const N_LEVELS: usize = 13;
pub const WINDOW: usize = 50;

const THRESHOLD_START: f64 = 1.2;
const THRESHOLD_END: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error(transparent)]
    Rod(#[from] RodError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("curriculum level {0} out of range 0..{N_LEVELS}")]
    LevelOutOfRange(usize),
    #[error("invalid env config: {0}")]
    InvalidConfig(String),
    #[error("episode is not active; call reset first")]
    NotActive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    /// s
    pub control_dt: f64,
    pub horizon_steps: usize,
    pub hold_steps: usize,
    /// Gripper speed at |action| = 1, mm/s.
    pub v_max: f64,
    /// Safe elongation limit as a fraction of fiber length.
    pub rho: f64,
    pub w_er: f64,
    pub w_te: f64,
    pub w_sm: f64,
    pub bonus_base: f64,
    pub state_points: usize,
    /// Grippers are never brought closer than this fraction of the length.
    pub min_separation_frac: f64,
    /// Slack kept from full stretch when limiting gripper motion, mm.
    pub reach_margin: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            control_dt: 0.025,
            horizon_steps: 320,
            hold_steps: 80,
            v_max: 2.0,
            rho: 0.9,
            w_er: 10.0,
            w_te: 10.0,
            w_sm: 0.1,
            bonus_base: 10.0,
            state_points: 10,
            min_separation_frac: 0.3,
            reach_margin: 0.05,
        }
    }
}

impl EnvConfig {
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut positive = |name: &str, v: f64| {
            if !(v.is_finite() && v > 0.0) {
                out.push((name.to_string(), format!("{v} must be positive")));
            }
        };
        positive("control_dt", self.control_dt);
        positive("v_max", self.v_max);
        positive("rho", self.rho);
        positive("w_er", self.w_er);
        positive("w_te", self.w_te);
        positive("w_sm", self.w_sm);
        positive("bonus_base", self.bonus_base);
        positive("min_separation_frac", self.min_separation_frac);
        positive("reach_margin", self.reach_margin);
        positive("horizon_steps", self.horizon_steps as f64);
        positive("hold_steps", self.hold_steps as f64);
        if self.rho > 1.0 {
            out.push(("rho".into(), format!("{} must be in (0, 1]", self.rho)));
        }
        if self.horizon_steps < self.hold_steps {
            out.push((
                "horizon_steps".into(),
                format!("{} < hold_steps {}", self.horizon_steps, self.hold_steps),
            ));
        }
        if self.state_points != 10 {
            out.push((
                "state_points".into(),
                format!("{} (the 52-dim observation needs 10)", self.state_points),
            ));
        }
        out
    }
}

/// Policy input: gripper positions (4), gripper velocities (4), current
/// centerline (20), target centerline (20), previous action (4).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub const GRIPPERS: std::ops::Range<usize> = 0..4;
    pub const VELOCITIES: std::ops::Range<usize> = 4..8;
    pub const CURRENT: std::ops::Range<usize> = 8..28;
    pub const TARGET: std::ops::Range<usize> = 28..48;
    pub const PREV_ACTION: std::ops::Range<usize> = 48..52;

    pub fn assemble(
        grippers: &GripperPair,
        current: &[Vec2],
        target: &[Vec2],
        prev_action: &Action,
    ) -> Self {
        let mut v = [0.0; OBS_DIM];
        v[0..4].copy_from_slice(&[grippers.left.x, grippers.left.y, grippers.right.x, grippers.right.y]);
        v[4..8].copy_from_slice(&[
            grippers.left_vel.x,
            grippers.left_vel.y,
            grippers.right_vel.x,
            grippers.right_vel.y,
        ]);
        for (i, p) in current.iter().enumerate() {
            v[8 + 2 * i] = p.x;
            v[9 + 2 * i] = p.y;
        }
        for (i, p) in target.iter().enumerate() {
            v[28 + 2 * i] = p.x;
            v[29 + 2 * i] = p.y;
        }
        v[48..52].copy_from_slice(&prev_action.0);
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Normalized gripper velocity command `(vx_L, vy_L, vx_R, vy_R)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Action(pub [f64; ACT_DIM]);

impl Action {
    pub const ZERO: Action = Action([0.0; ACT_DIM]);

    pub fn clipped(&self) -> Action {
        Action(self.0.map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) }))
    }
}

/// Gripper velocities in mm/s for a (clipped) action.
pub fn scale_action(a: &Action, v_max: f64) -> (Vec2, Vec2) {
    let c = a.clipped().0;
    (
        Vec2::new(c[0] * v_max, c[1] * v_max),
        Vec2::new(c[2] * v_max, c[3] * v_max),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown {
    /// Combined shape error, mm^2.
    pub epsilon: f64,
    /// Tension penalty, mm.
    pub p_te: f64,
    /// Action smoothness penalty.
    pub p_sm: f64,
    pub bonus: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn reconstruct_total(&self, config: &EnvConfig) -> f64 {
        -config.w_er * self.epsilon - config.w_te * self.p_te - config.w_sm * self.p_sm + self.bonus
    }
}

/// Success threshold (mm) for a curriculum level: geometric from 1.2 mm at
/// level 0 to 0.01 mm at level 12.
pub fn threshold_for_level(level: usize) -> Result<f64, EnvError> {
    if level >= N_LEVELS {
        return Err(EnvError::LevelOutOfRange(level));
    }
    Ok(match level {
        0 => THRESHOLD_START,
        l if l == N_LEVELS - 1 => THRESHOLD_END,
        l => {
            THRESHOLD_START
                * (THRESHOLD_END / THRESHOLD_START).powf(l as f64 / (N_LEVELS - 1) as f64)
        }
    })
}

/// Whether a shape error passes the success test at `threshold_mm`.
///
/// `epsilon` is in mm^2 while thresholds are lengths, so the comparison uses
/// `sqrt(epsilon)`.
pub fn passes_threshold(error: &ShapeError, threshold_mm: f64) -> bool {
    error.epsilon.sqrt() < threshold_mm
}

#[allow(clippy::too_many_arguments)]
pub fn compute_reward(
    current: &Centerline,
    target: &Centerline,
    grippers: &GripperPair,
    action: &Action,
    prev_action: &Action,
    config: &EnvConfig,
    total_length: f64,
    level: usize,
    success_bonus_active: bool,
) -> Result<RewardBreakdown, EnvError> {
    let err = shape_error(current, target)?;
    Ok(reward_from_error(
        &err,
        grippers,
        action,
        prev_action,
        config,
        total_length,
        level,
        success_bonus_active,
    ))
}

#[allow(clippy::too_many_arguments)]
fn reward_from_error(
    err: &ShapeError,
    grippers: &GripperPair,
    action: &Action,
    prev_action: &Action,
    config: &EnvConfig,
    total_length: f64,
    level: usize,
    success_bonus_active: bool,
) -> RewardBreakdown {
    let p_te = (grippers.separation() - config.rho * total_length).max(0.0);
    let p_sm = action
        .0
        .iter()
        .zip(&prev_action.0)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let bonus = if success_bonus_active {
        config.bonus_base * (1.0 + level as f64)
    } else {
        0.0
    };
    let mut out = RewardBreakdown {
        epsilon: err.epsilon,
        p_te,
        p_sm,
        bonus,
        total: 0.0,
    };
    out.total = out.reconstruct_total(config);
    out
}

/// Outcome-window curriculum over [`N_LEVELS`] success thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumState {
    pub level: usize,
    pub window: VecDeque<bool>,
}

impl Default for CurriculumState {
    fn default() -> Self {
        Self::at_level(0)
    }
}

impl CurriculumState {
    pub fn at_level(level: usize) -> Self {
        Self {
            level: level.min(N_LEVELS - 1),
            window: VecDeque::with_capacity(WINDOW),
        }
    }

    pub fn threshold(&self) -> f64 {
        threshold_for_level(self.level).expect("level kept in range")
    }

    pub fn success_rate(&self) -> f64 {
        if self.window.is_empty() {
            0.0
        } else {
            self.window.iter().filter(|s| **s).count() as f64 / self.window.len() as f64
        }
    }

    /// Records an episode outcome; once the window is full, a success rate
    /// above 70 % promotes and one below 30 % demotes. The window is cleared
    /// whenever a promotion or demotion triggers.
    pub fn update(&mut self, episode_success: bool) {
        if self.window.len() == WINDOW {
            self.window.pop_front();
        }
        self.window.push_back(episode_success);
        if self.window.len() < WINDOW {
            return;
        }
        let rate = self.success_rate();
        if rate > 0.70 {
            self.level = (self.level + 1).min(N_LEVELS - 1);
            self.window.clear();
        } else if rate < 0.30 {
            self.level = self.level.saturating_sub(1);
            self.window.clear();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub success: bool,
    pub truncated: bool,
    pub steps: usize,
    pub error: ShapeError,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: RewardBreakdown,
    pub done: bool,
    pub info: StepInfo,
}

/// One simulated episode runner.
#[derive(Debug, Clone)]
pub struct Env {
    config: EnvConfig,
    rod: Rod,
    surface: SurfaceModel,
    state: ChainState,
    grippers: GripperPair,
    target: Centerline,
    current: Centerline,
    prev_action: Action,
    steps: usize,
    hold: usize,
    level: usize,
    active: bool,
    obs_noise_std: f64,
    noise_rng: ChaCha8Rng,
}

impl Env {
    pub fn new(config: EnvConfig, rod_params: RodParams, surface: SurfaceModel) -> Result<Self, EnvError> {
        let bad = config.violations();
        if !bad.is_empty() {
            let msg = bad
                .iter()
                .map(|(k, v)| format!("{k}: {v}"))
                .collect::<Vec<_>>()
                .join("; ");
            return Err(EnvError::InvalidConfig(msg));
        }
        let rod = Rod::new(rod_params)?;
        let n = rod.params().n_segments;
        let l = rod.params().total_length;
        let state = ChainState::straight(n, Vec2::zeros(), 0.0);
        let placeholder = Centerline::new(
            (0..config.state_points)
                .map(|i| Vec2::new(l * i as f64 / (config.state_points - 1) as f64, 0.0))
                .collect(),
        )?;
        Ok(Self {
            grippers: GripperPair::at_rest(Vec2::zeros(), Vec2::new(l, 0.0)),
            config,
            rod,
            surface,
            state,
            target: placeholder.clone(),
            current: placeholder,
            prev_action: Action::ZERO,
            steps: 0,
            hold: 0,
            level: 0,
            active: false,
            obs_noise_std: 0.0,
            noise_rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn rod(&self) -> &Rod {
        &self.rod
    }

    pub fn chain(&self) -> &ChainState {
        &self.state
    }

    pub fn grippers(&self) -> &GripperPair {
        &self.grippers
    }

    pub fn target(&self) -> &Centerline {
        &self.target
    }

    /// Noise-free resampled centerline of the chain.
    pub fn current(&self) -> &Centerline {
        &self.current
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn set_level(&mut self, level: usize) -> Result<(), EnvError> {
        threshold_for_level(level)?;
        self.level = level;
        Ok(())
    }

    pub fn set_surface(&mut self, surface: SurfaceModel) {
        self.surface = surface;
    }

    /// Additive Gaussian noise (mm) on the observed centerline points.
    pub fn set_observation_noise(&mut self, std: f64, seed: u64) {
        self.obs_noise_std = std.max(0.0);
        self.noise_rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn shape_error(&self) -> ShapeError {
        shape_error(&self.current, &self.target).expect("equal point counts")
    }

    /// Starts an episode at `init`'s settled shape with `target` as goal.
    pub fn reset(
        &mut self,
        init: &ConfigRecord,
        target: &ConfigRecord,
        seed: u64,
    ) -> Result<Observation, EnvError> {
        let n = self.rod.params().n_segments;
        self.grippers = init.grippers();
        self.state = if init.joint_angles.len() + 1 == n {
            init.chain_state()
        } else {
            let st = self.rod.init_chain(&self.grippers, init.buckle_sign, seed)?;
            self.rod
                .settle(
                    &st,
                    &self.grippers,
                    &SurfaceModel::FRICTIONLESS,
                    crate::dataset::SETTLE_KE_TOL,
                    crate::dataset::SETTLE_MAX_STEPS,
                )?
                .state
        };
        self.target = if target.centerline.len() == self.config.state_points {
            target.centerline.clone()
        } else {
            resample(&target.centerline, self.config.state_points)?
        };
        self.current = self.resampled_chain()?;
        self.prev_action = Action::ZERO;
        self.steps = 0;
        self.hold = 0;
        self.active = true;
        Ok(self.observe())
    }

    /// Starts an episode from an explicit chain state (used by deployment).
    pub fn reset_to_state(
        &mut self,
        state: ChainState,
        grippers: GripperPair,
        target: Centerline,
    ) -> Result<Observation, EnvError> {
        self.state = state;
        self.grippers = GripperPair::at_rest(grippers.left, grippers.right);
        self.target = resample(&target, self.config.state_points)?;
        self.current = self.resampled_chain()?;
        self.prev_action = Action::ZERO;
        self.steps = 0;
        self.hold = 0;
        self.active = true;
        Ok(self.observe())
    }

    fn resampled_chain(&self) -> Result<Centerline, EnvError> {
        let h = self.rod.params().segment_length();
        Ok(resample(&self.state.centerline(h), self.config.state_points)?)
    }

    pub fn observe(&mut self) -> Observation {
        let noisy: Vec<Vec2>;
        let current = if self.obs_noise_std > 0.0 {
            let normal = Normal::new(0.0, self.obs_noise_std).expect("finite std");
            noisy = self
                .current
                .points()
                .iter()
                .map(|p| {
                    Vec2::new(
                        p.x + normal.sample(&mut self.noise_rng),
                        p.y + normal.sample(&mut self.noise_rng),
                    )
                })
                .collect();
            &noisy[..]
        } else {
            self.current.points()
        };
        Observation::assemble(&self.grippers, current, self.target.points(), &self.prev_action)
    }

    /// Largest fraction of the commanded displacement that keeps the
    /// grippers inside the reachable, non-colliding workspace.
    fn admissible_fraction(&self, vl: Vec2, vr: Vec2) -> f64 {
        let p = self.rod.params();
        let dt = self.config.control_dt;
        let min_sep = self.config.min_separation_frac * p.total_length;
        let ok = |f: f64| {
            let l = self.grippers.left + vl * (dt * f);
            let r = self.grippers.right + vr * (dt * f);
            (r - l).norm() >= min_sep && p.is_reachable(l, r, self.config.reach_margin)
        };
        if ok(1.0) {
            return 1.0;
        }
        [0.5, 0.25, 0.125]
            .into_iter()
            .find(|&f| ok(f))
            .unwrap_or(0.0)
    }

    pub fn step(&mut self, action: &Action) -> Result<StepOutcome, EnvError> {
        if !self.active {
            return Err(EnvError::NotActive);
        }
        let a = action.clipped();
        let (vl, vr) = scale_action(&a, self.config.v_max);
        let frac = self.admissible_fraction(vl, vr);
        self.grippers.left_vel = vl * frac;
        self.grippers.right_vel = vr * frac;
        self.state = self
            .rod
            .step(&self.state, &self.grippers, &self.surface, self.config.control_dt)?;
        let moved = self.grippers.advanced(self.config.control_dt);
        self.grippers.left = moved.left;
        self.grippers.right = moved.right;
        self.current = self.resampled_chain()?;
        self.steps += 1;

        let err = self.shape_error();
        let threshold = threshold_for_level(self.level)?;
        let passing = passes_threshold(&err, threshold);
        let reward = reward_from_error(
            &err,
            &self.grippers,
            &a,
            &self.prev_action,
            &self.config,
            self.rod.params().total_length,
            self.level,
            passing,
        );
        self.hold = if passing { self.hold + 1 } else { 0 };
        let success = self.hold >= self.config.hold_steps;
        let truncated = !success && self.steps >= self.config.horizon_steps;
        let done = success || truncated;
        self.prev_action = a;
        if done {
            self.active = false;
        }
        Ok(StepOutcome {
            observation: self.observe(),
            reward,
            done,
            info: StepInfo {
                success,
                truncated,
                steps: self.steps,
                error: err,
            },
        })
    }

    pub fn hold_count(&self) -> usize {
        self.hold
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::settle_record;

    fn rod_params() -> RodParams {
        RodParams::new(1.0, 0.2)
    }

    fn record(id: usize, lx: f64, rx: f64, ry: f64, sign: i8) -> ConfigRecord {
        let rod = Rod::new(rod_params()).unwrap();
        settle_record(&rod, id, Vec2::new(lx, 0.0), Vec2::new(rx, ry), sign, 10, 0).unwrap()
    }

    #[test]
    fn threshold_schedule() {
        assert_eq!(threshold_for_level(0).unwrap(), 1.2);
        assert_eq!(threshold_for_level(12).unwrap(), 0.01);
        let mid = threshold_for_level(6).unwrap();
        assert!((mid - 1.2 * (1.0f64 / 120.0).sqrt()).abs() < 1e-12);
        assert!((mid - 0.10954).abs() < 1e-5);
        assert!(matches!(threshold_for_level(13), Err(EnvError::LevelOutOfRange(13))));
        for l in 1..N_LEVELS {
            assert!(threshold_for_level(l).unwrap() < threshold_for_level(l - 1).unwrap());
        }
    }

    #[test]
    fn curriculum_rules() {
        let mut c = CurriculumState::at_level(3);
        for _ in 0..50 {
            c.update(true);
        }
        assert_eq!(c.level, 4);
        assert!(c.window.is_empty());

        let mut c = CurriculumState::at_level(0);
        for _ in 0..50 {
            c.update(false);
        }
        assert_eq!(c.level, 0);

        let mut c = CurriculumState::at_level(5);
        for i in 0..50 {
            c.update(i % 2 == 0);
        }
        assert_eq!(c.level, 5);
        assert_eq!(c.window.len(), 50);

        let mut c = CurriculumState::at_level(12);
        for _ in 0..50 {
            c.update(true);
        }
        assert_eq!(c.level, 12);
    }

    #[test]
    fn scale_action_examples() {
        let (l, r) = scale_action(&Action::ZERO, 2.0);
        assert_eq!((l, r), (Vec2::zeros(), Vec2::zeros()));
        let (l, r) = scale_action(&Action([1.0, 0.0, -1.0, 0.0]), 2.0);
        assert_eq!((l, r), (Vec2::new(2.0, 0.0), Vec2::new(-2.0, 0.0)));
        let (l, _) = scale_action(&Action([1.7, -3.0, 0.0, 0.0]), 2.0);
        assert_eq!(l, Vec2::new(2.0, -2.0));
    }

    #[test]
    fn reward_examples() {
        let cfg = EnvConfig::default();
        let line = Centerline::new((0..10).map(|i| Vec2::new(i as f64, 0.0)).collect()).unwrap();
        let g = GripperPair::at_rest(Vec2::zeros(), Vec2::new(9.0, 0.0));
        let r = compute_reward(&line, &line, &g, &Action::ZERO, &Action::ZERO, &cfg, 15.0, 0, false)
            .unwrap();
        assert_eq!(r.total, 0.0);

        let g14 = GripperPair::at_rest(Vec2::zeros(), Vec2::new(14.0, 0.0));
        let r = compute_reward(&line, &line, &g14, &Action::ZERO, &Action::ZERO, &cfg, 15.0, 0, false)
            .unwrap();
        assert!((r.p_te - 0.5).abs() < 1e-12);

        let a = Action([1.0, 0.0, 0.0, 0.0]);
        let r = compute_reward(&line, &line, &g, &a, &Action::ZERO, &cfg, 15.0, 2, true).unwrap();
        assert_eq!(r.p_sm, 1.0);
        assert_eq!(r.bonus, 30.0);
        assert_eq!(r.total, r.reconstruct_total(&cfg));
    }

    #[test]
    fn reset_observation_and_zero_error_on_same_record() {
        let rec = record(0, -5.0, 5.0, 0.5, 1);
        let mut env = Env::new(EnvConfig::default(), rod_params(), SurfaceModel::FRICTIONLESS).unwrap();
        let obs = env.reset(&rec, &rec, 1).unwrap();
        assert_eq!(obs.0.len(), OBS_DIM);
        assert_eq!(env.shape_error(), ShapeError::ZERO);
        let again = env.reset(&rec, &rec, 1).unwrap();
        assert_eq!(obs, again);
        assert_eq!(&obs.0[48..52], &[0.0; 4]);
    }

    #[test]
    fn zero_action_on_solved_episode_succeeds_after_hold() {
        let rec = record(0, -5.0, 5.0, 0.5, 1);
        let cfg = EnvConfig::default();
        let mut env = Env::new(cfg.clone(), rod_params(), SurfaceModel::FRICTIONLESS).unwrap();
        env.reset(&rec, &rec, 1).unwrap();
        for k in 1..=cfg.hold_steps {
            let out = env.step(&Action::ZERO).unwrap();
            assert_eq!(out.done, k == cfg.hold_steps);
            assert!(out.reward.bonus > 0.0);
        }
        assert!(matches!(env.step(&Action::ZERO), Err(EnvError::NotActive)));
    }

    #[test]
    fn horizon_without_hold_times_out() {
        let init = record(0, -5.0, 5.0, 0.0, 1);
        let target = record(1, -5.0, 5.0, 0.0, -1);
        let cfg = EnvConfig {
            horizon_steps: 90,
            ..EnvConfig::default()
        };
        let mut env = Env::new(cfg, rod_params(), SurfaceModel::FRICTIONLESS).unwrap();
        env.reset(&init, &target, 0).unwrap();
        let mut last = None;
        for _ in 0..90 {
            last = Some(env.step(&Action::ZERO).unwrap());
        }
        let last = last.unwrap();
        assert!(last.done && last.info.truncated && !last.info.success);
    }

    #[test]
    fn hold_counter_resets_on_failure() {
        let rec = record(0, -5.0, 5.0, 0.0, 1);
        let mut env = Env::new(EnvConfig::default(), rod_params(), SurfaceModel::FRICTIONLESS).unwrap();
        env.set_level(6).unwrap();
        env.reset(&rec, &rec, 0).unwrap();
        for _ in 0..10 {
            env.step(&Action::ZERO).unwrap();
        }
        assert_eq!(env.hold_count(), 10);
        // drive away until the test fails, then come back
        while passes_threshold(&env.shape_error(), threshold_for_level(6).unwrap()) {
            env.step(&Action([0.0, 0.0, 0.0, 1.0])).unwrap();
        }
        assert_eq!(env.hold_count(), 0);
    }

    #[test]
    fn one_step_is_twenty_five_substeps() {
        let cfg = EnvConfig::default();
        let p = rod_params();
        assert_eq!((cfg.control_dt / p.physics_dt).round() as usize, 25);
        // a control step equals 25 explicit physics substeps
        let rec = record(0, -5.0, 5.0, 0.0, 1);
        let mut env = Env::new(cfg.clone(), p.clone(), SurfaceModel::FRICTIONLESS).unwrap();
        env.reset(&rec, &rec, 0).unwrap();
        let a = Action([0.5, -0.2, 0.1, 0.3]);
        env.step(&a).unwrap();
        let rod = Rod::new(p.clone()).unwrap();
        let mut g = rec.grippers();
        let (vl, vr) = scale_action(&a, cfg.v_max);
        g.left_vel = vl;
        g.right_vel = vr;
        let mut st = rec.chain_state();
        for k in 0..25 {
            let mut gk = g.advanced(k as f64 * p.physics_dt);
            gk.left_vel = vl;
            gk.right_vel = vr;
            st = rod.step(&st, &gk, &SurfaceModel::FRICTIONLESS, p.physics_dt).unwrap();
        }
        let (a_pts, b_pts) = (env.chain().points(0.75), st.points(0.75));
        for (x, y) in a_pts.iter().zip(&b_pts) {
            assert!((x - y).norm() < 1e-9);
        }
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn points() -> impl Strategy<Value = Vec<Vec2>> {
            prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64), 10)
                .prop_map(|v| v.into_iter().map(|(x, y)| Vec2::new(x, y)).collect())
        }

        fn action() -> impl Strategy<Value = Action> {
            prop::array::uniform4(-3.0..3.0f64).prop_map(Action)
        }

        proptest! {
            #[test]
            fn reward_terms_are_nonnegative_and_reconstruct(
                cur in points(),
                tgt in points(),
                gl in (-10.0..10.0f64, -10.0..10.0f64),
                gr in (-10.0..10.0f64, -10.0..10.0f64),
                a in action(),
                prev in action(),
                level in 0usize..N_LEVELS,
                bonus in any::<bool>(),
                off in (-100.0..100.0f64, -100.0..100.0f64),
            ) {
                let cfg = EnvConfig::default();
                let g = GripperPair::at_rest(Vec2::new(gl.0, gl.1), Vec2::new(gr.0, gr.1));
                let (c, t) = (Centerline::new(cur.clone()), Centerline::new(tgt.clone()));
                prop_assume!(c.is_ok() && t.is_ok());
                let (c, t) = (c.unwrap(), t.unwrap());
                let (a, prev) = (a.clipped(), prev.clipped());
                let r = compute_reward(&c, &t, &g, &a, &prev, &cfg, 15.0, level, bonus).unwrap();
                prop_assert!(r.epsilon >= 0.0 && r.p_te >= 0.0 && r.p_sm >= 0.0);
                prop_assert!((r.total - r.reconstruct_total(&cfg)).abs() <= 1e-12 * r.total.abs().max(1.0));

                let o = Vec2::new(off.0, off.1);
                let gm = GripperPair::at_rest(g.left + o, g.right + o);
                let m = compute_reward(&c.translated(o), &t.translated(o), &gm, &a, &prev, &cfg, 15.0, level, bonus).unwrap();
                prop_assert!((m.epsilon - r.epsilon).abs() <= 1e-12 * r.epsilon.max(1.0));
                prop_assert!((m.p_te - r.p_te).abs() <= 1e-12 * r.p_te.max(1.0));
                prop_assert_eq!(m.p_sm, r.p_sm);
                prop_assert_eq!(m.bonus, r.bonus);
                prop_assert!((m.total - r.total).abs() <= 1e-12 * r.total.abs().max(1.0));
            }

            #[test]
            fn clipped_actions_stay_in_the_box(a in prop::array::uniform4(prop::num::f64::ANY)) {
                let c = Action(a).clipped();
                prop_assert!(c.0.iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn random_episodes_keep_observations_finite() {
            use rand::{Rng, SeedableRng};
            let a = super::record(0, -5.0, 5.0, 0.5, 1);
            let b = super::record(1, -6.0, 4.0, -1.0, -1);
            let mut env = Env::new(EnvConfig::default(), super::rod_params(), SurfaceModel::FRICTIONLESS).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
            env.reset(&a, &b, 0).unwrap();
            let mut done = false;
            while !done {
                let act = Action(std::array::from_fn(|_| rng.random_range(-2.0..2.0)));
                let out = env.step(&act).unwrap();
                assert_finite(&out.observation);
                assert!(out.info.error.e_mean <= out.info.error.e_max);
                done = out.done;
            }
            assert!(matches!(env.step(&Action::ZERO), Err(EnvError::NotActive)));
        }

        fn assert_finite(o: &Observation) {
            assert!(o.0.iter().all(|v| v.is_finite()));
        }
    }
}
