//! Planar dynamics of an inextensible articulated chain pinned between two
//! grippers.
//!
//! The chain is described in reduced coordinates: the base point sits on the
//! left gripper, and the shape is the list of relative joint angles (plus the
//! heading of the first segment when the ends are not clamped). Segment
//! lengths are therefore exact by construction. Each physics substep is a
//! linearly implicit Euler step in those coordinates followed by a projection
//! that re-pins the free end onto the right gripper.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{Centerline, Vec2};

/// Largest endpoint residual tolerated after a projection, mm.
pub const ENDPOINT_TOL: f64 = 1e-6;

const PROJECTION_TOL: f64 = 1e-12;
const PROJECTION_MAX_ITERS: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RodError {
    #[error("invalid rod parameters: {0}")]
    InvalidParams(String),
    #[error("infeasible endpoints: separation {separation:.6} mm outside ({min:.6}, {max:.6}]")]
    InfeasibleEndpoints { separation: f64, min: f64, max: f64 },
    #[error("numerical divergence: joint rate {rate:e} rad/s")]
    NumericalDivergence { rate: f64 },
    #[error("constraint projection failed, residual {residual:e} mm")]
    ProjectionFailed { residual: f64 },
    #[error("step dt {dt} is not a positive multiple of physics dt {physics_dt}")]
    InvalidTimestep { dt: f64, physics_dt: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RodParams {
    pub n_segments: usize,
    /// mm
    pub total_length: f64,
    /// Torque per radian.
    pub joint_stiffness: f64,
    /// Torque per radian per second.
    pub joint_damping: f64,
    pub segment_mass: f64,
    /// s
    pub physics_dt: f64,
    /// Lock the first and last segment to the (+x aligned) gripper frames.
    pub end_clamp: bool,
    /// Joint rate above which a step is reported as diverged, rad/s.
    pub max_joint_rate: f64,
}

impl RodParams {
    /// Parameters for a 20-segment, 15 mm chain with the given joint
    /// stiffness and damping.
    pub fn new(joint_stiffness: f64, joint_damping: f64) -> Self {
        Self {
            n_segments: 20,
            total_length: 15.0,
            joint_stiffness,
            joint_damping,
            segment_mass: 1e-3,
            physics_dt: 1e-3,
            end_clamp: true,
            max_joint_rate: 1e4,
        }
    }

    pub fn validate(&self) -> Result<(), RodError> {
        let mut bad = Vec::new();
        if self.n_segments < 3 {
            bad.push(format!("n_segments = {} < 3", self.n_segments));
        }
        for (name, v) in [
            ("total_length", self.total_length),
            ("joint_stiffness", self.joint_stiffness),
            ("joint_damping", self.joint_damping),
            ("segment_mass", self.segment_mass),
            ("physics_dt", self.physics_dt),
            ("max_joint_rate", self.max_joint_rate),
        ] {
            if !(v.is_finite() && v > 0.0) {
                bad.push(format!("{name} = {v} must be positive"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(RodError::InvalidParams(bad.join("; ")))
        }
    }

    pub fn segment_length(&self) -> f64 {
        self.total_length / self.n_segments as f64
    }

    /// Smallest gripper separation accepted by [`Rod::init_chain`].
    pub fn min_separation(&self) -> f64 {
        0.05 * self.total_length
    }

    /// Whether the right gripper can be reached from the left one, keeping
    /// `margin` mm of slack. With clamped ends the first and last segments
    /// are rigidly aligned with +x.
    pub fn is_reachable(&self, left: Vec2, right: Vec2, margin: f64) -> bool {
        let d = right - left;
        let sep = d.norm();
        if sep <= self.min_separation() {
            return false;
        }
        if self.end_clamp {
            let h = self.segment_length();
            let inner = d - Vec2::new(2.0 * h, 0.0);
            inner.norm() <= (self.n_segments - 2) as f64 * h - margin
        } else {
            sep <= self.total_length - margin
        }
    }

    fn n_coords(&self) -> usize {
        if self.end_clamp {
            self.n_segments - 1
        } else {
            self.n_segments
        }
    }

    /// Joint index driven by generalized coordinate `k`; joint 0 is the base
    /// heading, joint `j >= 1` sits between segments `j - 1` and `j`.
    fn joint_of(&self, k: usize) -> usize {
        if self.end_clamp {
            k + 1
        } else {
            k
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GripperPair {
    pub left: Vec2,
    pub right: Vec2,
    pub left_vel: Vec2,
    pub right_vel: Vec2,
}

impl GripperPair {
    pub fn at_rest(left: Vec2, right: Vec2) -> Self {
        Self {
            left,
            right,
            left_vel: Vec2::zeros(),
            right_vel: Vec2::zeros(),
        }
    }

    pub fn separation(&self) -> f64 {
        (self.right - self.left).norm()
    }

    pub fn is_finite(&self) -> bool {
        [self.left, self.right, self.left_vel, self.right_vel]
            .iter()
            .all(|v| v.x.is_finite() && v.y.is_finite())
    }

    /// Positions after moving with the stored velocities for `dt` seconds.
    pub fn advanced(&self, dt: f64) -> Self {
        Self {
            left: self.left + self.left_vel * dt,
            right: self.right + self.right_vel * dt,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceMode {
    Frictionless,
    Coulomb,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceModel {
    pub mode: SurfaceMode,
    pub mu: f64,
    pub normal_load_per_segment: f64,
    /// mm/s; below this speed the friction force is scaled down linearly.
    pub stiction_velocity: f64,
}

impl SurfaceModel {
    pub const FRICTIONLESS: SurfaceModel = SurfaceModel {
        mode: SurfaceMode::Frictionless,
        mu: 0.0,
        normal_load_per_segment: 0.0,
        stiction_velocity: 1.0,
    };

    pub fn coulomb(mu: f64, normal_load_per_segment: f64, stiction_velocity: f64) -> Self {
        Self {
            mode: SurfaceMode::Coulomb,
            mu,
            normal_load_per_segment,
            stiction_velocity,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(format!("mu = {} must be >= 0", self.mu));
        }
        if !(self.normal_load_per_segment >= 0.0 && self.normal_load_per_segment.is_finite()) {
            return Err("normal_load_per_segment must be >= 0".into());
        }
        if !(self.stiction_velocity > 0.0 && self.stiction_velocity.is_finite()) {
            return Err("stiction_velocity must be > 0".into());
        }
        Ok(())
    }

    /// Maximum friction force per segment; zero means no friction term at all.
    fn force_limit(&self) -> f64 {
        match self.mode {
            SurfaceMode::Frictionless => 0.0,
            SurfaceMode::Coulomb => self.mu * self.normal_load_per_segment,
        }
    }
}

/// Reduced-coordinate chain state.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    /// Relative joint angles, `n_segments - 1` entries, rad.
    pub joint_angles: Vec<f64>,
    /// rad/s
    pub joint_rates: Vec<f64>,
    /// Position of the first point (left gripper), mm.
    pub base_position: Vec2,
    /// Heading of the first segment, rad.
    pub base_heading: f64,
    pub base_heading_rate: f64,
}

impl ChainState {
    pub fn straight(n_segments: usize, base: Vec2, heading: f64) -> Self {
        Self {
            joint_angles: vec![0.0; n_segments - 1],
            joint_rates: vec![0.0; n_segments - 1],
            base_position: base,
            base_heading: heading,
            base_heading_rate: 0.0,
        }
    }

    pub fn n_segments(&self) -> usize {
        self.joint_angles.len() + 1
    }

    /// Segment headings, rad.
    pub fn headings(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_segments());
        let mut psi = self.base_heading;
        out.push(psi);
        for theta in &self.joint_angles {
            psi += theta;
            out.push(psi);
        }
        out
    }

    /// Segment endpoints `q_1 .. q_{n+1}` in world coordinates.
    pub fn points(&self, segment_length: f64) -> Vec<Vec2> {
        let mut out = Vec::with_capacity(self.n_segments() + 1);
        let mut q = self.base_position;
        out.push(q);
        for psi in self.headings() {
            let (s, c) = psi.sin_cos();
            q += Vec2::new(c, s) * segment_length;
            out.push(q);
        }
        out
    }

    pub fn centerline(&self, segment_length: f64) -> Centerline {
        Centerline::new(self.points(segment_length))
            .expect("rigid segments never produce coincident points")
    }

    fn max_rate(&self) -> f64 {
        self.joint_rates
            .iter()
            .chain(std::iter::once(&self.base_heading_rate))
            .fold(0.0f64, |m, r| if r.is_nan() { f64::INFINITY } else { m.max(r.abs()) })
    }
}

/// Result of [`Rod::settle`].
#[derive(Debug, Clone)]
pub struct Settled {
    pub state: ChainState,
    pub converged: bool,
    pub steps: usize,
}

/// Elastic and kinetic energy of a chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Energies {
    pub elastic: f64,
    pub kinetic: f64,
}

impl Energies {
    pub fn total(&self) -> f64 {
        self.elastic + self.kinetic
    }
}

/// The chain simulator for one set of [`RodParams`].
#[derive(Debug, Clone)]
pub struct Rod {
    params: RodParams,
}

/// Chain geometry in the frame anchored at the base point.
struct LocalFrame {
    /// Points `q_0 .. q_n` relative to the base.
    joints: Vec<Vec2>,
    /// Segment midpoints relative to the base.
    mids: Vec<Vec2>,
}

impl Rod {
    pub fn new(params: RodParams) -> Result<Self, RodError> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &RodParams {
        &self.params
    }

    fn check_endpoints(&self, left: Vec2, right: Vec2) -> Result<(), RodError> {
        let p = &self.params;
        let sep = (right - left).norm();
        let max = p.total_length * (1.0 + 1e-12);
        let err = RodError::InfeasibleEndpoints {
            separation: sep,
            min: p.min_separation(),
            max: p.total_length,
        };
        if !(sep > p.min_separation() && sep <= max) {
            return Err(err);
        }
        if p.end_clamp && !p.is_reachable(left, right, -1e-12 * p.total_length) {
            return Err(err);
        }
        Ok(())
    }

    /// Builds a chain between the grippers, buckled to the side given by
    /// `buckle_sign` (positive: to the left of the left-to-right axis).
    pub fn init_chain(
        &self,
        grippers: &GripperPair,
        buckle_sign: i8,
        rng_seed: u64,
    ) -> Result<ChainState, RodError> {
        let p = &self.params;
        let n = p.n_segments;
        let h = p.segment_length();
        let sign = if buckle_sign >= 0 { 1.0 } else { -1.0 };
        self.check_endpoints(grippers.left, grippers.right)?;

        let d = grippers.right - grippers.left;
        let sep = d.norm();
        let axis = d.y.atan2(d.x);

        if sep >= p.total_length * (1.0 - 1e-12) {
            let heading = if p.end_clamp { 0.0 } else { axis };
            return Ok(ChainState::straight(n, grippers.left, heading));
        }

        // symmetric bump whose chord lies on +x
        let profile = |i: usize| -> f64 {
            if p.end_clamp {
                (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).sin()
            } else {
                (std::f64::consts::PI * (i as f64 + 0.5) / n as f64).cos()
            }
        };
        let chord = |amp: f64| -> f64 {
            (0..n).map(|i| h * (amp * profile(i)).cos()).sum::<f64>()
        };
        let (mut lo, mut hi) = (0.0, if p.end_clamp { 2.0 } else { 1.5 });
        // a tighter separation than the profile can reach falls back to the
        // largest amplitude and lets the projection finish the job
        let target_chord = sep.max(chord(hi));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if chord(mid) > target_chord {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let amp = sign * 0.5 * (lo + hi);
        let mut headings: Vec<f64> = (0..n).map(|i| amp * profile(i)).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut state = ChainState::straight(n, grippers.left, 0.0);
        if !p.end_clamp {
            for psi in headings.iter_mut() {
                *psi += axis;
            }
        }
        state.base_heading = headings[0];
        for j in 1..n {
            let nudge = if p.end_clamp && j == n - 1 {
                0.0
            } else {
                sign * 1e-4 * rng.random::<f64>()
            };
            state.joint_angles[j - 1] = headings[j] - headings[j - 1] + nudge;
        }

        // walk the free end from the symmetric chord onto the real gripper
        let start = state.points(h)[n] - grippers.left;
        let goal = d;
        let stages = 16;
        let mut z = self.coords(&state);
        for s in 1..=stages {
            let t = s as f64 / stages as f64;
            let target = start + (goal - start) * t;
            z = self.project(z, target, None)?;
        }
        self.set_coords(&mut state, &z);
        Ok(state)
    }

    /// Advances the chain by `dt` (a whole number of physics substeps) while
    /// the grippers move with their stored velocities.
    pub fn step(
        &self,
        state: &ChainState,
        grippers: &GripperPair,
        surface: &SurfaceModel,
        dt: f64,
    ) -> Result<ChainState, RodError> {
        let pdt = self.params.physics_dt;
        let ratio = dt / pdt;
        let substeps = ratio.round();
        if !(substeps >= 1.0 && (ratio - substeps).abs() < 1e-9 * ratio.max(1.0)) {
            return Err(RodError::InvalidTimestep {
                dt,
                physics_dt: pdt,
            });
        }
        let substeps = substeps as usize;
        let mut st = state.clone();
        for k in 1..=substeps {
            let t = k as f64 * pdt;
            let left = grippers.left + grippers.left_vel * t;
            let right = grippers.right + grippers.right_vel * t;
            self.substep(&mut st, left, right, grippers.left_vel, surface)?;
        }
        Ok(st)
    }

    /// Steps with static grippers until the kinetic energy drops below
    /// `ke_tol` or `max_steps` physics substeps have elapsed.
    pub fn settle(
        &self,
        state: &ChainState,
        grippers: &GripperPair,
        surface: &SurfaceModel,
        ke_tol: f64,
        max_steps: usize,
    ) -> Result<Settled, RodError> {
        let still = GripperPair::at_rest(grippers.left, grippers.right);
        let mut st = state.clone();
        for k in 1..=max_steps {
            self.substep(&mut st, still.left, still.right, Vec2::zeros(), surface)?;
            if self.energies(&st).kinetic < ke_tol {
                return Ok(Settled {
                    state: st,
                    converged: true,
                    steps: k,
                });
            }
        }
        Ok(Settled {
            state: st,
            converged: false,
            steps: max_steps,
        })
    }

    pub fn energies(&self, state: &ChainState) -> Energies {
        let p = &self.params;
        let elastic = 0.5 * p.joint_stiffness * state.joint_angles.iter().map(|t| t * t).sum::<f64>();
        let frame = self.local_frame(state);
        let mass = self.mass_matrix(&frame);
        let zd = self.rates(state);
        let kinetic = 0.5 * zd.dot(&(&mass * &zd));
        Energies {
            elastic,
            kinetic: kinetic.max(0.0),
        }
    }

    fn coords(&self, state: &ChainState) -> DVector<f64> {
        let nc = self.params.n_coords();
        DVector::from_fn(nc, |k, _| match self.params.joint_of(k) {
            0 => state.base_heading,
            j => state.joint_angles[j - 1],
        })
    }

    fn rates(&self, state: &ChainState) -> DVector<f64> {
        let nc = self.params.n_coords();
        DVector::from_fn(nc, |k, _| match self.params.joint_of(k) {
            0 => state.base_heading_rate,
            j => state.joint_rates[j - 1],
        })
    }

    fn set_coords(&self, state: &mut ChainState, z: &DVector<f64>) {
        for (k, v) in z.iter().enumerate() {
            match self.params.joint_of(k) {
                0 => state.base_heading = *v,
                j => state.joint_angles[j - 1] = *v,
            }
        }
    }

    fn set_rates(&self, state: &mut ChainState, zd: &DVector<f64>) {
        for (k, v) in zd.iter().enumerate() {
            match self.params.joint_of(k) {
                0 => state.base_heading_rate = *v,
                j => state.joint_rates[j - 1] = *v,
            }
        }
    }

    fn local_frame(&self, state: &ChainState) -> LocalFrame {
        let h = self.params.segment_length();
        let mut joints = Vec::with_capacity(state.n_segments() + 1);
        let mut mids = Vec::with_capacity(state.n_segments());
        let mut q = Vec2::zeros();
        joints.push(q);
        for psi in state.headings() {
            let (s, c) = psi.sin_cos();
            let step = Vec2::new(c, s) * h;
            mids.push(q + step * 0.5);
            q += step;
            joints.push(q);
        }
        LocalFrame { joints, mids }
    }

    /// Free-end position relative to the base for coordinates `z`.
    fn local_points(&self, z: &DVector<f64>) -> Vec<Vec2> {
        let p = &self.params;
        let h = p.segment_length();
        let mut psi = 0.0;
        let mut q = Vec2::zeros();
        let mut out = Vec::with_capacity(p.n_segments + 1);
        out.push(q);
        let offset = if p.end_clamp { 1 } else { 0 };
        for i in 0..p.n_segments {
            // coordinate driving joint i (joint 0 is the base heading)
            if i >= offset {
                psi += z[i - offset];
            }
            let (s, c) = psi.sin_cos();
            q += Vec2::new(c, s) * h;
            out.push(q);
        }
        out
    }

    /// Mass matrix of the segments (uniform rods) in generalized coordinates.
    fn mass_matrix(&self, frame: &LocalFrame) -> DMatrix<f64> {
        let p = &self.params;
        let n = p.n_segments;
        let h = p.segment_length();
        let m = p.segment_mass;
        // suffix sums over segments i >= s
        let mut c0 = vec![0.0; n + 1];
        let mut c1 = vec![Vec2::zeros(); n + 1];
        let mut c2 = vec![0.0; n + 1];
        for i in (0..n).rev() {
            let pm = frame.mids[i];
            c0[i] = c0[i + 1] + 1.0;
            c1[i] = c1[i + 1] + pm;
            c2[i] = c2[i + 1] + pm.norm_squared();
        }
        let nc = p.n_coords();
        let inertia = h * h / 12.0;
        let mut mass = DMatrix::zeros(nc, nc);
        for a in 0..nc {
            let ja = p.joint_of(a);
            let qa = frame.joints[ja];
            for b in a..nc {
                let jb = p.joint_of(b);
                let qb = frame.joints[jb];
                let s = ja.max(jb);
                let v = m * (c2[s] - c1[s].dot(&(qa + qb)) + c0[s] * (qa.dot(&qb) + inertia));
                mass[(a, b)] = v;
                mass[(b, a)] = v;
            }
        }
        mass
    }

    /// Generalized friction forces for the current rates.
    fn friction_forces(
        &self,
        frame: &LocalFrame,
        zd: &DVector<f64>,
        base_vel: Vec2,
        surface: &SurfaceModel,
    ) -> Option<DVector<f64>> {
        let limit = surface.force_limit();
        if limit == 0.0 {
            return None;
        }
        let p = &self.params;
        let n = p.n_segments;
        let nc = p.n_coords();
        let perp = |v: Vec2| Vec2::new(-v.y, v.x);
        let cross = |a: Vec2, b: Vec2| a.x * b.y - a.y * b.x;

        // angular rate and moment sums of all coordinates acting on segment i
        let mut omega = 0.0;
        let mut moment = Vec2::zeros();
        let mut next = 0;
        let mut forces = Vec::with_capacity(n);
        for i in 0..n {
            while next < nc && p.joint_of(next) <= i {
                omega += zd[next];
                moment += frame.joints[p.joint_of(next)] * zd[next];
                next += 1;
            }
            let v = base_vel + perp(frame.mids[i] * omega - moment);
            let speed = v.norm();
            forces.push(-v * (limit / speed.max(surface.stiction_velocity)));
        }
        let mut q = DVector::zeros(nc);
        let mut f_sum = Vec2::zeros();
        let mut torque_sum = 0.0;
        let mut k = nc;
        for i in (0..n).rev() {
            f_sum += forces[i];
            torque_sum += cross(frame.mids[i], forces[i]);
            while k > 0 && p.joint_of(k - 1) == i {
                k -= 1;
                q[k] = torque_sum - cross(frame.joints[i], f_sum);
            }
        }
        Some(q)
    }

    fn substep(
        &self,
        state: &mut ChainState,
        left: Vec2,
        right: Vec2,
        base_vel: Vec2,
        surface: &SurfaceModel,
    ) -> Result<(), RodError> {
        let p = &self.params;
        let dt = p.physics_dt;
        let nc = p.n_coords();
        let z = self.coords(state);
        let zd = self.rates(state);
        let frame = self.local_frame(state);
        let mass = self.mass_matrix(&frame);

        let mut rhs = &mass * &zd;
        let mut system = mass;
        for k in 0..nc {
            if p.joint_of(k) > 0 {
                system[(k, k)] += dt * p.joint_damping + dt * dt * p.joint_stiffness;
                rhs[k] -= dt * p.joint_stiffness * z[k];
            }
        }
        if let Some(q) = self.friction_forces(&frame, &zd, base_vel, surface) {
            rhs += q * dt;
        }
        let chol = system
            .cholesky()
            .ok_or(RodError::NumericalDivergence { rate: f64::NAN })?;
        let v_pred = chol.solve(&rhs);
        let z_pred = &z + &v_pred * dt;
        let z_new = self.project(z_pred, right - left, Some(&chol))?;
        let zd_new = (&z_new - &z) / dt;

        self.set_coords(state, &z_new);
        self.set_rates(state, &zd_new);
        state.base_position = left;
        if !p.end_clamp {
            // keep the heading bounded so long rollouts stay exact
            let wrapped = state.base_heading.rem_euclid(std::f64::consts::TAU);
            if wrapped != state.base_heading && state.base_heading.abs() > 1e3 {
                state.base_heading = wrapped;
            }
        }
        let rate = state.max_rate();
        if !(rate <= p.max_joint_rate) {
            return Err(RodError::NumericalDivergence { rate });
        }
        Ok(())
    }

    /// Gauss-Newton projection of `z` onto the endpoint constraint
    /// `q_n(z) = target` (and zero end heading when clamped). Corrections
    /// are taken in the metric of `metric` (identity when `None`).
    fn project(
        &self,
        mut z: DVector<f64>,
        target: Vec2,
        metric: Option<&nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    ) -> Result<DVector<f64>, RodError> {
        let p = &self.params;
        let nc = p.n_coords();
        let nrows = if p.end_clamp { 3 } else { 2 };
        let perp = |v: Vec2| Vec2::new(-v.y, v.x);
        let mut residual = f64::INFINITY;
        for _ in 0..PROJECTION_MAX_ITERS {
            let pts = self.local_points(&z);
            let end = pts[p.n_segments];
            let mut g = DVector::zeros(nrows);
            g[0] = end.x - target.x;
            g[1] = end.y - target.y;
            if p.end_clamp {
                g[2] = z.sum();
            }
            residual = g.amax();
            if residual < PROJECTION_TOL {
                return Ok(z);
            }
            let mut jt = DMatrix::zeros(nc, nrows);
            for k in 0..nc {
                let lever = perp(end - pts[p.joint_of(k)]);
                jt[(k, 0)] = lever.x;
                jt[(k, 1)] = lever.y;
                if p.end_clamp {
                    jt[(k, 2)] = 1.0;
                }
            }
            let y = match metric {
                Some(chol) => chol.solve(&jt),
                None => jt.clone(),
            };
            let schur = jt.transpose() * &y;
            let mu = schur
                .lu()
                .solve(&g)
                .ok_or(RodError::ProjectionFailed { residual })?;
            let dz = y * mu;
            z -= dz;
            if !z.iter().all(|v| v.is_finite()) {
                return Err(RodError::ProjectionFailed { residual });
            }
        }
        if residual < ENDPOINT_TOL {
            Ok(z)
        } else {
            Err(RodError::ProjectionFailed { residual })
        }
    }
}
