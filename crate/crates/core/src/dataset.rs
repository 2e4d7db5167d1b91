//! Settled fiber configurations used as initial and target shapes.
//!
//! Records are generated by sweeping both gripper positions over a grid,
//! keeping pairs whose separation lies in `[0.5 l, 0.9 l]`, and settling the
//! frictionless chain on both buckle branches.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{bending_energy, resample, Centerline, Vec2};
use crate::rod::{ChainState, GripperPair, Rod, RodError, RodParams, SurfaceModel};
use crate::seeds::{seed_for, Stream};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "fiberloop-dataset";

pub const MIN_SEPARATION_FRAC: f64 = 0.5;
pub const MAX_SEPARATION_FRAC: f64 = 0.9;

/// Settle budget used for every record.
pub const SETTLE_KE_TOL: f64 = 1e-13;
pub const SETTLE_MAX_STEPS: usize = 20_000;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported dataset format version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: String },
    #[error("malformed dataset at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("record {id} violates invariant: {reason}")]
    InvariantViolation { id: usize, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Rod(#[from] RodError),
}

/// Inclusive range `min, min + step, ..., <= max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisRange {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl AxisRange {
    pub fn new(min: f64, max: f64, step: f64) -> Self {
        Self { min, max, step }
    }

    pub fn fixed(v: f64) -> Self {
        Self::new(v, v, 1.0)
    }

    pub fn values(&self) -> Vec<f64> {
        if !(self.step > 0.0) || self.max < self.min {
            return vec![self.min];
        }
        let n = ((self.max - self.min) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.min + self.step * i as f64).collect()
    }
}

/// Sweep over left and right gripper positions.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub left_x: AxisRange,
    pub left_y: AxisRange,
    pub right_x: AxisRange,
    pub right_y: AxisRange,
}

impl GridSpec {
    /// Default sweep for a rod of length `l`, centered on the origin.
    pub fn default_for_length(l: f64) -> Self {
        let s = l / 15.0;
        Self {
            left_x: AxisRange::new(-7.0 * s, -3.0 * s, 0.5 * s),
            left_y: AxisRange::new(-2.0 * s, 2.0 * s, 1.0 * s),
            right_x: AxisRange::new(3.0 * s, 7.0 * s, 0.5 * s),
            right_y: AxisRange::new(-2.0 * s, 2.0 * s, 0.5 * s),
        }
    }

    pub fn candidates(&self) -> Vec<(Vec2, Vec2)> {
        let mut out = Vec::new();
        let (lx, ly) = (self.left_x.values(), self.left_y.values());
        let (rx, ry) = (self.right_x.values(), self.right_y.values());
        for &a in &lx {
            for &b in &ly {
                for &c in &rx {
                    for &d in &ry {
                        out.push((Vec2::new(a, b), Vec2::new(c, d)));
                    }
                }
            }
        }
        out
    }
}

/// Whether a gripper separation passes the dataset filter (inclusive).
pub fn separation_ok(separation: f64, total_length: f64) -> bool {
    let tol = 1e-9 * total_length;
    separation >= MIN_SEPARATION_FRAC * total_length - tol
        && separation <= MAX_SEPARATION_FRAC * total_length + tol
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigRecord {
    pub id: usize,
    pub left: Vec2,
    pub right: Vec2,
    pub buckle_sign: i8,
    /// Settled shape resampled to the state point count.
    pub centerline: Centerline,
    pub separation: f64,
    /// Bending energy of the full settled chain, mm^-2.
    pub bend_energy: f64,
    /// Settled chain in reduced coordinates, so episodes restart exactly.
    pub base_heading: f64,
    pub joint_angles: Vec<f64>,
}

impl ConfigRecord {
    pub fn grippers(&self) -> GripperPair {
        GripperPair::at_rest(self.left, self.right)
    }

    /// The stored settled chain, at rest.
    pub fn chain_state(&self) -> ChainState {
        let n = self.joint_angles.len() + 1;
        let mut st = ChainState::straight(n, self.left, self.base_heading);
        st.joint_angles.clone_from(&self.joint_angles);
        st
    }

    fn check(&self, params: &RodParams, state_points: usize) -> Result<(), DatasetError> {
        let fail = |reason: String| DatasetError::InvariantViolation {
            id: self.id,
            reason,
        };
        let sep = (self.right - self.left).norm();
        if !separation_ok(sep, params.total_length) {
            return Err(fail(format!(
                "separation {sep} outside [{}, {}]",
                MIN_SEPARATION_FRAC * params.total_length,
                MAX_SEPARATION_FRAC * params.total_length
            )));
        }
        if (sep - self.separation).abs() > 1e-9 {
            return Err(fail(format!("stored separation {} != {sep}", self.separation)));
        }
        if self.centerline.len() != state_points {
            return Err(fail(format!(
                "centerline has {} points, expected {state_points}",
                self.centerline.len()
            )));
        }
        if (self.centerline.first() - self.left).norm() > 1e-6
            || (self.centerline.last() - self.right).norm() > 1e-6
        {
            return Err(fail("centerline endpoints do not match grippers".into()));
        }
        if self.joint_angles.len() + 1 != params.n_segments {
            return Err(fail(format!(
                "{} joint angles for {} segments",
                self.joint_angles.len(),
                params.n_segments
            )));
        }
        if self.buckle_sign != 1 && self.buckle_sign != -1 {
            return Err(fail(format!("buckle sign {}", self.buckle_sign)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rod_params: RodParams,
    pub state_points: usize,
    pub records: Vec<ConfigRecord>,
}

/// Settles one configuration and packs it into a record.
pub fn settle_record(
    rod: &Rod,
    id: usize,
    left: Vec2,
    right: Vec2,
    buckle_sign: i8,
    state_points: usize,
    seed: u64,
) -> Result<ConfigRecord, DatasetError> {
    let grippers = GripperPair::at_rest(left, right);
    let init = rod.init_chain(&grippers, buckle_sign, seed)?;
    let settled = rod.settle(
        &init,
        &grippers,
        &SurfaceModel::FRICTIONLESS,
        SETTLE_KE_TOL,
        SETTLE_MAX_STEPS,
    )?;
    let h = rod.params().segment_length();
    let full = settled.state.centerline(h);
    let centerline = resample(&full, state_points).expect("chain has positive length");
    Ok(ConfigRecord {
        id,
        left,
        right,
        buckle_sign,
        centerline,
        separation: (right - left).norm(),
        bend_energy: bending_energy(&full).expect("chain has >= 3 points"),
        base_heading: settled.state.base_heading,
        joint_angles: settled.state.joint_angles,
    })
}

impl Dataset {
    /// Sweeps the grid and settles every admissible pair on both branches.
    pub fn generate(
        grid: &GridSpec,
        rod_params: &RodParams,
        state_points: usize,
        seed: u64,
    ) -> Result<Self, DatasetError> {
        let rod = Rod::new(rod_params.clone())?;
        let l = rod_params.total_length;
        let jobs: Vec<(Vec2, Vec2, i8)> = grid
            .candidates()
            .into_iter()
            .filter(|(a, b)| separation_ok((b - a).norm(), l) && rod_params.is_reachable(*a, *b, 0.0))
            .flat_map(|(a, b)| [(a, b, 1i8), (a, b, -1i8)])
            .collect();
        let records = jobs
            .par_iter()
            .enumerate()
            .map(|(id, &(a, b, sign))| {
                settle_record(
                    &rod,
                    id,
                    a,
                    b,
                    sign,
                    state_points,
                    seed_for(seed, Stream::Dataset, id as u64),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            rod_params: rod_params.clone(),
            state_points,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Two independent uniform draws; they may coincide.
    pub fn sample_pair<R: Rng>(
        &self,
        rng: &mut R,
    ) -> Result<(&ConfigRecord, &ConfigRecord), DatasetError> {
        if self.records.is_empty() {
            return Err(DatasetError::EmptyDataset);
        }
        let n = self.records.len();
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        Ok((&self.records[a], &self.records[b]))
    }

    /// Splits off roughly `fraction` of the records (chosen by `seed`) as a
    /// held-out set. Returns `(train, holdout)`.
    pub fn split(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut rng = crate::seeds::rng_for(seed, Stream::Holdout, 0);
        let (mut train, mut hold) = (Vec::new(), Vec::new());
        for r in &self.records {
            if rng.random::<f64>() < fraction {
                hold.push(r.clone());
            } else {
                train.push(r.clone());
            }
        }
        let make = |records| Dataset {
            rod_params: self.rod_params.clone(),
            state_points: self.state_points,
            records,
        };
        (make(train), make(hold))
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(self.to_text().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let p = &self.rod_params;
        let mut out = String::new();
        writeln!(
            out,
            "{MAGIC} v{FORMAT_VERSION} n_segments={} total_length={} joint_stiffness={} \
             joint_damping={} segment_mass={} physics_dt={} end_clamp={} max_joint_rate={} \
             state_points={} records={}",
            p.n_segments,
            p.total_length,
            p.joint_stiffness,
            p.joint_damping,
            p.segment_mass,
            p.physics_dt,
            p.end_clamp,
            p.max_joint_rate,
            self.state_points,
            self.records.len()
        )
        .unwrap();
        for r in &self.records {
            write!(
                out,
                "{} {} {} {} {} {} {} {} {}",
                r.id,
                r.buckle_sign,
                r.left.x,
                r.left.y,
                r.right.x,
                r.right.y,
                r.separation,
                r.bend_energy,
                r.base_heading
            )
            .unwrap();
            out.push_str(" |");
            for v in r.centerline.to_flat() {
                write!(out, " {v}").unwrap();
            }
            out.push_str(" |");
            for v in &r.joint_angles {
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header = lines.next().ok_or(DatasetError::Parse {
            line: 1,
            reason: "missing header".into(),
        })??;
        let (rod_params, state_points, count) = parse_header(&header)?;
        let mut records = Vec::with_capacity(count);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = parse_record(&line, i + 2)?;
            rec.check(&rod_params, state_points)?;
            records.push(rec);
        }
        if records.len() != count {
            return Err(DatasetError::Parse {
                line: 1,
                reason: format!("header declares {count} records, found {}", records.len()),
            });
        }
        Ok(Self {
            rod_params,
            state_points,
            records,
        })
    }
}

fn parse_header(header: &str) -> Result<(RodParams, usize, usize), DatasetError> {
    let bad = |reason: String| DatasetError::Parse { line: 1, reason };
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(bad("not a fiberloop dataset".into()));
    }
    let version = parts.next().unwrap_or("");
    if version != format!("v{FORMAT_VERSION}") {
        return Err(DatasetError::VersionMismatch {
            found: version.to_string(),
        });
    }
    let mut kv = std::collections::HashMap::new();
    for p in parts {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got {p:?}")))?;
        kv.insert(k, v);
    }
    let get = |k: &str| -> Result<&str, DatasetError> {
        kv.get(k).copied().ok_or_else(|| bad(format!("missing header key {k}")))
    };
    let num = |k: &str| -> Result<f64, DatasetError> {
        get(k)?.parse().map_err(|_| bad(format!("bad value for {k}")))
    };
    let int = |k: &str| -> Result<usize, DatasetError> {
        get(k)?.parse().map_err(|_| bad(format!("bad value for {k}")))
    };
    let params = RodParams {
        n_segments: int("n_segments")?,
        total_length: num("total_length")?,
        joint_stiffness: num("joint_stiffness")?,
        joint_damping: num("joint_damping")?,
        segment_mass: num("segment_mass")?,
        physics_dt: num("physics_dt")?,
        end_clamp: get("end_clamp")?
            .parse()
            .map_err(|_| bad("bad value for end_clamp".into()))?,
        max_joint_rate: num("max_joint_rate")?,
    };
    params
        .validate()
        .map_err(|e| bad(format!("header rod parameters: {e}")))?;
    Ok((params, int("state_points")?, int("records")?))
}

fn parse_record(line: &str, lineno: usize) -> Result<ConfigRecord, DatasetError> {
    let bad = |reason: String| DatasetError::Parse {
        line: lineno,
        reason,
    };
    let mut sections = line.split('|');
    let head: Vec<&str> = sections.next().unwrap_or("").split_whitespace().collect();
    let curve = sections.next().ok_or_else(|| bad("missing centerline".into()))?;
    let joints = sections.next().ok_or_else(|| bad("missing joint angles".into()))?;
    if head.len() != 9 {
        return Err(bad(format!("expected 9 leading fields, got {}", head.len())));
    }
    let f = |i: usize| -> Result<f64, DatasetError> {
        head[i].parse().map_err(|_| bad(format!("bad number {:?}", head[i])))
    };
    let floats = |s: &str| -> Result<Vec<f64>, DatasetError> {
        s.split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(format!("bad number {t:?}"))))
            .collect()
    };
    let id: usize = head[0].parse().map_err(|_| bad("bad id".into()))?;
    let centerline = Centerline::from_flat(&floats(curve)?).map_err(|e| {
        DatasetError::InvariantViolation {
            id,
            reason: e.to_string(),
        }
    })?;
    Ok(ConfigRecord {
        id,
        buckle_sign: head[1].parse().map_err(|_| bad("bad buckle sign".into()))?,
        left: Vec2::new(f(2)?, f(3)?),
        right: Vec2::new(f(4)?, f(5)?),
        separation: f(6)?,
        bend_energy: f(7)?,
        base_heading: f(8)?,
        centerline,
        joint_angles: floats(joints)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> RodParams {
        RodParams::new(1.0, 0.2)
    }

    fn small_grid() -> GridSpec {
        GridSpec {
            left_x: AxisRange::fixed(-5.0),
            left_y: AxisRange::new(-1.0, 1.0, 1.0),
            right_x: AxisRange::new(4.0, 6.0, 1.0),
            right_y: AxisRange::fixed(0.0),
        }
    }

    #[test]
    fn separation_filter_bounds() {
        assert!(!separation_ok(7.0, 15.0));
        assert!(separation_ok(7.5, 15.0));
        assert!(separation_ok(13.5, 15.0));
        assert!(!separation_ok(13.6, 15.0));
    }

    #[test]
    fn coincident_grippers_give_empty_dataset() {
        let grid = GridSpec {
            left_x: AxisRange::fixed(0.0),
            left_y: AxisRange::fixed(0.0),
            right_x: AxisRange::fixed(0.0),
            right_y: AxisRange::fixed(0.0),
        };
        let ds = Dataset::generate(&grid, &params(), 10, 0).unwrap();
        assert!(ds.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(ds.sample_pair(&mut rng), Err(DatasetError::EmptyDataset)));
    }

    #[test]
    fn generated_records_satisfy_invariants() {
        let p = params();
        let ds = Dataset::generate(&small_grid(), &p, 10, 3).unwrap();
        // 3 left x 3 right positions, all within [7.5, 13.5], both signs
        assert_eq!(ds.len(), 18);
        for r in &ds.records {
            r.check(&p, 10).unwrap();
        }
        let again = Dataset::generate(&small_grid(), &p, 10, 3).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn singleton_dataset_samples_itself() {
        let grid = GridSpec {
            left_x: AxisRange::fixed(-5.0),
            left_y: AxisRange::fixed(0.0),
            right_x: AxisRange::fixed(5.0),
            right_y: AxisRange::fixed(0.0),
        };
        let mut ds = Dataset::generate(&grid, &params(), 10, 0).unwrap();
        ds.records.truncate(1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let (a, b) = ds.sample_pair(&mut rng).unwrap();
            assert_eq!(a.id, b.id);
        }
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let ds = Dataset::generate(&small_grid(), &params(), 10, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.txt");
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_text(), ds.to_text());

        let text = ds.to_text().replacen(" v1 ", " v9 ", 1);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            Dataset::load(&path),
            Err(DatasetError::VersionMismatch { .. })
        ));

        // push record 2's right gripper beyond 0.9 l
        let mut bad = ds.clone();
        bad.records[2].right.x = 12.0;
        bad.records[2].separation = (bad.records[2].right - bad.records[2].left).norm();
        std::fs::write(&path, bad.to_text()).unwrap();
        match Dataset::load(&path) {
            Err(DatasetError::InvariantViolation { id, .. }) => assert_eq!(id, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn hundred_records() -> Dataset {
        let mut ds = Dataset::generate(&small_grid(), &params(), 10, 0).unwrap();
        let proto = ds.records[0].clone();
        ds.records = (0..100).map(|id| ConfigRecord { id, ..proto.clone() }).collect();
        ds
    }

    #[test]
    fn pair_draws_are_uniform() {
        let ds = hundred_records();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let (mut init, mut target) = (vec![0usize; 100], vec![0usize; 100]);
        for _ in 0..draws {
            let (a, b) = ds.sample_pair(&mut rng).unwrap();
            init[a.id] += 1;
            target[b.id] += 1;
        }
        let p = 0.01;
        let expected = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for counts in [&init, &target] {
            let mut chi2 = 0.0;
            for &c in counts.iter() {
                assert!((c as f64 - expected).abs() < 5.0 * sigma, "{c}");
                chi2 += (c as f64 - expected).powi(2) / expected;
            }
            // 99 degrees of freedom: mean 99, std sqrt(198)
            assert!(chi2 < 99.0 + 5.0 * 198f64.sqrt(), "chi2 = {chi2}");
        }
    }

    #[test]
    fn pair_sequence_is_reproducible() {
        let ds = hundred_records();
        let seq = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| {
                    let (a, b) = ds.sample_pair(&mut rng).unwrap();
                    (a.id, b.id)
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(seq(5), seq(5));
        assert_ne!(seq(5), seq(6));
    }

    #[test]
    fn split_partitions_records() {
        let ds = hundred_records();
        let (train, hold) = ds.split(0.2, 9);
        assert_eq!(train.len() + hold.len(), 100);
        assert!(!hold.is_empty() && !train.is_empty());
        let mut ids: Vec<usize> = train.records.iter().chain(&hold.records).map(|r| r.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..100).collect::<Vec<_>>());
        assert_eq!(ds.split(0.2, 9), (train, hold));
    }
}
