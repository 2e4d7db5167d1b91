//! Planar centerlines, arc-length resampling, projective transforms and
//! shape metrics.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;

/// Minimum spacing between consecutive centerline points, mm.
pub const MIN_SPACING: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate line: total arc length {0:e} mm")]
    DegenerateLine(f64),
    #[error("centerline needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("points {0} and {1} coincide")]
    CoincidentPoints(usize, usize),
    #[error("point count mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("point {0} maps to infinity")]
    PointAtInfinity(usize),
    #[error("homography is singular (det = {0:e})")]
    SingularHomography(f64),
}

/// Ordered planar point sequence along the fiber, in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Centerline {
    points: Vec<Vec2>,
}

impl Centerline {
    pub fn new(points: Vec<Vec2>) -> Result<Self, GeometryError> {
        if points.len() < 2 {
            return Err(GeometryError::TooFewPoints {
                needed: 2,
                got: points.len(),
            });
        }
        for (i, p) in points.iter().enumerate() {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(GeometryError::NonFinite(i));
            }
        }
        for i in 1..points.len() {
            if (points[i] - points[i - 1]).norm() <= MIN_SPACING {
                return Err(GeometryError::CoincidentPoints(i - 1, i));
            }
        }
        Ok(Self { points })
    }

    /// Builds a centerline from interleaved `[x0, y0, x1, y1, ...]` coordinates.
    pub fn from_flat(coords: &[f64]) -> Result<Self, GeometryError> {
        if coords.len() % 2 != 0 {
            return Err(GeometryError::NonFinite(coords.len() / 2));
        }
        Self::new(
            coords
                .chunks_exact(2)
                .map(|c| Vec2::new(c[0], c[1]))
                .collect(),
        )
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first(&self) -> Vec2 {
        self.points[0]
    }

    pub fn last(&self) -> Vec2 {
        self.points[self.points.len() - 1]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn arc_length(&self) -> f64 {
        self.points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    /// Cumulative arc length at every vertex, starting at zero.
    pub fn cumulative_lengths(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.points.len());
        out.push(0.0);
        for w in self.points.windows(2) {
            acc += (w[1] - w[0]).norm();
            out.push(acc);
        }
        out
    }

    pub fn translated(&self, offset: Vec2) -> Self {
        Self {
            points: self.points.iter().map(|p| p + offset).collect(),
        }
    }

    /// Applies `p -> rotation * p + offset` to every point.
    pub fn rigid_transformed(&self, angle: f64, offset: Vec2) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            points: self
                .points
                .iter()
                .map(|p| Vec2::new(c * p.x - s * p.y, s * p.x + c * p.y) + offset)
                .collect(),
        }
    }
}

/// Resamples `line` to `m` points at uniform arc-length spacing.
///
/// The first and last input points are copied verbatim.
pub fn resample(line: &Centerline, m: usize) -> Result<Centerline, GeometryError> {
    if m < 2 {
        return Err(GeometryError::TooFewPoints { needed: 2, got: m });
    }
    let cum = line.cumulative_lengths();
    let total = cum[cum.len() - 1];
    if total < 1e-9 {
        return Err(GeometryError::DegenerateLine(total));
    }
    let pts = line.points();
    let mut out = Vec::with_capacity(m);
    out.push(pts[0]);
    let mut seg = 0;
    for k in 1..m - 1 {
        let s = total * k as f64 / (m - 1) as f64;
        while seg + 2 < cum.len() && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = ((s - cum[seg]) / len).clamp(0.0, 1.0);
        out.push(pts[seg] + (pts[seg + 1] - pts[seg]) * t);
    }
    out.push(pts[pts.len() - 1]);
    Ok(Centerline { points: out })
}

/// Projective transform of the plane, stored with `h[(2, 2)] == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    matrix: Matrix3<f64>,
}

impl Homography {
    pub fn new(matrix: Matrix3<f64>) -> Result<Self, GeometryError> {
        let scale = matrix[(2, 2)];
        if scale.abs() < 1e-12 || !matrix.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::SingularHomography(matrix.determinant()));
        }
        let matrix = matrix / scale;
        let det = matrix.determinant();
        if det.abs() <= 1e-12 {
            return Err(GeometryError::SingularHomography(det));
        }
        Ok(Self { matrix })
    }

    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            matrix: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    /// `self.compose(other)` applies `other` first, then `self`.
    pub fn compose(&self, other: &Homography) -> Result<Homography, GeometryError> {
        Homography::new(self.matrix * other.matrix)
    }

    pub fn apply_point(&self, p: Vec2) -> Option<Vec2> {
        let v = self.matrix * Vector3::new(p.x, p.y, 1.0);
        if v.z.abs() < 1e-12 {
            None
        } else {
            Some(Vec2::new(v.x / v.z, v.y / v.z))
        }
    }
}

pub fn apply_homography(h: &Homography, line: &Centerline) -> Result<Centerline, GeometryError> {
    let points = line
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| h.apply_point(*p).ok_or(GeometryError::PointAtInfinity(i)))
        .collect::<Result<Vec<_>, _>>()?;
    Centerline::new(points)
}

/// Point-wise deviation between two equally sampled centerlines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeError {
    /// Root-mean-square point distance, mm.
    pub e_mean: f64,
    /// Largest point distance, mm.
    pub e_max: f64,
    /// `(e_mean^2 + e_max^2) / 2`, mm^2.
    pub epsilon: f64,
}

impl ShapeError {
    pub const ZERO: ShapeError = ShapeError {
        e_mean: 0.0,
        e_max: 0.0,
        epsilon: 0.0,
    };
}

pub fn shape_error(current: &Centerline, target: &Centerline) -> Result<ShapeError, GeometryError> {
    shape_error_points(current.points(), target.points())
}

pub fn shape_error_points(current: &[Vec2], target: &[Vec2]) -> Result<ShapeError, GeometryError> {
    if current.len() != target.len() {
        return Err(GeometryError::LengthMismatch(current.len(), target.len()));
    }
    if current.is_empty() {
        return Ok(ShapeError::ZERO);
    }
    let mut sum_sq = 0.0;
    let mut max_sq: f64 = 0.0;
    for (a, b) in current.iter().zip(target) {
        let d2 = (a - b).norm_squared();
        sum_sq += d2;
        max_sq = max_sq.max(d2);
    }
    let mean_sq = sum_sq / current.len() as f64;
    // the RMS can exceed the max by an ulp when all distances are equal
    let e_max = max_sq.sqrt();
    let e_mean = mean_sq.sqrt().min(e_max);
    Ok(ShapeError {
        e_mean,
        e_max,
        epsilon: 0.5 * (mean_sq + max_sq),
    })
}

/// Arc-length-averaged squared curvature `(1/L) sum kappa_i^2 ds_i`, in mm^-2.
///
/// Curvature at interior vertex `i` is the turning angle divided by the mean
/// of the two adjacent segment lengths.
pub fn bending_energy(line: &Centerline) -> Result<f64, GeometryError> {
    let pts = line.points();
    if pts.len() < 3 {
        return Err(GeometryError::TooFewPoints {
            needed: 3,
            got: pts.len(),
        });
    }
    let total = line.arc_length();
    if total < 1e-9 {
        return Err(GeometryError::DegenerateLine(total));
    }
    let mut acc = 0.0;
    for w in pts.windows(3) {
        let a = w[1] - w[0];
        let b = w[2] - w[1];
        let turn = (a.x * b.y - a.y * b.x).atan2(a.dot(&b));
        let ds = 0.5 * (a.norm() + b.norm());
        let kappa = turn / ds;
        acc += kappa * kappa * ds;
    }
    Ok(acc / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn line(pts: &[(f64, f64)]) -> Centerline {
        Centerline::new(pts.iter().map(|&(x, y)| Vec2::new(x, y)).collect()).unwrap()
    }

    fn arc(radius: f64, n: usize, sweep: f64) -> Centerline {
        Centerline::new(
            (0..n)
                .map(|i| {
                    let t = sweep * i as f64 / (n - 1) as f64;
                    Vec2::new(radius * t.cos(), radius * t.sin())
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn resample_straight_segment() {
        let out = resample(&line(&[(0.0, 0.0), (10.0, 0.0)]), 5).unwrap();
        let xs: Vec<f64> = out.points().iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![0.0, 2.5, 5.0, 7.5, 10.0]);
    }

    #[test]
    fn resample_l_shape_walks_arc_length() {
        let out = resample(&line(&[(0.0, 0.0), (3.0, 0.0), (3.0, 4.0)]), 3).unwrap();
        let mid = out.points()[1];
        assert!((mid - Vec2::new(3.0, 0.5)).norm() < 1e-12);
        assert_eq!(out.first(), Vec2::new(0.0, 0.0));
        assert_eq!(out.last(), Vec2::new(3.0, 4.0));
    }

    #[test]
    fn resample_uniform_input_is_idempotent() {
        let input = arc(2.0, 17, 1.3);
        let out = resample(&input, 17).unwrap();
        for (a, b) in input.points().iter().zip(out.points()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn resample_rejects_bad_inputs() {
        assert!(matches!(
            resample(&line(&[(0.0, 0.0), (1.0, 0.0)]), 1),
            Err(GeometryError::TooFewPoints { .. })
        ));
        assert!(Centerline::new(vec![Vec2::new(0.0, 0.0), Vec2::new(0.0, 0.0)]).is_err());
        assert!(Centerline::new(vec![Vec2::new(f64::NAN, 0.0), Vec2::new(1.0, 0.0)]).is_err());
    }

    #[test]
    fn homography_identity_and_translation() {
        let l = line(&[(0.0, 1.0), (2.0, 3.0), (4.0, -1.0)]);
        assert_eq!(apply_homography(&Homography::identity(), &l).unwrap(), l);
        let shifted = apply_homography(&Homography::translation(1.5, -2.0), &l).unwrap();
        for (a, b) in l.points().iter().zip(shifted.points()) {
            assert!((b - a - Vec2::new(1.5, -2.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn homography_normalizes_and_rejects_singular() {
        let h = Homography::new(Matrix3::identity() * 4.0).unwrap();
        assert_eq!(h.matrix()[(2, 2)], 1.0);
        assert!(Homography::new(Matrix3::zeros()).is_err());
        let rank2 = Matrix3::new(1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 1.0);
        assert!(matches!(
            Homography::new(rank2),
            Err(GeometryError::SingularHomography(_))
        ));
    }

    #[test]
    fn homography_point_at_infinity() {
        // w = x - 1 vanishes at x = 1
        let h = Homography::new(Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0)).unwrap();
        let l = line(&[(0.0, 0.0), (1.0, 0.0)]);
        assert_eq!(
            apply_homography(&h, &l),
            Err(GeometryError::PointAtInfinity(1))
        );
    }

    #[test]
    fn shape_error_examples() {
        let a = line(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        assert_eq!(shape_error(&a, &a).unwrap(), ShapeError::ZERO);

        let shifted = a.translated(Vec2::new(0.3, 0.0));
        let e = shape_error(&a, &shifted).unwrap();
        assert!((e.e_mean - 0.3).abs() < 1e-12);
        assert!((e.e_max - 0.3).abs() < 1e-12);
        assert!((e.epsilon - 0.09).abs() < 1e-12);

        let base: Vec<Vec2> = (0..10).map(|i| Vec2::new(i as f64, 0.0)).collect();
        let mut moved = base.clone();
        moved[4].y += 1.0;
        let e = shape_error_points(&moved, &base).unwrap();
        assert!((e.e_max - 1.0).abs() < 1e-12);
        assert!((e.e_mean - 0.1f64.sqrt()).abs() < 1e-12);
        assert!((e.epsilon - 0.55).abs() < 1e-12);

        assert_eq!(
            shape_error_points(&base[..3], &base),
            Err(GeometryError::LengthMismatch(3, 10))
        );
    }

    #[test]
    fn bending_energy_straight_is_zero() {
        let l = line(&[(0.0, 0.0), (0.5, 0.0), (3.0, 0.0), (3.1, 0.0)]);
        assert_eq!(bending_energy(&l).unwrap(), 0.0);
    }

    #[test]
    fn bending_energy_semicircle_matches_inverse_radius_squared() {
        let r = 15.0 / PI;
        let e = bending_energy(&arc(r, 200, PI)).unwrap();
        let exact = 1.0 / (r * r);
        assert!((e - exact).abs() / exact < 0.02, "{e} vs {exact}");
    }

    #[test]
    fn bending_energy_converges_under_refinement() {
        // a smooth non-circular curve: y = sin(x) over one period
        let curve = |n: usize| {
            Centerline::new(
                (0..n)
                    .map(|i| {
                        let x = 2.0 * PI * i as f64 / (n - 1) as f64;
                        Vec2::new(x, x.sin())
                    })
                    .collect(),
            )
            .unwrap()
        };
        let coarse = bending_energy(&resample(&curve(4000), 200).unwrap()).unwrap();
        let fine = bending_energy(&resample(&curve(4000), 400).unwrap()).unwrap();
        assert!((coarse - fine).abs() / fine < 0.01, "{coarse} vs {fine}");
    }

    #[test]
    fn bending_energy_needs_three_points() {
        assert!(bending_energy(&line(&[(0.0, 0.0), (1.0, 0.0)])).is_err());
    }

    mod props {
        use super::super::*;
        use nalgebra::Matrix3;
        use proptest::prelude::*;

        fn polyline() -> impl Strategy<Value = Centerline> {
            (
                -5.0..5.0f64,
                -5.0..5.0f64,
                prop::collection::vec((0.1..2.0f64, -1.2..1.2f64), 2..30),
            )
                .prop_map(|(x, y, steps)| {
                    let mut p = Vec2::new(x, y);
                    let mut heading = 0.0;
                    let mut pts = vec![p];
                    for (len, turn) in steps {
                        heading += turn;
                        p += Vec2::new(heading.cos(), heading.sin()) * len;
                        pts.push(p);
                    }
                    Centerline::new(pts).unwrap()
                })
        }

        fn homography() -> impl Strategy<Value = Homography> {
            prop::array::uniform8(-0.3..0.3f64).prop_filter_map("singular", |e| {
                let m = Matrix3::new(
                    1.0 + e[0], e[1], 5.0 * e[2],
                    e[3], 1.0 + e[4], 5.0 * e[5],
                    0.05 * e[6], 0.05 * e[7], 1.0,
                );
                Homography::new(m).ok()
            })
        }

        /// Arc-length position of `p` along `line` closest to `hint`, over the
        /// segments that contain it.
        fn locate(line: &Centerline, p: Vec2, hint: f64) -> Option<f64> {
            let cum = line.cumulative_lengths();
            let pts = line.points();
            (0..pts.len() - 1)
                .filter_map(|k| {
                    let d = pts[k + 1] - pts[k];
                    let t = ((p - pts[k]).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
                    ((pts[k] + d * t - p).norm() < 1e-9).then(|| cum[k] + t * d.norm())
                })
                .min_by(|a, b| (a - hint).abs().total_cmp(&(b - hint).abs()))
        }

        proptest! {
            #[test]
            fn resample_is_uniform_in_arc_length(line in polyline(), m in 2usize..40) {
                let out = resample(&line, m).unwrap();
                prop_assert_eq!(out.len(), m);
                prop_assert_eq!(out.first(), line.first());
                prop_assert_eq!(out.last(), line.last());
                let total = line.arc_length();
                let step = total / (m - 1) as f64;
                for (j, p) in out.points().iter().enumerate() {
                    let want = j as f64 * step;
                    let s = locate(&line, *p, want);
                    prop_assert!(s.is_some(), "point {} off the polyline", j);
                    prop_assert!((s.unwrap() - want).abs() <= 1e-9 * total);
                }
            }

            #[test]
            fn shape_error_is_symmetric_and_translation_invariant(
                a in polyline(),
                dx in -3.0..3.0f64,
                dy in -3.0..3.0f64,
                tx in -50.0..50.0f64,
                ty in -50.0..50.0f64,
            ) {
                let b = Centerline::new(
                    a.points().iter().enumerate()
                        .map(|(i, p)| p + Vec2::new(dx * (i as f64 * 0.7).sin(), dy * (i as f64 * 0.3).cos()))
                        .collect(),
                ).unwrap_or_else(|_| a.clone());
                let e = shape_error(&a, &b).unwrap();
                let r = shape_error(&b, &a).unwrap();
                prop_assert_eq!(e.e_mean, r.e_mean);
                prop_assert_eq!(e.e_max, r.e_max);
                prop_assert!(0.0 <= e.e_mean && e.e_mean <= e.e_max);
                let eps = 0.5 * (e.e_mean * e.e_mean + e.e_max * e.e_max);
                prop_assert!((e.epsilon - eps).abs() <= 1e-12 * eps.max(1.0));
                let off = Vec2::new(tx, ty);
                let t = shape_error(&a.translated(off), &b.translated(off)).unwrap();
                prop_assert!((t.e_mean - e.e_mean).abs() < 1e-12);
                prop_assert!((t.e_max - e.e_max).abs() < 1e-12);
                prop_assert!((t.epsilon - e.epsilon).abs() < 1e-12);
            }

            #[test]
            fn bending_energy_is_rigid_invariant(
                line in polyline(),
                angle in -3.2..3.2f64,
                tx in -20.0..20.0f64,
                ty in -20.0..20.0f64,
            ) {
                prop_assume!(line.len() >= 3);
                let e = bending_energy(&line).unwrap();
                let moved = bending_energy(&line.rigid_transformed(angle, Vec2::new(tx, ty))).unwrap();
                prop_assert!(e >= 0.0);
                prop_assert!((moved - e).abs() <= 1e-9 * e.max(1e-12));
            }

            #[test]
            fn homographies_compose(h1 in homography(), h2 in homography(), h3 in homography(), line in polyline()) {
                let both = h1.compose(&h2).unwrap();
                let once = apply_homography(&both, &line).unwrap();
                let twice = apply_homography(&h1, &apply_homography(&h2, &line).unwrap()).unwrap();
                for (a, b) in once.points().iter().zip(twice.points()) {
                    prop_assert!((a - b).norm() < 1e-10);
                }
                let left = h1.compose(&h2).unwrap().compose(&h3).unwrap();
                let right = h1.compose(&h2.compose(&h3).unwrap()).unwrap();
                let (l, r) = (apply_homography(&left, &line).unwrap(), apply_homography(&right, &line).unwrap());
                for (a, b) in l.points().iter().zip(r.points()) {
                    prop_assert!((a - b).norm() < 1e-10);
                }
            }
        }
    }
}
