//! Canonical reference face, weak-perspective pose fitting and Euler angles.
//!
//! Conventions used throughout the crate:
//!
//! * image axes: x to the right, y down; the reference face uses the same
//!   orientation for (u, v) with z pointing away from the camera;
//! * `R = Rz(roll) · Ry(yaw) · Rx(pitch)`, all angles in radians;
//! * weak perspective: `x = scale · (R·p)[0..2] + t`, i.e. the 2×4 matrix
//!   `P = [scale·R[0..2, :] | t]` applied to homogeneous `[u, v, z, 1]`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Matrix2x4, Matrix3, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::landmarks::{LandmarkSet, Point2, Point3, Scheme};
use crate::{Error, Result};

/// Orthonormality/determinant tolerance for [`RotationMatrix`].
pub const ROTATION_TOLERANCE: f64 = 1e-9;
/// `|yaw|` closer than this to π/2 is treated as gimbal lock.
pub const GIMBAL_TOLERANCE: f64 = 1e-7;
/// Condition number above which anchor configurations are rejected.
pub const MAX_CONDITION: f64 = 1e8;

/// Head rotation in radians; every component lies in `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl EulerAngles {
    pub const ZERO: EulerAngles = EulerAngles {
        yaw: 0.0,
        pitch: 0.0,
        roll: 0.0,
    };

    pub const fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self { yaw, pitch, roll }
    }

    pub fn from_degrees(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self::new(yaw.to_radians(), pitch.to_radians(), roll.to_radians())
    }

    pub fn to_degrees(self) -> [f64; 3] {
        [
            self.yaw.to_degrees(),
            self.pitch.to_degrees(),
            self.roll.to_degrees(),
        ]
    }

    /// `[yaw, pitch, roll]`.
    pub fn as_array(self) -> [f64; 3] {
        [self.yaw, self.pitch, self.roll]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn is_finite(self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }

    /// Wraps every component into `(-π, π]`.
    pub fn wrapped(self) -> Self {
        Self::from_array(self.as_array().map(wrap_angle))
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// A proper rotation (`RᵀR = I`, `det R = +1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn new(r: Matrix3<f64>) -> Result<Self> {
        if !r.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("rotation matrix has non-finite entries"));
        }
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if ortho > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::invalid(format!(
                "matrix is not a rotation (max |RᵀR - I| = {ortho:e}, det = {det})"
            )));
        }
        Ok(Self(r))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn frobenius_distance(&self, other: &RotationMatrix) -> f64 {
        (self.0 - other.0).norm()
    }

    /// Geodesic (axis-angle) distance in radians.
    pub fn angle_to(&self, other: &RotationMatrix) -> f64 {
        let c = ((self.0.transpose() * other.0).trace() - 1.0) / 2.0;
        c.clamp(-1.0, 1.0).acos()
    }

    pub fn rotate(&self, p: Point3) -> Vector3<f64> {
        self.0 * Vector3::new(p.u, p.v, p.z)
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `R = Rz(roll) · Ry(yaw) · Rx(pitch)`.
pub fn rotation_from_euler(angles: &EulerAngles) -> RotationMatrix {
    RotationMatrix(rot_z(angles.roll) * rot_y(angles.yaw) * rot_x(angles.pitch))
}

/// Inverse of [`rotation_from_euler`]. At gimbal lock roll is pinned to 0
/// and pitch carries the remaining in-plane angle.
pub fn euler_from_rotation(r: &RotationMatrix) -> Result<EulerAngles> {
    euler_from_matrix(&r.0)
}

/// [`euler_from_rotation`] on a raw matrix, rejecting non-rotations.
pub fn euler_from_matrix(m: &Matrix3<f64>) -> Result<EulerAngles> {
    let m = RotationMatrix::new(*m)?.0;
    let cos_yaw = m[(0, 0)].hypot(m[(1, 0)]);
    let yaw = (-m[(2, 0)]).atan2(cos_yaw);
    let (pitch, roll) = if cos_yaw < GIMBAL_TOLERANCE.sin() {
        ((-m[(1, 2)]).atan2(m[(1, 1)]), 0.0)
    } else {
        (m[(2, 1)].atan2(m[(2, 2)]), m[(1, 0)].atan2(m[(0, 0)]))
    };
    Ok(EulerAngles::new(yaw, pitch, roll).wrapped())
}

/// Per-axis absolute angular difference `(θ_yaw, θ_pitch, θ_roll)`, each
/// wrapped into `[0, π]`.
pub fn angle_deviation(gt: &EulerAngles, pred: &EulerAngles) -> [f64; 3] {
    let g = gt.as_array();
    let p = pred.as_array();
    std::array::from_fn(|k| {
        let d = (g[k] - p[k]).rem_euclid(2.0 * PI);
        d.min(2.0 * PI - d)
    })
}

/// A 2×4 weak-perspective projection acting on `[u, v, z, 1]ᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix(pub Matrix2x4<f64>);

impl ProjectionMatrix {
    pub fn project(&self, p: Point3) -> Point2 {
        let h = nalgebra::Vector4::new(p.u, p.v, p.z, 1.0);
        let x = self.0 * h;
        Point2::new(x[0], x[1])
    }
}

/// Result of fitting the weak-perspective model to a face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEstimate {
    pub rotation: RotationMatrix,
    pub scale: f64,
    pub translation: Point2,
    /// RMS anchor reprojection error, in the landmarks' units.
    pub residual: f64,
}

impl PoseEstimate {
    pub fn new(rotation: RotationMatrix, scale: f64, translation: Point2) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) || !translation.is_finite() {
            return Err(Error::invalid(format!(
                "pose needs a positive finite scale and finite translation (scale = {scale})"
            )));
        }
        Ok(Self {
            rotation,
            scale,
            translation,
            residual: 0.0,
        })
    }

    pub fn from_euler(angles: EulerAngles, scale: f64, translation: Point2) -> Result<Self> {
        Self::new(rotation_from_euler(&angles), scale, translation)
    }

    pub fn projection_matrix(&self) -> ProjectionMatrix {
        let r = self.rotation.matrix();
        let mut p = Matrix2x4::zeros();
        for i in 0..2 {
            for j in 0..3 {
                p[(i, j)] = self.scale * r[(i, j)];
            }
        }
        p[(0, 3)] = self.translation.x;
        p[(1, 3)] = self.translation.y;
        ProjectionMatrix(p)
    }
}

/// Canonical 3D average face plus the anchor subset used for pose fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceFace {
    pub points: Vec<Point3>,
    pub anchor_indices: Vec<usize>,
    pub scheme: Scheme,
}

const REFERENCE_68: &str = include_str!("../data/reference_68.txt");
const REFERENCE_21: &str = include_str!("../data/reference_21.txt");
const REFERENCE_MAGIC: &str = "pfld-reference";
const REFERENCE_VERSION: u32 = 1;

impl ReferenceFace {
    /// Validates the reference invariants.
    pub fn new(points: Vec<Point3>, anchor_indices: Vec<usize>, scheme: Scheme) -> Result<Self> {
        let n = points.len();
        if n != scheme.num_landmarks() {
            return Err(Error::invalid(format!(
                "scheme {scheme} needs {} points, got {n}",
                scheme.num_landmarks()
            )));
        }
        if !points.iter().all(|p| p.is_finite()) {
            return Err(Error::invalid("reference face has non-finite coordinates"));
        }
        let mut seen = vec![false; n];
        for &a in &anchor_indices {
            if a >= n || std::mem::replace(&mut seen[a], true) {
                return Err(Error::invalid(format!(
                    "anchor index {a} repeated or out of range"
                )));
            }
        }
        if anchor_indices.len() < 4 {
            return Err(Error::DegenerateAnchors(format!(
                "{} anchors; at least 4 are needed",
                anchor_indices.len()
            )));
        }
        let face = Self {
            points,
            anchor_indices,
            scheme,
        };
        let planar: Vec<Point2> = face
            .anchor_indices
            .iter()
            .map(|&i| Point2::new(face.points[i].u, face.points[i].v))
            .collect();
        if scatter_condition_2d(&planar) > MAX_CONDITION {
            return Err(Error::DegenerateAnchors(
                "reference anchors are collinear in the u-v plane".into(),
            ));
        }
        Ok(face)
    }

    /// The reference shipped with the crate for `scheme`.
    pub fn bundled(scheme: Scheme) -> Self {
        let text = match scheme {
            Scheme::Face68 => REFERENCE_68,
            Scheme::Face21 => REFERENCE_21,
        };
        Self::parse(text).expect("bundled reference face is valid")
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn anchors(&self) -> impl Iterator<Item = Point3> + '_ {
        self.anchor_indices.iter().map(|&i| self.points[i])
    }

    /// Reads the text format: a header `pfld-reference <version> <scheme> <N> <A>`,
    /// `N` lines `index u v z`, then one line with `A` anchor indices.
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let bad =
            |line: usize, msg: String| Error::invalid(format!("reference line {line}: {msg}"));

        let (hl, header) = lines
            .next()
            .ok_or_else(|| bad(0, "empty document".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 5 || h[0] != REFERENCE_MAGIC {
            return Err(bad(
                hl,
                format!("expected `{REFERENCE_MAGIC} <version> <scheme> <N> <A>`"),
            ));
        }
        let version: u32 = h[1].parse().map_err(|_| bad(hl, "bad version".into()))?;
        if version != REFERENCE_VERSION {
            return Err(bad(hl, format!("unsupported version {version}")));
        }
        let scheme: Scheme = h[2].parse()?;
        let n: usize = h[3].parse().map_err(|_| bad(hl, "bad N".into()))?;
        let a: usize = h[4].parse().map_err(|_| bad(hl, "bad A".into()))?;

        let mut points = vec![None; n];
        for _ in 0..n {
            let (ln, l) = lines
                .next()
                .ok_or_else(|| bad(hl, "truncated point list".into()))?;
            let t: Vec<&str> = l.split_whitespace().collect();
            if t.len() != 4 {
                return Err(bad(ln, "expected `index u v z`".into()));
            }
            let idx: usize = t[0].parse().map_err(|_| bad(ln, "bad index".into()))?;
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| bad(ln, format!("bad number `{s}`")))
            };
            let p = Point3::new(num(t[1])?, num(t[2])?, num(t[3])?);
            match points.get_mut(idx) {
                Some(slot @ None) => *slot = Some(p),
                _ => return Err(bad(ln, format!("index {idx} repeated or out of range"))),
            }
        }
        let (al, anchors) = lines
            .next()
            .ok_or_else(|| bad(hl, "missing anchor line".into()))?;
        let anchor_indices: Vec<usize> = anchors
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad(al, format!("bad anchor `{s}`"))))
            .collect::<Result<_>>()?;
        if anchor_indices.len() != a {
            return Err(bad(
                al,
                format!("expected {a} anchors, got {}", anchor_indices.len()),
            ));
        }
        if let Some((ln, _)) = lines.next() {
            return Err(bad(ln, "trailing content".into()));
        }
        let points = points
            .into_iter()
            .map(|p| p.expect("all indices filled"))
            .collect();
        Self::new(points, anchor_indices, scheme)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{REFERENCE_MAGIC} {REFERENCE_VERSION} {} {} {}\n",
            self.scheme,
            self.points.len(),
            self.anchor_indices.len()
        );
        for (i, p) in self.points.iter().enumerate() {
            // 17 significant digits round-trip f64 exactly.
            let _ = writeln!(s, "{i} {:.17e} {:.17e} {:.17e}", p.u, p.v, p.z);
        }
        let anchors: Vec<String> = self.anchor_indices.iter().map(|a| a.to_string()).collect();
        s.push_str(&anchors.join(" "));
        s.push('\n');
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn scatter_condition_2d(points: &[Point2]) -> f64 {
    let n = points.len() as f64;
    let (mx, my) = points
        .iter()
        .fold((0.0, 0.0), |(x, y), p| (x + p.x / n, y + p.y / n));
    let mut s = Matrix2::zeros();
    for p in points {
        let d = Vector2::new(p.x - mx, p.y - my);
        s += d * d.transpose();
    }
    let eig = s.symmetric_eigenvalues();
    condition(eig.max(), eig.min())
}

fn condition(max: f64, min: f64) -> f64 {
    if min <= 0.0 || !min.is_finite() || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Averages frontal 2D annotations into a reference face, taking depth from
/// the bundled profile of `scheme`. The result is centered on the origin and
/// scaled so the farthest anchor lies at radius 1 in the u-v plane.
pub fn build_reference_face(frontal: &[LandmarkSet], scheme: Scheme) -> Result<ReferenceFace> {
    let first = frontal
        .first()
        .ok_or_else(|| Error::invalid("no frontal samples to average"))?;
    let n = scheme.num_landmarks();
    for (i, s) in frontal.iter().enumerate() {
        if s.len() != n {
            return Err(Error::invalid(format!(
                "sample {i} has {} landmarks, scheme {scheme} needs {n} (first sample has {})",
                s.len(),
                first.len()
            )));
        }
        if !s.all_visible() {
            return Err(Error::invalid(format!(
                "sample {i} has invisible landmarks"
            )));
        }
    }
    let count = frontal.len() as f64;
    let mut mean = vec![Point2::default(); n];
    for s in frontal {
        for (m, p) in mean.iter_mut().zip(&s.points) {
            *m = *m + *p * (1.0 / count);
        }
    }
    let centroid = mean
        .iter()
        .fold(Point2::default(), |c, p| c + *p * (1.0 / n as f64));
    let bundled = ReferenceFace::bundled(scheme);
    let radius = bundled
        .anchor_indices
        .iter()
        .map(|&i| (mean[i] - centroid).distance(Point2::default()))
        .fold(0.0, f64::max);
    if !(radius > 0.0) {
        return Err(Error::DegenerateAnchors("all anchors coincide".into()));
    }
    let points = mean
        .iter()
        .zip(&bundled.points)
        .map(|(m, b)| {
            let c = (*m - centroid) * (1.0 / radius);
            Point3::new(c.x, c.y, b.z)
        })
        .collect();
    ReferenceFace::new(points, bundled.anchor_indices, scheme)
}

/// Projects every reference point under a weak-perspective pose.
pub fn project_weak_perspective(reference: &ReferenceFace, pose: &PoseEstimate) -> LandmarkSet {
    let p = pose.projection_matrix();
    LandmarkSet::new(reference.points.iter().map(|&q| p.project(q)).collect())
}

/// Least-squares weak-perspective fit over the anchor correspondences.
///
/// The affine 2×3 block and translation are solved linearly, the two rows
/// are then projected onto the nearest scaled orthonormal pair through an
/// SVD, and the third rotation row is their cross product.
pub fn estimate_rotation(
    landmarks: &LandmarkSet,
    reference: &ReferenceFace,
) -> Result<PoseEstimate> {
    if landmarks.len() != reference.len() {
        return Err(Error::invalid(format!(
            "{} landmarks against a {}-point reference",
            landmarks.len(),
            reference.len()
        )));
    }
    for &a in &reference.anchor_indices {
        if !landmarks.visible[a] {
            return Err(Error::OccludedAnchor(a));
        }
        if !landmarks.points[a].is_finite() {
            return Err(Error::invalid(format!(
                "anchor {a} has non-finite coordinates"
            )));
        }
    }
    let count = reference.anchor_indices.len() as f64;
    let src: Vec<Vector3<f64>> = reference
        .anchors()
        .map(|p| Vector3::new(p.u, p.v, p.z))
        .collect();
    let dst: Vec<Vector2<f64>> = reference
        .anchor_indices
        .iter()
        .map(|&i| Vector2::new(landmarks.points[i].x, landmarks.points[i].y))
        .collect();
    let src_mean = src.iter().sum::<Vector3<f64>>() / count;
    let dst_mean = dst.iter().sum::<Vector2<f64>>() / count;

    let mut normal = Matrix3::zeros();
    let mut cross = Matrix2x3::zeros();
    let mut scatter = Matrix2::zeros();
    for (p, x) in src.iter().zip(&dst) {
        let pc = p - src_mean;
        let xc = x - dst_mean;
        normal += pc * pc.transpose();
        cross += xc * pc.transpose();
        scatter += xc * xc.transpose();
    }
    let eig = SymmetricEigen::new(normal).eigenvalues;
    let cond = condition(eig.max(), eig.min());
    if cond > MAX_CONDITION {
        return Err(Error::DegenerateAnchors(format!(
            "reference anchor normal equations are singular (condition {cond:e})"
        )));
    }
    let seig = scatter.symmetric_eigenvalues();
    let scond = condition(seig.max(), seig.min());
    if scond > MAX_CONDITION {
        return Err(Error::DegenerateAnchors(format!(
            "landmark anchors are collinear (condition {scond:e})"
        )));
    }
    let inverse = normal
        .try_inverse()
        .ok_or_else(|| Error::DegenerateAnchors("normal equations not invertible".into()))?;
    let affine: Matrix2x3<f64> = cross * inverse;

    let svd = affine.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::DegenerateAnchors("SVD failed".into())),
    };
    let sv = svd.singular_values;
    let scale = (sv[0] + sv[1]) / 2.0;
    if !(scale > 0.0) {
        return Err(Error::DegenerateAnchors("zero scale".into()));
    }
    let rows: Matrix2x3<f64> = u * vt;
    let r1 = rows.row(0).transpose();
    let r2 = rows.row(1).transpose();
    let r3 = r1.cross(&r2);
    let mut r = Matrix3::zeros();
    r.set_row(0, &r1.transpose());
    r.set_row(1, &r2.transpose());
    r.set_row(2, &r3.transpose());
    let rotation = RotationMatrix::new(r)?;

    let t = dst_mean - scale * rows * src_mean;
    let sq: f64 = src
        .iter()
        .zip(&dst)
        .map(|(p, x)| (x - (scale * rows * p + t)).norm_squared())
        .sum();
    Ok(PoseEstimate {
        rotation,
        scale,
        translation: Point2::new(t[0], t[1]),
        residual: (sq / count).sqrt(),
    })
}

/// Pose fit followed by Euler extraction, i.e. the full angle annotation of
/// one face.
pub fn annotate_pose(landmarks: &LandmarkSet, reference: &ReferenceFace) -> Result<EulerAngles> {
    let pose = estimate_rotation(landmarks, reference)?;
    euler_from_rotation(&pose.rotation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn deg(d: f64) -> f64 {
        d.to_radians()
    }

    #[test]
    fn identity_round_trips() {
        let r = rotation_from_euler(&EulerAngles::ZERO);
        assert_eq!(*r.matrix(), Matrix3::identity());
        assert_eq!(euler_from_rotation(&r).unwrap(), EulerAngles::ZERO);
    }

    #[test]
    fn single_axis_yaw() {
        let r = RotationMatrix::new(rot_y(PI / 6.0)).unwrap();
        let e = euler_from_rotation(&r).unwrap();
        assert_abs_diff_eq!(e.yaw, PI / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.pitch, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.roll, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn quarter_turn_yaw_matrix() {
        let r = rotation_from_euler(&EulerAngles::new(PI / 2.0, 0.0, 0.0));
        let expect = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0);
        assert!((r.matrix() - expect).abs().max() < 1e-15);
    }

    #[test]
    fn gimbal_lock_pins_roll() {
        let r = rotation_from_euler(&EulerAngles::new(PI / 2.0, deg(20.0), deg(5.0)));
        let e = euler_from_rotation(&r).unwrap();
        assert_eq!(e.roll, 0.0);
        assert_abs_diff_eq!(e.yaw, PI / 2.0, epsilon = 1e-7);
        let back = rotation_from_euler(&e);
        assert!(back.frobenius_distance(&r) < 1e-7);
    }

    #[test]
    fn rejects_non_rotation() {
        let mut m = Matrix3::identity();
        m[(0, 0)] = -1.0;
        assert!(RotationMatrix::new(m).is_err());
        assert!(RotationMatrix::new(Matrix3::identity() * 1.01).is_err());
        assert!(euler_from_matrix(&(Matrix3::identity() * 2.0)).is_err());
    }

    #[test]
    fn euler_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a = EulerAngles::new(
                rng.random_range(deg(-80.0)..deg(80.0)),
                rng.random_range(-PI + 1e-6..PI),
                rng.random_range(-PI + 1e-6..PI),
            );
            let r = rotation_from_euler(&a);
            let ortho = (r.matrix().transpose() * r.matrix() - Matrix3::identity())
                .abs()
                .max();
            assert!(ortho < 1e-12);
            let b = euler_from_rotation(&r).unwrap();
            let dev = angle_deviation(&a, &b);
            assert!(dev.iter().all(|&d| d < 1e-9), "{a:?} -> {b:?}");
        }
    }

    #[test]
    fn deviation_examples() {
        let z = EulerAngles::ZERO;
        assert_eq!(angle_deviation(&z, &z), [0.0; 3]);
        let d = angle_deviation(
            &EulerAngles::from_degrees(170.0, 0.0, 0.0),
            &EulerAngles::from_degrees(-170.0, 0.0, 0.0),
        );
        assert_abs_diff_eq!(d[0], deg(20.0), epsilon = 1e-12);
        let d = angle_deviation(&EulerAngles::from_degrees(30.0, -10.0, 5.0), &z);
        assert_abs_diff_eq!(d[0], deg(30.0), epsilon = 1e-15);
        assert_abs_diff_eq!(d[1], deg(10.0), epsilon = 1e-15);
        assert_abs_diff_eq!(d[2], deg(5.0), epsilon = 1e-15);
    }

    #[test]
    fn projection_identity_and_roll_pi() {
        let face = ReferenceFace::bundled(Scheme::Face68);
        let pose = PoseEstimate::from_euler(EulerAngles::ZERO, 1.0, Point2::default()).unwrap();
        let lm = project_weak_perspective(&face, &pose);
        for (p, q) in lm.points.iter().zip(&face.points) {
            assert_eq!((p.x, p.y), (q.u, q.v));
        }
        let pose = PoseEstimate::from_euler(EulerAngles::new(0.0, 0.0, PI), 1.0, Point2::default())
            .unwrap();
        let lm = project_weak_perspective(&face, &pose);
        for (p, q) in lm.points.iter().zip(&face.points) {
            assert_abs_diff_eq!(p.x, -q.u, epsilon = 1e-15);
            assert_abs_diff_eq!(p.y, -q.v, epsilon = 1e-15);
        }
    }

    #[test]
    fn projection_matches_explicit_matrix_product() {
        let face = ReferenceFace::bundled(Scheme::Face68);
        let yaw = deg(20.0);
        let pose =
            PoseEstimate::from_euler(EulerAngles::new(yaw, 0.0, 0.0), 0.5, Point2::new(0.5, 0.5))
                .unwrap();
        let lm = project_weak_perspective(&face, &pose);
        // Ry(yaw) rows 0 and 1 written out by hand.
        for (p, q) in lm.points.iter().zip(&face.points) {
            let x = 0.5 * (yaw.cos() * q.u + yaw.sin() * q.z) + 0.5;
            let y = 0.5 * q.v + 0.5;
            assert_abs_diff_eq!(p.x, x, epsilon = 1e-15);
            assert_abs_diff_eq!(p.y, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn estimate_identity_pose() {
        let face = ReferenceFace::bundled(Scheme::Face68);
        let pose = PoseEstimate::from_euler(EulerAngles::ZERO, 1.0, Point2::default()).unwrap();
        let est = estimate_rotation(&project_weak_perspective(&face, &pose), &face).unwrap();
        assert!(est.rotation.frobenius_distance(&RotationMatrix::identity()) < 1e-12);
        assert!(est.residual < 1e-9);
        assert_abs_diff_eq!(est.scale, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn estimate_recovers_known_pose() {
        let face = ReferenceFace::bundled(Scheme::Face68);
        let truth = EulerAngles::from_degrees(20.0, -10.0, 5.0);
        let pose = PoseEstimate::from_euler(truth, 0.7, Point2::new(0.4, 0.55)).unwrap();
        let est = estimate_rotation(&project_weak_perspective(&face, &pose), &face).unwrap();
        let got = euler_from_rotation(&est.rotation).unwrap();
        assert!(angle_deviation(&truth, &got).iter().all(|&d| d < 1e-6));
        assert!(est.residual < 1e-9);
        assert_abs_diff_eq!(est.scale, 0.7, epsilon = 1e-9);
        assert_abs_diff_eq!(est.translation.x, 0.4, epsilon = 1e-9);
    }

    #[test]
    fn collinear_anchors_are_degenerate() {
        let face = ReferenceFace::bundled(Scheme::Face68);
        let mut lm = project_weak_perspective(
            &face,
            &PoseEstimate::from_euler(EulerAngles::ZERO, 1.0, Point2::default()).unwrap(),
        );
        for (k, &a) in face.anchor_indices.iter().enumerate() {
            lm.points[a] = Point2::new(k as f64 * 0.1, 2.0 * k as f64 * 0.1 + 0.3);
        }
        assert!(matches!(
            estimate_rotation(&lm, &face),
            Err(Error::DegenerateAnchors(_))
        ));
    }

    #[test]
    fn occluded_anchor_is_reported() {
        let face = ReferenceFace::bundled(Scheme::Face68);
        let mut lm = project_weak_perspective(
            &face,
            &PoseEstimate::from_euler(EulerAngles::ZERO, 1.0, Point2::default()).unwrap(),
        );
        lm.visible[36] = false;
        assert!(matches!(
            estimate_rotation(&lm, &face),
            Err(Error::OccludedAnchor(36))
        ));
    }

    #[test]
    fn planar_reference_rejected() {
        let face = ReferenceFace::bundled(Scheme::Face68);
        let mut points = face.points.clone();
        for p in &mut points {
            p.z = 0.0;
        }
        let flat = ReferenceFace::new(points, face.anchor_indices.clone(), Scheme::Face68).unwrap();
        let lm = project_weak_perspective(
            &flat,
            &PoseEstimate::from_euler(EulerAngles::ZERO, 1.0, Point2::default()).unwrap(),
        );
        assert!(matches!(
            estimate_rotation(&lm, &flat),
            Err(Error::DegenerateAnchors(_))
        ));
    }

    #[test]
    fn bundled_references_are_normalized() {
        for scheme in [Scheme::Face68, Scheme::Face21] {
            let face = ReferenceFace::bundled(scheme);
            let n = face.len() as f64;
            let c = face
                .points
                .iter()
                .fold((0.0, 0.0, 0.0), |a, p| (a.0 + p.u, a.1 + p.v, a.2 + p.z));
            assert!(c.0.abs() / n < 1e-9 && c.1.abs() / n < 1e-9 && c.2.abs() / n < 1e-9);
            let r = face.anchors().map(|p| p.u.hypot(p.v)).fold(0.0, f64::max);
            assert_abs_diff_eq!(r, 1.0, epsilon = 1e-9);
            assert_eq!(face.anchor_indices.len(), 11);
        }
    }

    #[test]
    fn reference_text_round_trip() {
        let face = ReferenceFace::bundled(Scheme::Face21);
        let back = ReferenceFace::parse(&face.to_text()).unwrap();
        assert_eq!(back.anchor_indices, face.anchor_indices);
        for (a, b) in back.points.iter().zip(&face.points) {
            assert!(
                (a.u - b.u).abs() < 1e-9 && (a.v - b.v).abs() < 1e-9 && (a.z - b.z).abs() < 1e-9
            );
        }
        assert!(ReferenceFace::parse("pfld-reference 2 68 68 11\n").is_err());
    }

    #[test]
    fn build_reference_identity_case() {
        let face = ReferenceFace::bundled(Scheme::Face68);
        let sample = LandmarkSet::new(face.points.iter().map(|p| Point2::new(p.u, p.v)).collect());
        let built = build_reference_face(&[sample], Scheme::Face68).unwrap();
        for (a, b) in built.points.iter().zip(&face.points) {
            assert_abs_diff_eq!(a.u, b.u, epsilon = 1e-9);
            assert_abs_diff_eq!(a.v, b.v, epsilon = 1e-9);
            assert_eq!(a.z, b.z);
        }
    }

    #[test]
    fn build_reference_mirrored_pair_is_symmetric() {
        let face = ReferenceFace::bundled(Scheme::Face68);
        let perm = Scheme::Face68.flip_permutation();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<Point2> = face
            .points
            .iter()
            .map(|p| {
                Point2::new(
                    p.u * 40.0 + 100.0 + rng.random_range(-2.0..2.0),
                    p.v * 40.0 + 80.0,
                )
            })
            .collect();
        let mut b = vec![Point2::default(); a.len()];
        for (i, p) in a.iter().enumerate() {
            b[perm[i]] = Point2::new(200.0 - p.x, p.y);
        }
        let built =
            build_reference_face(&[LandmarkSet::new(a), LandmarkSet::new(b)], Scheme::Face68)
                .unwrap();
        for (i, p) in built.points.iter().enumerate() {
            let q = built.points[perm[i]];
            assert_abs_diff_eq!(p.u, -q.u, epsilon = 1e-12);
            assert_abs_diff_eq!(p.v, q.v, epsilon = 1e-12);
        }
    }

    #[test]
    fn build_reference_from_jittered_copies() {
        let face = ReferenceFace::bundled(Scheme::Face68);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<LandmarkSet> = (0..10)
            .map(|_| {
                LandmarkSet::new(
                    face.points
                        .iter()
                        .map(|p| {
                            Point2::new(p.u + noise.sample(&mut rng), p.v + noise.sample(&mut rng))
                        })
                        .collect(),
                )
            })
            .collect();
        let built = build_reference_face(&samples, Scheme::Face68).unwrap();
        for (a, b) in built.points.iter().zip(&face.points) {
            assert!((a.u - b.u).abs() < 0.01 && (a.v - b.v).abs() < 0.01);
        }
    }

    #[test]
    fn build_reference_errors() {
        assert!(build_reference_face(&[], Scheme::Face68).is_err());
        let face = ReferenceFace::bundled(Scheme::Face68);
        let s68 = LandmarkSet::new(face.points.iter().map(|p| Point2::new(p.u, p.v)).collect());
        let s21 = LandmarkSet::new(vec![Point2::default(); 21]);
        assert!(build_reference_face(&[s68, s21], Scheme::Face68).is_err());
    }
}
