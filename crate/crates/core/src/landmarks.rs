//! Landmark containers and the supported annotation schemes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A 2D landmark position. Inside the pipeline coordinates are normalized
/// to the face crop (`[0, 1]` on both axes, y pointing down); raw manifests
/// carry pixel coordinates until [`crate::data::crop_resize`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

/// A point of the canonical 3D face (u right, v down, z away from camera).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(u: f64, v: f64, z: f64) -> Self {
        Self { u, v, z }
    }

    pub fn is_finite(self) -> bool {
        self.u.is_finite() && self.v.is_finite() && self.z.is_finite()
    }
}

/// Ordered landmarks with a per-landmark visibility mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<Point2>,
    pub visible: Vec<bool>,
}

impl LandmarkSet {
    /// All landmarks visible.
    pub fn new(points: Vec<Point2>) -> Self {
        let visible = vec![true; points.len()];
        Self { points, visible }
    }

    pub fn with_visibility(points: Vec<Point2>, visible: Vec<bool>) -> Result<Self> {
        if points.len() != visible.len() {
            return Err(Error::invalid(format!(
                "{} landmarks but {} visibility flags",
                points.len(),
                visible.len()
            )));
        }
        Ok(Self { points, visible })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    pub fn all_visible(&self) -> bool {
        self.visible.iter().all(|&v| v)
    }

    /// Interleaved `x0, y0, x1, y1, ...`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    /// Builds an all-visible set from interleaved coordinates.
    pub fn from_flat(flat: &[f64]) -> Self {
        assert!(
            flat.len().is_multiple_of(2),
            "interleaved coordinates must come in pairs"
        );
        Self::new(
            flat.chunks_exact(2)
                .map(|c| Point2::new(c[0], c[1]))
                .collect(),
        )
    }

    pub fn map_points(&self, f: impl Fn(Point2) -> Point2) -> Self {
        Self {
            points: self.points.iter().map(|&p| f(p)).collect(),
            visible: self.visible.clone(),
        }
    }

    pub fn translate(&self, t: Point2) -> Self {
        self.map_points(|p| p + t)
    }
}

/// Landmark annotation layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    /// The 68-point iBUG/300W layout.
    #[serde(rename = "68")]
    Face68,
    /// The 21-point AFLW layout.
    #[serde(rename = "21")]
    Face21,
}

const FLIP_68: &str = include_str!("../data/flip_68.txt");
const FLIP_21: &str = include_str!("../data/flip_21.txt");

impl Scheme {
    pub fn num_landmarks(self) -> usize {
        match self {
            Scheme::Face68 => 68,
            Scheme::Face21 => 21,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Scheme::Face68 => "68",
            Scheme::Face21 => "21",
        }
    }

    pub fn from_landmark_count(n: usize) -> Option<Scheme> {
        match n {
            68 => Some(Scheme::Face68),
            21 => Some(Scheme::Face21),
            _ => None,
        }
    }

    /// Index permutation applied when mirroring a face horizontally.
    pub fn flip_permutation(self) -> Vec<usize> {
        let text = match self {
            Scheme::Face68 => FLIP_68,
            Scheme::Face21 => FLIP_21,
        };
        parse_permutation(text, self.num_landmarks()).expect("bundled flip table is valid")
    }

    /// Landmarks whose centroids stand in for the two pupils.
    pub fn pupil_groups(self) -> (Vec<usize>, Vec<usize>) {
        match self {
            // No pupil landmark in the 68-point layout: use the eye contours.
            Scheme::Face68 => ((36..42).collect(), (42..48).collect()),
            Scheme::Face21 => (vec![7], vec![10]),
        }
    }

    /// The two outer eye corners.
    pub fn outer_eye_corners(self) -> (usize, usize) {
        match self {
            Scheme::Face68 => (36, 45),
            Scheme::Face21 => (6, 11),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "68" | "face68" | "ibug68" => Ok(Scheme::Face68),
            "21" | "face21" | "aflw21" => Ok(Scheme::Face21),
            other => Err(Error::invalid(format!("unknown landmark scheme `{other}`"))),
        }
    }
}

/// Parses a whitespace-separated permutation table, ignoring `#` comments.
pub fn parse_permutation(text: &str, n: usize) -> Result<Vec<usize>> {
    let perm: Vec<usize> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace)
        .map(|t| {
            t.parse::<usize>()
                .map_err(|e| Error::invalid(format!("bad permutation entry `{t}`: {e}")))
        })
        .collect::<Result<_>>()?;
    if perm.len() != n {
        return Err(Error::invalid(format!(
            "permutation has {} entries, expected {n}",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in &perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::invalid(format!(
                "permutation entry {p} repeated or out of range"
            )));
        }
    }
    Ok(perm)
}
