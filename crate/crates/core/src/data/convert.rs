//! Converters from common annotation layouts to manifest entries.
//!
//! * 68-point: one iBUG `.pts` file per image (`version: 1`, `n_points: 68`,
//!   then the points between braces), stored next to an image of the same
//!   stem (`.png`, `.jpg` or `.jpeg`). Coordinates are 1-based pixel
//!   centres by convention.
//! * 21-point: a CSV with one face per row,
//!   `image,x1,y1,v1,…,x21,y21,v21`, where `v` is `1` for visible and `0`
//!   for occluded; an optional header row starting with `image` is skipped.
//!   Coordinates are 0-based pixel centres.
//!
//! Boxes are the squared landmark extents grown by a margin, since neither
//! layout ships a detector box. Attributes are left unknown so that the
//! pose-threshold annotator can fill them in.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::manifest::ManifestEntry;
use super::BBox;
use crate::landmarks::{LandmarkSet, Point2, Scheme};
use crate::{Error, Result};

/// Where a source file puts the centre of pixel 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoordinateOrigin {
    /// Pixel 0 is centred at 1.
    OneBased,
    /// Pixel 0 is centred at 0.
    ZeroBased,
    /// Pixel 0 covers `[0, 1)`, the manifest convention.
    Continuous,
}

impl CoordinateOrigin {
    /// Offset added to source coordinates.
    pub fn offset(self) -> f64 {
        match self {
            CoordinateOrigin::OneBased => -0.5,
            CoordinateOrigin::ZeroBased => 0.5,
            CoordinateOrigin::Continuous => 0.0,
        }
    }
}

fn perr(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Parses `.pts` text.
pub fn parse_pts(text: &str, source: &Path) -> Result<Vec<Point2>> {
    let mut declared = None;
    let mut points = Vec::new();
    let mut in_body = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(n) = line.strip_prefix("n_points:") {
            declared = Some(
                n.trim()
                    .parse::<usize>()
                    .map_err(|_| perr(source, i + 1, "bad n_points"))?,
            );
        } else if line == "{" {
            in_body = true;
        } else if line == "}" {
            in_body = false;
        } else if in_body {
            let v: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| perr(source, i + 1, format!("bad point `{line}`")))?;
            if v.len() != 2 || !v.iter().all(|x| x.is_finite()) {
                return Err(perr(
                    source,
                    i + 1,
                    format!("expected two finite numbers, found `{line}`"),
                ));
            }
            points.push(Point2::new(v[0], v[1]));
        }
    }
    match declared {
        Some(n) if n != points.len() => Err(perr(
            source,
            0,
            format!("n_points is {n} but {} points follow", points.len()),
        )),
        _ => Ok(points),
    }
}

pub fn read_pts(path: &Path) -> Result<Vec<Point2>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pts(&text, path)
}

fn entry(
    image: PathBuf,
    landmarks: LandmarkSet,
    scheme: Scheme,
    margin: f64,
) -> Result<ManifestEntry> {
    let bbox = BBox::around(&landmarks, 0.0)
        .ok_or_else(|| Error::invalid(format!("{}: no visible landmarks", image.display())))?
        .squared()
        .expanded(margin);
    Ok(ManifestEntry {
        image,
        scheme,
        bbox,
        landmarks,
        attributes: None,
        angles: None,
    })
}

/// One entry per `.pts` file in `dir` (sorted by name), with image paths
/// relative to `dir`.
pub fn convert_pts(
    dir: &Path,
    origin: CoordinateOrigin,
    margin: f64,
) -> Result<Vec<ManifestEntry>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pts"))
        .collect();
    files.sort();
    let mut out = Vec::with_capacity(files.len());
    for pts in files {
        let points = read_pts(&pts)?;
        if points.len() != Scheme::Face68.num_landmarks() {
            return Err(perr(
                &pts,
                0,
                format!("expected 68 points, found {}", points.len()),
            ));
        }
        let image = ["png", "jpg", "jpeg"]
            .iter()
            .map(|ext| pts.with_extension(ext))
            .find(|p| p.exists())
            .ok_or_else(|| Error::invalid(format!("no image next to {}", pts.display())))?;
        let rel = PathBuf::from(image.file_name().expect("file path"));
        let d = origin.offset();
        let l = LandmarkSet::new(
            points
                .into_iter()
                .map(|p| Point2::new(p.x + d, p.y + d))
                .collect(),
        );
        out.push(entry(rel, l, Scheme::Face68, margin)?);
    }
    Ok(out)
}

/// Entries from a 21-point CSV; image paths are kept as written.
pub fn convert_csv(
    path: &Path,
    origin: CoordinateOrigin,
    margin: f64,
) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let n = Scheme::Face21.num_landmarks();
    let d = origin.offset();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("image")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 1 + 3 * n {
            return Err(perr(
                path,
                i + 1,
                format!("expected {} fields, found {}", 1 + 3 * n, f.len()),
            ));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| perr(path, i + 1, format!("bad number `{s}`")))
        };
        let mut points = Vec::with_capacity(n);
        let mut visible = Vec::with_capacity(n);
        for k in 0..n {
            points.push(Point2::new(num(f[1 + 3 * k])? + d, num(f[2 + 3 * k])? + d));
            visible.push(match f[3 + 3 * k] {
                "1" => true,
                "0" => false,
                v => return Err(perr(path, i + 1, format!("visibility `{v}` is not 0/1"))),
            });
        }
        let l = LandmarkSet::with_visibility(points, visible)?;
        out.push(entry(PathBuf::from(f[0]), l, Scheme::Face21, margin)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pts_round_trip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = String::from("version: 1\nn_points:  68\n{\n");
        for i in 0..68 {
            text.push_str(&format!("{} {}\n", 10.0 + i as f64, 20.0 + (i % 7) as f64));
        }
        text.push_str("}\n");
        std::fs::write(dir.path().join("a.pts"), &text).unwrap();
        std::fs::write(dir.path().join("a.png"), b"").unwrap();
        let e = convert_pts(dir.path(), CoordinateOrigin::OneBased, 0.0).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].image, PathBuf::from("a.png"));
        assert_eq!(e[0].landmarks.points[0], Point2::new(9.5, 19.5));
        // extents 67 × 6, squared to 67 × 67
        assert_eq!(e[0].bbox, BBox::new(9.5, 19.5 + 3.0 - 33.5, 67.0, 67.0));
        assert!(e[0].attributes.is_none());
    }

    #[test]
    fn pts_count_mismatch() {
        assert!(parse_pts("n_points: 3\n{\n1 2\n}\n", Path::new("x")).is_err());
        assert!(parse_pts("{\n1 2 3\n}\n", Path::new("x")).is_err());
    }

    #[test]
    fn csv_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut row = String::from("img/b.jpg");
        for k in 0..21 {
            row.push_str(&format!(",{},{},{}", k, 2 * k, (k != 3) as u8));
        }
        let path = dir.path().join("a.csv");
        std::fs::write(&path, format!("image,x1,...\n{row}\n")).unwrap();
        let e = convert_csv(&path, CoordinateOrigin::ZeroBased, 0.1).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].scheme, Scheme::Face21);
        assert!(!e[0].landmarks.visible[3]);
        assert_eq!(e[0].landmarks.points[1], Point2::new(1.5, 2.5));
        std::fs::write(&path, "a.png,1,2\n").unwrap();
        assert!(convert_csv(&path, CoordinateOrigin::ZeroBased, 0.1).is_err());
    }
}
