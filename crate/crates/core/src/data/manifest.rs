//! Line-oriented dataset manifest.
//!
//! One face per line, whitespace separated:
//!
//! ```text
//! <image> <scheme> <bx> <by> <bw> <bh> <x1> <y1> … <xN> <yN> <visibility> <attributes> [<yaw> <pitch> <roll>]
//! ```
//!
//! * `image` is an absolute path or one relative to the manifest's
//!   directory (no spaces);
//! * `scheme` is `68` or `21` and fixes `N`;
//! * the bbox is top-left corner plus size, in pixels;
//! * `visibility` is `N` characters of `0`/`1`;
//! * `attributes` is six `0`/`1` characters in the order profile, frontal,
//!   head-up, head-down, expression, occlusion, or `-` when unknown;
//! * the optional trailing angles are radians.
//!
//! Blank lines and lines starting with `#` are ignored.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{BBox, FaceSample, Image};
use crate::geometry::EulerAngles;
use crate::landmarks::{LandmarkSet, Point2, Scheme};
use crate::loss::AttributeVector;
use crate::{par, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub scheme: Scheme,
    pub bbox: BBox,
    /// Pixel coordinates with visibility.
    pub landmarks: LandmarkSet,
    /// `None` when the line carried `-`.
    pub attributes: Option<AttributeVector>,
    pub angles: Option<EulerAngles>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory image paths are relative to.
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.image)
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_f64(tok: &str, path: &Path, line: usize, what: &str) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(path, line, format!("invalid {what} `{tok}`")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite {what} `{tok}`")));
    }
    Ok(v)
}

/// Parses manifest text; `source` names the file in error messages.
pub fn parse_manifest(text: &str, source: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = trimmed.split_whitespace().collect();
        if tok.len() < 6 {
            return Err(parse_err(
                source,
                line,
                "expected image, scheme and bbox fields",
            ));
        }
        let scheme: Scheme = tok[1]
            .parse()
            .map_err(|_| parse_err(source, line, format!("unknown scheme `{}`", tok[1])))?;
        let n = scheme.num_landmarks();
        let bbox = BBox::new(
            parse_f64(tok[2], source, line, "bbox x")?,
            parse_f64(tok[3], source, line, "bbox y")?,
            parse_f64(tok[4], source, line, "bbox width")?,
            parse_f64(tok[5], source, line, "bbox height")?,
        );
        let rest = &tok[6..];
        let has_angles = match rest.len() {
            r if r == 2 * n + 2 => false,
            r if r == 2 * n + 5 => true,
            r => {
                return Err(parse_err(
                    source,
                    line,
                    format!(
                        "scheme {scheme} needs {n} landmarks ({} coordinate fields) plus visibility and attributes; \
                         found {r} fields after the bbox",
                        2 * n
                    ),
                ))
            }
        };
        let mut points = Vec::with_capacity(n);
        for k in 0..n {
            points.push(Point2::new(
                parse_f64(rest[2 * k], source, line, "landmark x")?,
                parse_f64(rest[2 * k + 1], source, line, "landmark y")?,
            ));
        }
        let vis_tok = rest[2 * n];
        if vis_tok.len() != n || !vis_tok.chars().all(|c| c == '0' || c == '1') {
            return Err(parse_err(
                source,
                line,
                format!("visibility must be {n} characters of 0/1"),
            ));
        }
        let visible = vis_tok.chars().map(|c| c == '1').collect();
        let attr_tok = rest[2 * n + 1];
        let attributes = if attr_tok == "-" {
            None
        } else {
            Some(AttributeVector::from_bits(attr_tok).ok_or_else(|| {
                parse_err(
                    source,
                    line,
                    format!("attributes `{attr_tok}` are not 6 characters of 0/1"),
                )
            })?)
        };
        let angles = if has_angles {
            let a = &rest[2 * n + 2..];
            Some(EulerAngles::new(
                parse_f64(a[0], source, line, "yaw")?,
                parse_f64(a[1], source, line, "pitch")?,
                parse_f64(a[2], source, line, "roll")?,
            ))
        } else {
            None
        };
        out.push(ManifestEntry {
            image: PathBuf::from(tok[0]),
            scheme,
            bbox,
            landmarks: LandmarkSet::with_visibility(points, visible)?,
            attributes,
            angles,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Manifest {
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        entries: parse_manifest(&text, path)?,
    })
}

/// One manifest line (without newline). Numbers use the shortest
/// representation that parses back to the same value.
pub fn format_entry(e: &ManifestEntry) -> Result<String> {
    let img = e
        .image
        .to_str()
        .ok_or_else(|| Error::invalid("image path is not UTF-8"))?;
    if img.is_empty() || img.chars().any(char::is_whitespace) {
        return Err(Error::invalid(format!(
            "image path `{img}` must be non-empty without whitespace"
        )));
    }
    if e.landmarks.len() != e.scheme.num_landmarks() {
        return Err(Error::invalid(format!(
            "{} landmarks for scheme {}",
            e.landmarks.len(),
            e.scheme
        )));
    }
    let mut s = String::new();
    write!(
        s,
        "{img} {} {} {} {} {}",
        e.scheme, e.bbox.x, e.bbox.y, e.bbox.w, e.bbox.h
    )
    .unwrap();
    for p in &e.landmarks.points {
        write!(s, " {} {}", p.x, p.y).unwrap();
    }
    s.push(' ');
    s.extend(
        e.landmarks
            .visible
            .iter()
            .map(|&v| if v { '1' } else { '0' }),
    );
    match &e.attributes {
        Some(a) => write!(s, " {}", a.to_bits()).unwrap(),
        None => s.push_str(" -"),
    }
    if let Some(a) = e.angles {
        write!(s, " {} {} {}", a.yaw, a.pitch, a.roll).unwrap();
    }
    Ok(s)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::from(
        "# image scheme bx by bw bh landmarks... visibility attributes [yaw pitch roll]\n",
    );
    for e in entries {
        text.push_str(&format_entry(e)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl ManifestEntry {
    /// Sample with the given image; the bbox is clamped to the image.
    pub fn to_sample(&self, image: Image) -> FaceSample {
        FaceSample {
            bbox: self.bbox.clamped(image.width(), image.height()),
            image,
            landmarks: self.landmarks.clone(),
            scheme: self.scheme,
            attributes: self.attributes.unwrap_or_default(),
            attributes_known: self.attributes.is_some(),
            gt_angles: self.angles,
            cropped: false,
        }
    }
}

/// Reads a manifest and every image it references.
pub fn load_manifest(path: &Path) -> Result<Vec<FaceSample>> {
    let m = read_manifest(path)?;
    par::map_slice(&m.entries, |e| {
        Ok(e.to_sample(Image::read(&m.image_path(e))?))
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize, extra: &str) -> String {
        let mut s = String::from("img/a.png 68 1 2 30 40");
        for i in 0..n {
            s.push_str(&format!(" {} {}", i as f64 * 0.5, i as f64 + 0.25));
        }
        s.push(' ');
        s.push_str(&"1".repeat(n));
        s.push_str(extra);
        s
    }

    #[test]
    fn empty_manifest() {
        assert!(parse_manifest("", Path::new("m")).unwrap().is_empty());
        assert!(parse_manifest("# only a comment\n\n", Path::new("m"))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn single_line() {
        let e = parse_manifest(&line(68, " 100000"), Path::new("m")).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].landmarks.len(), 68);
        assert_eq!(e[0].bbox, BBox::new(1.0, 2.0, 30.0, 40.0));
        assert!(e[0].attributes.unwrap().0[0]);
        assert!(e[0].angles.is_none());
    }

    #[test]
    fn wrong_landmark_count_names_line() {
        let text = format!("# header\n{}\n", line(67, " 000000"));
        match parse_manifest(&text, Path::new("m")) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("68"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_attributes_are_flagged() {
        let e = parse_manifest(&line(68, " - 0.1 -0.2 0.3"), Path::new("m")).unwrap();
        assert!(e[0].attributes.is_none());
        let s = e[0].to_sample(Image::new(4, 4, [0.0; 3]));
        assert!(!s.attributes_known);
        assert_eq!(s.attributes, AttributeVector::default());
        assert_eq!(e[0].angles, Some(EulerAngles::new(0.1, -0.2, 0.3)));
    }

    #[test]
    fn round_trip_is_exact() {
        let text = line(68, " 010011 0.123456789 -1e-7 3.0");
        let e = parse_manifest(&text, Path::new("m")).unwrap();
        let back = parse_manifest(&format_entry(&e[0]).unwrap(), Path::new("m")).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn bad_fields_rejected() {
        assert!(parse_manifest(&line(68, " 01001"), Path::new("m")).is_err());
        assert!(parse_manifest(&line(68, " 0100x1"), Path::new("m")).is_err());
        assert!(
            parse_manifest(&line(68, " 000000").replace(" 68 ", " 70 "), Path::new("m")).is_err()
        );
        assert!(parse_manifest(
            &line(68, " 000000").replace(" 30 ", " nan "),
            Path::new("m")
        )
        .is_err());
    }
}
