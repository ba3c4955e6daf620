//! Parametric schematic faces rendered from the 3D reference under sampled
//! poses, with exact landmark projections as labels.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attributes::{pose_attributes, PoseThresholds};
use super::manifest::{write_manifest, ManifestEntry};
use super::{BBox, FaceSample, Image};
use crate::geometry::{project_weak_perspective, EulerAngles, PoseEstimate, ReferenceFace};
use crate::landmarks::{LandmarkSet, Point2, Point3, Scheme};
use crate::loss::{AttributeClass, AttributeVector};
use crate::{par, seed, Error, Result};

/// Pose ranges in degrees. Non-profile faces draw `|yaw| ≤ yaw_max`,
/// profile faces draw `|yaw|` from `profile_yaw`; pitch works the same way
/// with `pitch_max` and `extreme_pitch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseDistribution {
    pub yaw_max: f64,
    pub profile_yaw: (f64, f64),
    pub pitch_max: f64,
    pub extreme_pitch: (f64, f64),
    pub roll_max: f64,
}

impl Default for PoseDistribution {
    fn default() -> Self {
        Self {
            yaw_max: 25.0,
            profile_yaw: (35.0, 60.0),
            pitch_max: 15.0,
            extreme_pitch: (25.0, 40.0),
            roll_max: 15.0,
        }
    }
}

impl PoseDistribution {
    /// Every face at exactly this pose.
    pub fn fixed(angles: EulerAngles) -> Self {
        let [y, p, r] = angles.to_degrees();
        Self {
            yaw_max: y,
            profile_yaw: (y.abs(), y.abs()),
            pitch_max: p,
            extreme_pitch: (p.abs(), p.abs()),
            roll_max: r,
        }
    }
}

/// Class frequencies the generator aims for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceProfile {
    pub profile_fraction: f64,
    pub head_up_fraction: f64,
    pub head_down_fraction: f64,
    pub expression_probability: f64,
    pub occlusion_probability: f64,
}

impl Default for ImbalanceProfile {
    fn default() -> Self {
        Self {
            profile_fraction: 0.1,
            head_up_fraction: 0.05,
            head_down_fraction: 0.05,
            expression_probability: 0.15,
            occlusion_probability: 0.1,
        }
    }
}

impl ImbalanceProfile {
    /// Frontal, neutral, unoccluded faces only.
    pub fn none() -> Self {
        Self {
            profile_fraction: 0.0,
            head_up_fraction: 0.0,
            head_down_fraction: 0.0,
            expression_probability: 0.0,
            occlusion_probability: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let p = [
            self.profile_fraction,
            self.head_up_fraction,
            self.head_down_fraction,
            self.expression_probability,
            self.occlusion_probability,
        ];
        if p.iter().any(|v| !(0.0..=1.0).contains(v))
            || self.head_up_fraction + self.head_down_fraction > 1.0
        {
            return Err(Error::invalid("imbalance probabilities must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub scheme: Scheme,
    /// Square canvas side in pixels.
    pub canvas: usize,
    /// Pixels per reference unit before jitter.
    pub scale: f64,
    /// Relative scale jitter: the scale is multiplied by `1 ± scale_jitter`.
    pub scale_jitter: f64,
    /// Maximum offset of the face centre from the canvas centre, pixels.
    pub shift_jitter: f64,
    /// Margin around the squared landmark extents, as a fraction of the side.
    pub bbox_margin: f64,
    pub pose: PoseDistribution,
    pub imbalance: ImbalanceProfile,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 512,
            scheme: Scheme::Face68,
            canvas: 128,
            scale: 38.0,
            scale_jitter: 0.12,
            shift_jitter: 6.0,
            bbox_margin: 0.1,
            pose: PoseDistribution::default(),
            imbalance: ImbalanceProfile::default(),
            seed: 0,
        }
    }
}

/// Generated faces, uncropped, with pixel landmarks and generation angles.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub samples: Vec<FaceSample>,
}

/// Everything sampled for one face.
#[derive(Debug, Clone, PartialEq)]
struct FaceParams {
    angles: EulerAngles,
    scale: f64,
    center: Point2,
    /// Mouth opening in reference units; 0 is neutral.
    expression: f64,
    occluder: Option<(BBox, [f32; 3])>,
    gain: f32,
    skin: [f32; 3],
    background: [f32; 3],
    /// Grating frequency (cycles per pixel), orientation, phase, amplitude.
    texture: [(f64, f64, f64, f32); 3],
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn signed(rng: &mut impl Rng, magnitude: f64) -> f64 {
    if rng.random::<bool>() {
        magnitude
    } else {
        -magnitude
    }
}

fn color_distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()
}

fn sample_params(cfg: &SynthConfig, rng: &mut impl Rng) -> FaceParams {
    let d = &cfg.pose;
    let im = &cfg.imbalance;
    let yaw = if rng.random::<f64>() < im.profile_fraction {
        let m = uniform(rng, d.profile_yaw.0, d.profile_yaw.1);
        signed(rng, m)
    } else {
        uniform(rng, -d.yaw_max, d.yaw_max)
    };
    let u = rng.random::<f64>();
    let pitch = if u < im.head_up_fraction {
        -uniform(rng, d.extreme_pitch.0, d.extreme_pitch.1)
    } else if u < im.head_up_fraction + im.head_down_fraction {
        uniform(rng, d.extreme_pitch.0, d.extreme_pitch.1)
    } else {
        uniform(rng, -d.pitch_max, d.pitch_max)
    };
    let roll = uniform(rng, -d.roll_max, d.roll_max);
    let scale = cfg.scale * uniform(rng, 1.0 - cfg.scale_jitter, 1.0 + cfg.scale_jitter);
    let half = cfg.canvas as f64 / 2.0;
    let center = Point2::new(
        half + uniform(rng, -cfg.shift_jitter, cfg.shift_jitter),
        half + uniform(rng, -cfg.shift_jitter, cfg.shift_jitter),
    );
    let expression = if rng.random::<f64>() < im.expression_probability {
        uniform(rng, 0.1, 0.22)
    } else {
        0.0
    };
    let occluded = rng.random::<f64>() < im.occlusion_probability;
    let skin_base = [0.86f32, 0.66, 0.52];
    let tone = uniform(rng, 0.55, 1.1) as f32;
    let skin = skin_base.map(|c| (c * tone + uniform(rng, -0.04, 0.04) as f32).clamp(0.05, 0.95));
    let mut background = [0.0f32; 3];
    for _ in 0..16 {
        background = [
            rng.random::<f32>(),
            rng.random::<f32>(),
            rng.random::<f32>(),
        ];
        if color_distance(background, skin) > 0.45 {
            break;
        }
    }
    let texture = [(); 3].map(|_| {
        (
            uniform(rng, 0.02, 0.2),
            uniform(rng, 0.0, std::f64::consts::PI),
            uniform(rng, 0.0, std::f64::consts::TAU),
            uniform(rng, 0.02, 0.08) as f32,
        )
    });
    let occluder = occluded.then(|| {
        // Placed relative to the face; resolved against the landmarks later.
        let frac = uniform(rng, 0.15, 0.3);
        let aspect = uniform(rng, 0.5, 2.0);
        let (cx, cy) = (rng.random::<f64>(), rng.random::<f64>());
        let color = [
            rng.random::<f32>(),
            rng.random::<f32>(),
            rng.random::<f32>(),
        ];
        (BBox::new(cx, cy, frac, aspect), color)
    });
    FaceParams {
        angles: EulerAngles::from_degrees(yaw, pitch, roll),
        scale,
        center,
        expression,
        occluder,
        gain: uniform(rng, 0.75, 1.2) as f32,
        skin,
        background,
        texture,
    }
}

/// Landmarks moved by an open-mouth expression: non-anchor lower lip and
/// chin points, with the chin following at a reduced rate.
fn expression_offsets(scheme: Scheme) -> Vec<(usize, f64)> {
    match scheme {
        Scheme::Face68 => {
            let mut v: Vec<(usize, f64)> = (55..=59).chain(65..=67).map(|i| (i, 1.0)).collect();
            v.extend([(6, 0.3), (7, 0.6), (8, 0.7), (9, 0.6), (10, 0.3)]);
            v
        }
        Scheme::Face21 => vec![(18, 1.0), (20, 0.7)],
    }
}

fn brow_indices(scheme: Scheme) -> Vec<usize> {
    match scheme {
        Scheme::Face68 => (17..27).collect(),
        Scheme::Face21 => (0..6).collect(),
    }
}

fn convex_hull(points: &[Point2]) -> Vec<Point2> {
    let mut p: Vec<Point2> = points.to_vec();
    p.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    if p.len() < 3 {
        return p;
    }
    let cross =
        |o: Point2, a: Point2, b: Point2| (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
    let mut hull: Vec<Point2> = Vec::with_capacity(2 * p.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point2>> = if pass == 0 {
            Box::new(p.iter())
        } else {
            Box::new(p.iter().rev())
        };
        for &q in iter {
            while hull.len() >= start + 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0
            {
                hull.pop();
            }
            hull.push(q);
        }
        hull.pop();
    }
    hull
}

fn inside_polygon(poly: &[Point2], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.x * ab.x + ab.y * ab.y;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.distance(a + ab * t)
}

/// Blends `color` over every pixel by its 2×2 supersampled coverage of
/// `inside`, restricted to `bounds` (x0, y0, x1, y1).
fn paint(
    img: &mut Image,
    bounds: (f64, f64, f64, f64),
    color: [f32; 3],
    inside: impl Fn(f64, f64) -> bool,
) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = (bounds.0.floor() as i64).clamp(0, w);
    let y0 = (bounds.1.floor() as i64).clamp(0, h);
    let x1 = (bounds.2.ceil() as i64 + 1).clamp(0, w);
    let y1 = (bounds.3.ceil() as i64 + 1).clamp(0, h);
    for y in y0..y1 {
        for x in x0..x1 {
            let mut hits = 0;
            for (dx, dy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                hits += inside(x as f64 + dx, y as f64 + dy) as u32;
            }
            if hits > 0 {
                let a = hits as f32 / 4.0;
                let old = img.pixel(x as usize, y as usize);
                img.set_pixel(
                    x as usize,
                    y as usize,
                    [0, 1, 2].map(|k| old[k] + (color[k] - old[k]) * a),
                );
            }
        }
    }
}

fn bounds_of(points: &[Point2], pad: f64) -> (f64, f64, f64, f64) {
    points.iter().fold(
        (f64::MAX, f64::MAX, f64::MIN, f64::MIN),
        |(a, b, c, d), p| {
            (
                a.min(p.x - pad),
                b.min(p.y - pad),
                c.max(p.x + pad),
                d.max(p.y + pad),
            )
        },
    )
}

fn fill_polygon(img: &mut Image, poly: &[Point2], color: [f32; 3]) {
    if poly.len() >= 3 {
        paint(img, bounds_of(poly, 0.0), color, |x, y| {
            inside_polygon(poly, x, y)
        });
    }
}

fn stroke(img: &mut Image, line: &[Point2], width: f64, color: [f32; 3], closed: bool) {
    let r = width / 2.0;
    let mut segs: Vec<(Point2, Point2)> = line.windows(2).map(|w| (w[0], w[1])).collect();
    if closed && line.len() > 2 {
        segs.push((line[line.len() - 1], line[0]));
    }
    paint(img, bounds_of(line, r), color, |x, y| {
        let p = Point2::new(x, y);
        segs.iter().any(|&(a, b)| segment_distance(p, a, b) <= r)
    });
}

fn disc(img: &mut Image, c: Point2, r: f64, color: [f32; 3]) {
    paint(img, bounds_of(&[c], r), color, |x, y| {
        Point2::new(x, y).distance(c) <= r
    });
}

/// Ellipse through the two corners `a`, `b` with half minor axis
/// `ratio · |ab| / 2`, as a 16-gon; `bulge` shifts the lower half.
fn ellipse(a: Point2, b: Point2, ratio: f64, bulge: f64) -> Vec<Point2> {
    let c = (a + b) * 0.5;
    let half = (b - a) * 0.5;
    let len = (half.x * half.x + half.y * half.y).sqrt();
    let n = if len > 0.0 {
        Point2::new(-half.y / len, half.x / len)
    } else {
        Point2::new(0.0, 1.0)
    };
    (0..16)
        .map(|k| {
            let t = k as f64 / 16.0 * std::f64::consts::TAU;
            let minor = len * ratio * if t.sin() > 0.0 { 1.0 + bulge } else { 1.0 };
            c + half * t.cos() + n * (minor * t.sin())
        })
        .collect()
}

fn scaled(c: [f32; 3], k: f32) -> [f32; 3] {
    c.map(|v| (v * k).clamp(0.0, 1.0))
}

fn render(
    cfg: &SynthConfig,
    reference: &ReferenceFace,
    params: &FaceParams,
    rng: &mut impl Rng,
) -> Result<FaceSample> {
    let scheme = reference.scheme;
    let mut shape = reference.clone();
    for (i, k) in expression_offsets(scheme) {
        shape.points[i].v += params.expression * k;
    }
    let pose = PoseEstimate::from_euler(params.angles, params.scale, params.center)?;
    let landmarks = project_weak_perspective(&shape, &pose);
    // Forehead points lift the brows; they shape the skin only.
    let proj = pose.projection_matrix();
    let forehead: Vec<Point2> = brow_indices(scheme)
        .into_iter()
        .map(|i| {
            let q = shape.points[i];
            proj.project(Point3::new(q.u * 0.95, q.v - 0.45, q.z + 0.05))
        })
        .collect();

    let n = cfg.canvas;
    let mut img = Image::new(n, n, params.background);
    for y in 0..n {
        for x in 0..n {
            let mut v = 0.0f32;
            for &(f, theta, phase, amp) in &params.texture {
                let s =
                    (x as f64 * theta.cos() + y as f64 * theta.sin()) * f * std::f64::consts::TAU
                        + phase;
                v += amp * s.sin() as f32;
            }
            let noise = (rng.random::<f32>() - 0.5) * 0.06;
            let bg = params.background.map(|c| (c + v + noise).clamp(0.0, 1.0));
            img.set_pixel(x, y, bg);
        }
    }

    let g = params.gain;
    let skin = scaled(params.skin, g);
    let p = &landmarks.points;
    let mut outline: Vec<Point2> = p.clone();
    outline.extend(&forehead);
    let hull = convex_hull(&outline);
    fill_polygon(&mut img, &hull, skin);
    stroke(&mut img, &hull, 1.2, scaled(params.skin, 0.7 * g), true);

    let s = params.scale;
    let brow = scaled([0.25, 0.17, 0.12], g);
    let sclera = scaled([0.93, 0.93, 0.9], g);
    let iris = scaled([0.12, 0.2, 0.3], g);
    let nose = scaled(params.skin, 0.72 * g);
    let lips = scaled([0.72, 0.3, 0.3], g);
    let mouth = scaled([0.2, 0.06, 0.06], g);
    let pick = |idx: &[usize]| idx.iter().map(|&i| p[i]).collect::<Vec<_>>();
    match scheme {
        Scheme::Face68 => {
            stroke(
                &mut img,
                &pick(&(0..17).collect::<Vec<_>>()),
                0.05 * s,
                scaled(params.skin, 0.6 * g),
                false,
            );
            for r in [17..22, 22..27] {
                stroke(
                    &mut img,
                    &pick(&r.collect::<Vec<_>>()),
                    0.09 * s,
                    brow,
                    false,
                );
            }
            for r in [36..42, 42..48] {
                let eye = pick(&r.collect::<Vec<_>>());
                fill_polygon(&mut img, &eye, sclera);
                let c = eye.iter().fold(Point2::new(0.0, 0.0), |a, &b| a + b) * (1.0 / 6.0);
                disc(&mut img, c, 0.06 * s, iris);
            }
            stroke(&mut img, &pick(&[27, 28, 29, 30]), 0.05 * s, nose, false);
            fill_polygon(&mut img, &pick(&[31, 32, 33, 34, 35, 30]), nose);
            fill_polygon(&mut img, &pick(&(48..60).collect::<Vec<_>>()), lips);
            fill_polygon(&mut img, &pick(&(60..68).collect::<Vec<_>>()), mouth);
        }
        Scheme::Face21 => {
            for r in [[0, 1, 2], [3, 4, 5]] {
                stroke(&mut img, &pick(&r), 0.09 * s, brow, false);
            }
            for (a, c, b) in [(6, 7, 8), (9, 10, 11)] {
                fill_polygon(&mut img, &ellipse(p[a], p[b], 0.45, 0.0), sclera);
                disc(&mut img, p[c], 0.06 * s, iris);
            }
            disc(&mut img, p[12], 0.08 * s, nose);
            disc(&mut img, p[16], 0.08 * s, nose);
            stroke(
                &mut img,
                &[(p[8] + p[9]) * 0.5, p[14]],
                0.05 * s,
                nose,
                false,
            );
            fill_polygon(&mut img, &pick(&[13, 14, 15]), nose);
            let lip_depth = (p[18] - (p[17] + p[19]) * 0.5).y.max(0.0);
            let span = p[17].distance(p[19]).max(1e-9);
            fill_polygon(
                &mut img,
                &ellipse(p[17], p[19], 0.3, 2.0 * lip_depth / span * 2.0),
                lips,
            );
            disc(&mut img, p[20], 0.05 * s, scaled(params.skin, 0.6 * g));
        }
    }

    let bbox = BBox::around(&landmarks, 0.0)
        .expect("all landmarks visible")
        .squared()
        .expanded(cfg.bbox_margin);
    let side = bbox.w;

    let mut base = AttributeVector::default();
    base.set(AttributeClass::Expression, params.expression > 0.0);
    if let Some((o, color)) = params.occluder {
        // o carries (centre x, centre y) as fractions of the bbox, then area
        // fraction and aspect.
        let area = o.w * side * side;
        let (ow, oh) = ((area * o.h).sqrt(), (area / o.h).sqrt());
        let cx = bbox.x + o.x * side;
        let cy = bbox.y + o.y * side;
        let rect = [
            Point2::new(cx - ow / 2.0, cy - oh / 2.0),
            Point2::new(cx + ow / 2.0, cy - oh / 2.0),
            Point2::new(cx + ow / 2.0, cy + oh / 2.0),
            Point2::new(cx - ow / 2.0, cy + oh / 2.0),
        ];
        fill_polygon(&mut img, &rect, color);
        base.set(AttributeClass::Occlusion, true);
    }
    Ok(FaceSample {
        image: img,
        bbox: bbox.clamped(n, n),
        landmarks,
        scheme,
        attributes: pose_attributes(&params.angles, &PoseThresholds::default(), base),
        attributes_known: true,
        gt_angles: Some(params.angles),
        cropped: false,
    })
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("synthetic dataset needs count ≥ 1"));
        }
        if self.canvas < 16
            || !(self.scale > 0.0)
            || !(0.0..1.0).contains(&self.scale_jitter)
            || self.shift_jitter < 0.0
        {
            return Err(Error::invalid(
                "synthetic canvas, scale or jitter out of range",
            ));
        }
        self.imbalance.validate()
    }

    /// Renders the dataset; sample `i` uses the stream `(seed, i)`.
    pub fn generate(&self) -> Result<SynthDataset> {
        self.validate()?;
        let reference = ReferenceFace::bundled(self.scheme);
        let samples = par::map_range(self.count, |i| {
            let mut rng = seed::rng(self.seed, &[i as u64]);
            let params = sample_params(self, &mut rng);
            render(self, &reference, &params, &mut rng)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(SynthDataset {
            config: self.clone(),
            samples,
        })
    }
}

pub fn synth_generate(
    count: usize,
    pose: PoseDistribution,
    imbalance: ImbalanceProfile,
    seed: u64,
) -> Result<SynthDataset> {
    SynthConfig {
        count,
        pose,
        imbalance,
        seed,
        ..SynthConfig::default()
    }
    .generate()
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Manifest entries pointing at `images/NNNNNN.png`.
    pub fn entries(&self) -> Vec<ManifestEntry> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| ManifestEntry {
                image: PathBuf::from(format!("images/{i:06}.png")),
                scheme: s.scheme,
                bbox: s.bbox,
                landmarks: s.landmarks.clone(),
                attributes: Some(s.attributes),
                angles: s.gt_angles,
            })
            .collect()
    }

    /// Writes PNG images plus `manifest.txt` under `dir`; returns the
    /// manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let entries = self.entries();
        par::map_slice(&entries, |e| {
            let i: usize = e
                .image
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse().ok())
                .expect("generated name");
            self.samples[i].image.write_png(&dir.join(&e.image))
        })
        .into_iter()
        .collect::<Result<()>>()?;
        let manifest = dir.join("manifest.txt");
        write_manifest(&manifest, &entries)?;
        Ok(manifest)
    }
}

/// Landmarks rounded to whole pixels.
pub fn quantize_landmarks(l: &LandmarkSet) -> LandmarkSet {
    l.map_points(|p| Point2::new(p.x.round(), p.y.round()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::attributes::annotate_landmarks;

    fn small(count: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            count,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn identity_pose_is_scaled_reference() {
        let cfg = SynthConfig {
            count: 1,
            scale_jitter: 0.0,
            shift_jitter: 0.0,
            pose: PoseDistribution::fixed(EulerAngles::ZERO),
            imbalance: ImbalanceProfile::none(),
            ..SynthConfig::default()
        };
        let d = cfg.generate().unwrap();
        let r = ReferenceFace::bundled(Scheme::Face68);
        for (p, q) in d.samples[0].landmarks.points.iter().zip(&r.points) {
            assert_eq!(*p, Point2::new(38.0 * q.u + 64.0, 38.0 * q.v + 64.0));
        }
        assert_eq!(d.samples[0].gt_angles, Some(EulerAngles::ZERO));
        assert_eq!(
            d.samples[0].attributes,
            AttributeVector::from_classes(&[AttributeClass::Frontal])
        );
    }

    #[test]
    fn profile_fraction_is_realized() {
        let d = SynthConfig {
            canvas: 16,
            scale: 4.0,
            shift_jitter: 0.0,
            ..small(1000, 3)
        }
        .generate()
        .unwrap();
        let profile = d
            .samples
            .iter()
            .filter(|s| s.attributes.has(AttributeClass::Profile))
            .count();
        let f = profile as f64 / 1000.0;
        assert!((f - 0.1).abs() <= 0.03, "{f}");
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(
            small(4, 9).generate().unwrap(),
            small(4, 9).generate().unwrap()
        );
        assert_ne!(
            small(2, 9).generate().unwrap().samples,
            small(2, 10).generate().unwrap().samples
        );
    }

    #[test]
    fn annotation_recovers_generation_angles() {
        let d = small(40, 5).generate().unwrap();
        let r = ReferenceFace::bundled(Scheme::Face68);
        let mut total = 0.0;
        for s in &d.samples {
            let gt = s.gt_angles.unwrap();
            let exact = annotate_landmarks(&s.landmarks, s.scheme, &r)
                .unwrap()
                .angles()
                .unwrap();
            for (a, b) in exact.as_array().iter().zip(gt.as_array()) {
                assert!((a - b).abs() < 1e-6);
            }
            let noisy = annotate_landmarks(&quantize_landmarks(&s.landmarks), s.scheme, &r)
                .unwrap()
                .angles()
                .unwrap();
            // Half-pixel rounding on a ~75 px face: heavy-tailed per face, small on average.
            let worst = noisy
                .to_degrees()
                .iter()
                .zip(gt.to_degrees())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(
                worst < 6.0,
                "{:?} vs {:?}",
                noisy.to_degrees(),
                gt.to_degrees()
            );
            total += worst;
        }
        assert!(total / (d.samples.len() as f64) < 2.0);
    }

    #[test]
    fn face21_renders_and_annotates() {
        let d = SynthConfig {
            scheme: Scheme::Face21,
            ..small(6, 1)
        }
        .generate()
        .unwrap();
        let r = ReferenceFace::bundled(Scheme::Face21);
        for s in &d.samples {
            let a = annotate_landmarks(&s.landmarks, s.scheme, &r)
                .unwrap()
                .angles()
                .unwrap();
            assert!((a.yaw - s.gt_angles.unwrap().yaw).abs() < 1e-6);
        }
    }

    #[test]
    fn landmarks_inside_bbox_and_face_is_drawn() {
        let d = small(20, 2).generate().unwrap();
        for s in &d.samples {
            let b = s.bbox;
            assert!(s
                .landmarks
                .points
                .iter()
                .all(|p| p.x >= b.x && p.x <= b.x + b.w && p.y >= b.y && p.y <= b.y + b.h));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn written_manifest_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let d = small(3, 4).generate().unwrap();
        let m = d.write(dir.path()).unwrap();
        let loaded = crate::data::load_manifest(&m).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in loaded.iter().zip(&d.samples) {
            assert_eq!(a.landmarks, b.landmarks);
            assert_eq!(a.image, b.image.quantized());
            assert_eq!(a.gt_angles, b.gt_angles);
            assert_eq!(a.attributes, b.attributes);
        }
    }

    #[test]
    fn hull_of_square_with_interior_point() {
        let pts = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.5, 0.5)]
            .map(|(x, y)| Point2::new(x, y));
        assert_eq!(convex_hull(&pts).len(), 4);
        assert!(inside_polygon(&convex_hull(&pts), 0.3, 0.6));
        assert!(!inside_polygon(&convex_hull(&pts), 1.3, 0.6));
    }
}
