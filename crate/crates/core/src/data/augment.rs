//! Flip, in-plane rotation and occlusion variants of cropped faces.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FaceSample, Image};
use crate::geometry::{wrap_angle, EulerAngles};
use crate::landmarks::{LandmarkSet, Point2};
use crate::loss::AttributeClass;
use crate::{seed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub enable_flip: bool,
    /// In-plane rotations about the crop centre, degrees.
    pub rotation_degrees: Vec<f64>,
    /// Occluder area as a fraction of the crop; 0 disables the variant.
    pub occlusion_fraction: f64,
    /// Occluder colour; `None` fills with the mean colour of the image.
    pub fill: Option<[f32; 3]>,
    /// A geometric variant is dropped when more than this fraction of the
    /// visible landmarks leaves the crop.
    pub max_outside_fraction: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            enable_flip: true,
            rotation_degrees: (-6..=6).map(|k| 5.0 * k as f64).collect(),
            occlusion_fraction: 0.2,
            fill: None,
            max_outside_fraction: 0.5,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.occlusion_fraction) {
            return Err(Error::invalid(format!(
                "occlusion fraction {} outside [0, 1)",
                self.occlusion_fraction
            )));
        }
        if self.rotation_degrees.iter().any(|d| !d.is_finite()) {
            return Err(Error::invalid("rotation angles must be finite"));
        }
        if !(0.0..=1.0).contains(&self.max_outside_fraction) {
            return Err(Error::invalid("max_outside_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Every variant this configuration produces, in emission order.
    pub fn kinds(&self) -> Vec<VariantKind> {
        let mut k = vec![VariantKind::Original];
        if self.enable_flip {
            k.push(VariantKind::Flip);
        }
        k.extend(
            self.rotation_degrees
                .iter()
                .map(|&d| VariantKind::Rotate(d)),
        );
        if self.occlusion_fraction > 0.0 {
            k.push(VariantKind::Occlude);
        }
        k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum VariantKind {
    Original,
    Flip,
    /// Degrees.
    Rotate(f64),
    Occlude,
}

/// Map from original to variant labels in crop coordinates: optional
/// index permutation first, then `p ↦ A·p + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTransform {
    pub linear: [[f64; 2]; 2],
    pub offset: [f64; 2],
    /// `new[i] = old[permutation[i]]`.
    pub permutation: Option<Vec<usize>>,
}

impl LabelTransform {
    pub fn identity() -> Self {
        Self {
            linear: [[1.0, 0.0], [0.0, 1.0]],
            offset: [0.0, 0.0],
            permutation: None,
        }
    }

    pub fn apply_point(&self, p: Point2) -> Point2 {
        let a = &self.linear;
        Point2::new(
            a[0][0] * p.x + a[0][1] * p.y + self.offset[0],
            a[1][0] * p.x + a[1][1] * p.y + self.offset[1],
        )
    }

    pub fn apply(&self, l: &LandmarkSet) -> LandmarkSet {
        let permuted = match &self.permutation {
            Some(perm) => LandmarkSet {
                points: perm.iter().map(|&j| l.points[j]).collect(),
                visible: perm.iter().map(|&j| l.visible[j]).collect(),
            },
            None => l.clone(),
        };
        permuted.map_points(|p| self.apply_point(p))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub kind: VariantKind,
    pub sample: FaceSample,
    pub transform: LabelTransform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub variants: Vec<Variant>,
    /// Variants dropped by the out-of-crop rule.
    pub skipped: Vec<VariantKind>,
}

fn rotation_transform(degrees: f64) -> LabelTransform {
    let t = degrees.to_radians();
    let (s, c) = t.sin_cos();
    // Rotation about the crop centre (½, ½).
    LabelTransform {
        linear: [[c, -s], [s, c]],
        offset: [0.5 - (c * 0.5 - s * 0.5), 0.5 - (s * 0.5 + c * 0.5)],
        permutation: None,
    }
}

fn rotate_image(img: &Image, degrees: f64) -> Image {
    let n = img.width();
    let h = img.height();
    let t = degrees.to_radians();
    let (s, c) = t.sin_cos();
    let mut out = Image::new(n, h, [0.0; 3]);
    for j in 0..h {
        for i in 0..n {
            // Inverse rotation of the output pixel centre in crop coordinates.
            let qx = (i as f64 + 0.5) / n as f64 - 0.5;
            let qy = (j as f64 + 0.5) / h as f64 - 0.5;
            let px = c * qx + s * qy + 0.5;
            let py = -s * qx + c * qy + 0.5;
            out.set_pixel(i, j, img.sample(px * n as f64 - 0.5, py * h as f64 - 0.5));
        }
    }
    out
}

fn mean_colour(img: &Image) -> [f32; 3] {
    let mut sum = [0.0f64; 3];
    for p in img.data().chunks_exact(3) {
        for c in 0..3 {
            sum[c] += p[c] as f64;
        }
    }
    let n = (img.width() * img.height()).max(1) as f64;
    sum.map(|s| (s / n) as f32)
}

fn occlude(img: &mut Image, fraction: f64, fill: Option<[f32; 3]>, rng: &mut impl Rng) {
    let fill = fill.unwrap_or_else(|| mean_colour(img));
    let (w_img, h_img) = (img.width() as f64, img.height() as f64);
    let area = fraction * w_img * h_img;
    let aspect: f64 = rng.random_range(0.5..=2.0);
    let w = (area * aspect).sqrt().min(w_img);
    let h = (area / aspect).sqrt().min(h_img);
    let x0 = rng.random_range(0.0..=(w_img - w));
    let y0 = rng.random_range(0.0..=(h_img - h));
    for y in 0..img.height() {
        let cy = y as f64 + 0.5;
        if cy < y0 || cy >= y0 + h {
            continue;
        }
        for x in 0..img.width() {
            let cx = x as f64 + 0.5;
            if cx >= x0 && cx < x0 + w {
                img.set_pixel(x, y, fill);
            }
        }
    }
}

fn outside_fraction(l: &LandmarkSet) -> f64 {
    let vis = l.visible_count();
    if vis == 0 {
        return 0.0;
    }
    let out = l
        .points
        .iter()
        .zip(&l.visible)
        .filter(|(p, &v)| v && !(0.0..=1.0).contains(&p.x) || v && !(0.0..=1.0).contains(&p.y))
        .count();
    out as f64 / vis as f64
}

/// One variant of a cropped sample, or `None` when the out-of-crop rule
/// drops it. `rng` is only consumed by the occlusion variant.
pub fn augment_variant(
    sample: &FaceSample,
    kind: VariantKind,
    config: &AugmentationConfig,
    rng: &mut impl Rng,
) -> Result<Option<Variant>> {
    if !sample.cropped {
        return Err(Error::invalid("augmentation expects a cropped sample"));
    }
    let mut out = sample.clone();
    let transform = match kind {
        VariantKind::Original => LabelTransform::identity(),
        VariantKind::Flip => {
            let perm = sample.scheme.flip_permutation();
            out.image = sample.image.flipped();
            out.gt_angles = sample
                .gt_angles
                .map(|a| EulerAngles::new(-a.yaw, a.pitch, -a.roll).wrapped());
            LabelTransform {
                linear: [[-1.0, 0.0], [0.0, 1.0]],
                offset: [1.0, 0.0],
                permutation: Some(perm),
            }
        }
        VariantKind::Rotate(deg) => {
            out.image = rotate_image(&sample.image, deg);
            out.gt_angles = sample
                .gt_angles
                .map(|a| EulerAngles::new(a.yaw, a.pitch, wrap_angle(a.roll + deg.to_radians())));
            rotation_transform(deg)
        }
        VariantKind::Occlude => {
            occlude(&mut out.image, config.occlusion_fraction, config.fill, rng);
            out.attributes.set(AttributeClass::Occlusion, true);
            LabelTransform::identity()
        }
    };
    out.landmarks = transform.apply(&sample.landmarks);
    if outside_fraction(&out.landmarks) > config.max_outside_fraction {
        return Ok(None);
    }
    Ok(Some(Variant {
        kind,
        sample: out,
        transform,
    }))
}

/// All variants of one cropped sample. The occluder placement is drawn from
/// the stream `(config.seed, sample_index)`.
pub fn augment(
    sample: &FaceSample,
    config: &AugmentationConfig,
    sample_index: u64,
) -> Result<Augmented> {
    config.validate()?;
    let mut rng = seed::rng(config.seed, &[sample_index]);
    let mut variants = Vec::new();
    let mut skipped = Vec::new();
    for kind in config.kinds() {
        match augment_variant(sample, kind, config, &mut rng)? {
            Some(v) => variants.push(v),
            None => skipped.push(kind),
        }
    }
    Ok(Augmented { variants, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BBox;
    use crate::landmarks::Scheme;
    use crate::loss::AttributeVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cropped(points: Vec<Point2>) -> FaceSample {
        let data = (0..32 * 32 * 3)
            .map(|i| ((i * 31) % 101) as f32 / 101.0)
            .collect();
        FaceSample {
            image: Image::from_vec(32, 32, data).unwrap(),
            bbox: BBox::new(0.0, 0.0, 32.0, 32.0),
            landmarks: LandmarkSet::new(points),
            scheme: Scheme::Face21,
            attributes: AttributeVector::default(),
            attributes_known: true,
            gt_angles: Some(EulerAngles::new(0.3, -0.1, 0.2)),
            cropped: true,
        }
    }

    fn face21() -> FaceSample {
        cropped(
            (0..21)
                .map(|i| Point2::new(0.3 + 0.02 * i as f64, 0.35 + 0.015 * i as f64))
                .collect(),
        )
    }

    #[test]
    fn default_yields_sixteen_variants() {
        let a = augment(&face21(), &AugmentationConfig::default(), 0).unwrap();
        assert_eq!(a.variants.len(), 16);
        assert!(a.skipped.is_empty());
    }

    #[test]
    fn labels_follow_transform() {
        let s = face21();
        for v in augment(&s, &AugmentationConfig::default(), 3)
            .unwrap()
            .variants
        {
            let expected = v.transform.apply(&s.landmarks);
            for (p, q) in expected.points.iter().zip(&v.sample.landmarks.points) {
                assert!(p.distance(*q) < 1e-6, "{:?}", v.kind);
            }
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let s = face21();
        let cfg = AugmentationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let once = augment_variant(&s, VariantKind::Flip, &cfg, &mut rng)
            .unwrap()
            .unwrap()
            .sample;
        let twice = augment_variant(&once, VariantKind::Flip, &cfg, &mut rng)
            .unwrap()
            .unwrap()
            .sample;
        for (p, q) in twice.landmarks.points.iter().zip(&s.landmarks.points) {
            assert!(p.distance(*q) < 1e-6);
        }
        assert_eq!(twice.image, s.image);
        assert_eq!(once.landmarks.visible_count(), s.landmarks.visible_count());
        let a = twice.gt_angles.unwrap();
        assert!((a.yaw - 0.3).abs() < 1e-12 && (a.roll - 0.2).abs() < 1e-12);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let s = face21();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = augment_variant(
            &s,
            VariantKind::Rotate(0.0),
            &AugmentationConfig::default(),
            &mut rng,
        )
        .unwrap()
        .unwrap();
        for (p, q) in r.sample.landmarks.points.iter().zip(&s.landmarks.points) {
            assert!(p.distance(*q) < 1e-6);
        }
        for (a, b) in r.sample.image.data().iter().zip(s.image.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rotation_moves_roll_and_centre_is_fixed() {
        let mut s = face21();
        s.landmarks.points[0] = Point2::new(0.5, 0.5);
        s.landmarks.points[1] = Point2::new(0.75, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = augment_variant(
            &s,
            VariantKind::Rotate(90.0),
            &AugmentationConfig::default(),
            &mut rng,
        )
        .unwrap()
        .unwrap();
        assert!(r.sample.landmarks.points[0].distance(Point2::new(0.5, 0.5)) < 1e-12);
        assert!(r.sample.landmarks.points[1].distance(Point2::new(0.5, 0.75)) < 1e-12);
        assert!(
            (r.sample.gt_angles.unwrap().roll - (0.2 + std::f64::consts::FRAC_PI_2)).abs() < 1e-12
        );
    }

    #[test]
    fn occlusion_keeps_labels_and_sets_flag() {
        let s = face21();
        let colour = [0.9, 0.1, 0.3];
        let cfg = AugmentationConfig {
            fill: Some(colour),
            ..AugmentationConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let o = augment_variant(&s, VariantKind::Occlude, &cfg, &mut rng)
            .unwrap()
            .unwrap()
            .sample;
        assert_eq!(o.landmarks, s.landmarks);
        assert!(o.attributes.has(AttributeClass::Occlusion));
        let filled = o
            .image
            .data()
            .chunks_exact(3)
            .filter(|p| *p == colour)
            .count();
        let frac = filled as f64 / (32.0 * 32.0);
        assert!((frac - 0.2).abs() < 0.06, "{frac}");
    }

    #[test]
    fn default_occluder_uses_the_image_mean() {
        let mut s = face21();
        for y in 0..s.image.height() {
            for x in 0..s.image.width() {
                s.image.set_pixel(
                    x,
                    y,
                    if x < 16 {
                        [0.0, 0.2, 0.4]
                    } else {
                        [1.0, 0.6, 0.4]
                    },
                );
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let o = augment_variant(
            &s,
            VariantKind::Occlude,
            &AugmentationConfig::default(),
            &mut rng,
        )
        .unwrap()
        .unwrap()
        .sample;
        let changed: Vec<&[f32]> = o
            .image
            .data()
            .chunks_exact(3)
            .zip(s.image.data().chunks_exact(3))
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a)
            .collect();
        assert!(!changed.is_empty());
        assert!(changed.iter().all(|p| (p[0] - 0.5).abs() < 1e-6
            && (p[1] - 0.4).abs() < 1e-6
            && (p[2] - 0.4).abs() < 1e-6));
    }

    #[test]
    fn far_rotation_of_edge_landmarks_is_skipped() {
        let s = cropped(
            (0..21)
                .map(|i| {
                    Point2::new(
                        if i % 2 == 0 { 0.02 } else { 0.98 },
                        0.02 + 0.046 * i as f64,
                    )
                })
                .collect(),
        );
        let cfg = AugmentationConfig {
            rotation_degrees: vec![45.0],
            ..AugmentationConfig::default()
        };
        let a = augment(&s, &cfg, 0).unwrap();
        assert_eq!(a.skipped, vec![VariantKind::Rotate(45.0)]);
        assert_eq!(a.variants.len(), 3);
    }

    #[test]
    fn deterministic_per_stream() {
        let s = face21();
        let cfg = AugmentationConfig::default();
        assert_eq!(augment(&s, &cfg, 7).unwrap(), augment(&s, &cfg, 7).unwrap());
        assert_ne!(augment(&s, &cfg, 7).unwrap(), augment(&s, &cfg, 8).unwrap());
    }
}
