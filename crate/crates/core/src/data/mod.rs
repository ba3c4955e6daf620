//! Face datasets: manifests, crops, augmentation, attribute statistics,
//! pose annotation and a synthetic generator.

pub mod attributes;
pub mod augment;
pub mod convert;
pub mod image;
pub mod manifest;
pub mod synth;

use serde::{Deserialize, Serialize};

pub use self::attributes::{
    annotate_angles, compute_attribute_stats, pose_attributes, AngleAnnotation, AttributeStats,
    PoseThresholds,
};
pub use self::augment::{
    augment, augment_variant, AugmentationConfig, Augmented, Variant, VariantKind,
};
pub use self::convert::{convert_csv, convert_pts, read_pts, CoordinateOrigin};
pub use self::image::Image;
pub use self::manifest::{load_manifest, read_manifest, write_manifest, Manifest, ManifestEntry};
pub use self::synth::{
    synth_generate, ImbalanceProfile, PoseDistribution, SynthConfig, SynthDataset,
};

use crate::geometry::EulerAngles;
use crate::landmarks::{LandmarkSet, Point2, Scheme};
use crate::loss::AttributeVector;
use crate::{Error, Result};

/// Axis-aligned box in pixels: top-left corner and size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Grown by `margin` times the size on every side.
    pub fn expanded(&self, margin: f64) -> BBox {
        BBox::new(
            self.x - margin * self.w,
            self.y - margin * self.h,
            self.w * (1.0 + 2.0 * margin),
            self.h * (1.0 + 2.0 * margin),
        )
    }

    /// Intersection with `[0, width] × [0, height]`.
    pub fn clamped(&self, width: usize, height: usize) -> BBox {
        let x0 = self.x.clamp(0.0, width as f64);
        let y0 = self.y.clamp(0.0, height as f64);
        let x1 = (self.x + self.w).clamp(0.0, width as f64);
        let y1 = (self.y + self.h).clamp(0.0, height as f64);
        BBox::new(x0, y0, x1 - x0, y1 - y0)
    }

    /// Smallest box containing the visible landmarks, grown by `margin`.
    pub fn around(landmarks: &LandmarkSet, margin: f64) -> Option<BBox> {
        let mut it = landmarks
            .points
            .iter()
            .zip(&landmarks.visible)
            .filter(|(_, v)| **v)
            .map(|(p, _)| *p);
        let first = it.next()?;
        let (mut lo, mut hi) = (first, first);
        for p in it {
            lo = Point2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        Some(BBox::new(lo.x, lo.y, hi.x - lo.x, hi.y - lo.y).expanded(margin))
    }

    /// Square of side `max(w, h)` with the same centre.
    pub fn squared(&self) -> BBox {
        let side = self.w.max(self.h);
        let c = self.center();
        BBox::new(c.x - side / 2.0, c.y - side / 2.0, side, side)
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.w, self.h]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// One annotated face image.
///
/// Before [`crop_resize`] the landmarks are pixel coordinates in `image`,
/// with pixel `i` covering `[i, i + 1)` so its centre sits at `i + ½`;
/// afterwards `image` is the square crop, landmarks are in `[0, 1]` crop
/// coordinates and `bbox` is the source region the crop was taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceSample {
    pub image: Image,
    pub bbox: BBox,
    pub landmarks: LandmarkSet,
    pub scheme: Scheme,
    pub attributes: AttributeVector,
    /// False when the source carried no attribute labels.
    pub attributes_known: bool,
    pub gt_angles: Option<EulerAngles>,
    pub cropped: bool,
}

impl FaceSample {
    /// Landmarks in source pixel coordinates.
    pub fn pixel_landmarks(&self) -> LandmarkSet {
        if !self.cropped {
            return self.landmarks.clone();
        }
        let b = self.bbox;
        self.landmarks
            .map_points(|p| Point2::new(b.x + p.x * b.w, b.y + p.y * b.h))
    }
}

pub const CROP_SIZE: usize = 112;

/// Bilinear resample of the bbox region (grown by `margin`) to
/// `out_size × out_size`, with landmarks mapped to crop coordinates.
///
/// Output pixel `j` samples source position `x0 + (j + ½)·w/out_size − ½`,
/// so a bbox covering a same-size image reproduces it exactly.
pub fn crop_resize(sample: &FaceSample, out_size: usize, margin: f64) -> Result<FaceSample> {
    if sample.cropped {
        return Err(Error::invalid("sample is already cropped"));
    }
    let b = sample.bbox.expanded(margin);
    if !b.is_finite() || b.w <= 1.0 || b.h <= 1.0 {
        return Err(Error::invalid(format!("degenerate bbox {:?}", sample.bbox)));
    }
    if out_size == 0 {
        return Err(Error::invalid("crop size must be positive"));
    }
    let src = &sample.image;
    let sx = b.w / out_size as f64;
    let sy = b.h / out_size as f64;
    let mut data = vec![0.0f32; out_size * out_size * 3];
    crate::par::for_each_chunk_mut(&mut data, out_size * 3, |j, row| {
        let y = b.y + (j as f64 + 0.5) * sy - 0.5;
        for (i, px) in row.chunks_exact_mut(3).enumerate() {
            let x = b.x + (i as f64 + 0.5) * sx - 0.5;
            px.copy_from_slice(&src.sample(x, y));
        }
    });
    Ok(FaceSample {
        image: Image::from_vec(out_size, out_size, data)?,
        bbox: b,
        landmarks: sample
            .landmarks
            .map_points(|p| Point2::new((p.x - b.x) / b.w, (p.y - b.y) / b.h)),
        scheme: sample.scheme,
        attributes: sample.attributes,
        attributes_known: sample.attributes_known,
        gt_angles: sample.gt_angles,
        cropped: true,
    })
}

/// Network input for a batch of crops: `[B, H, W, 3]` with pixels shifted
/// to `[-½, ½]`.
pub fn input_tensor(images: &[&Image]) -> Result<crate::network::Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("empty batch"))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * w * h * 3);
    for img in images {
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::invalid("batch images differ in size"));
        }
        data.extend(img.data().iter().map(|v| v - 0.5));
    }
    crate::network::Tensor::from_vec(&[images.len(), h, w, 3], data)
}

/// Mean colour over a set of images, each weighted equally.
pub fn mean_color<'a>(images: impl IntoIterator<Item = &'a Image>) -> [f32; 3] {
    let mut s = [0.0f64; 3];
    let mut n = 0usize;
    for img in images {
        let m = img.mean_color();
        for k in 0..3 {
            s[k] += m[k];
        }
        n += 1;
    }
    if n == 0 {
        return [0.5; 3];
    }
    [
        (s[0] / n as f64) as f32,
        (s[1] / n as f64) as f32,
        (s[2] / n as f64) as f32,
    ]
}
