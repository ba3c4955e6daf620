//! Attribute fractions, pose-derived attribute labels and Euler-angle
//! annotation against the reference face.

use serde::{Deserialize, Serialize};

use super::FaceSample;
use crate::geometry::{annotate_pose, EulerAngles, ReferenceFace};
use crate::landmarks::{LandmarkSet, Scheme};
use crate::loss::{AttributeClass, AttributeVector, ClassWeights, NUM_CLASSES};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeStats {
    pub total: usize,
    pub counts: [usize; NUM_CLASSES],
    pub fractions: [f64; NUM_CLASSES],
}

impl AttributeStats {
    pub fn from_attributes<'a>(
        attrs: impl IntoIterator<Item = &'a AttributeVector>,
    ) -> Result<Self> {
        let mut counts = [0usize; NUM_CLASSES];
        let mut total = 0;
        for a in attrs {
            total += 1;
            for c in AttributeClass::ALL {
                counts[c.index()] += a.has(c) as usize;
            }
        }
        if total == 0 {
            return Err(Error::invalid(
                "attribute statistics need at least one sample",
            ));
        }
        let fractions = counts.map(|c| c as f64 / total as f64);
        Ok(Self {
            total,
            counts,
            fractions,
        })
    }

    /// `ω_c = 1 / fraction_c`; classes absent from the split get `ω_c = 1`.
    pub fn class_weights(&self) -> ClassWeights {
        let omega = self.fractions.map(|f| if f > 0.0 { 1.0 / f } else { 1.0 });
        ClassWeights::new(omega).expect("reciprocals of fractions in (0, 1] are finite and ≥ 1")
    }
}

pub fn compute_attribute_stats(samples: &[FaceSample]) -> Result<AttributeStats> {
    AttributeStats::from_attributes(samples.iter().map(|s| &s.attributes))
}

/// Angle thresholds (degrees) for pose-derived classes. Positive pitch tilts
/// the face downward (nose toward +y).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseThresholds {
    pub profile_yaw: f64,
    pub head_pitch: f64,
}

impl Default for PoseThresholds {
    fn default() -> Self {
        Self {
            profile_yaw: 30.0,
            head_pitch: 20.0,
        }
    }
}

/// Sets profile, frontal, head-up and head-down from `angles`, keeping the
/// expression and occlusion flags of `base`. Frontal means none of the
/// other three pose classes applies.
pub fn pose_attributes(
    angles: &EulerAngles,
    thresholds: &PoseThresholds,
    base: AttributeVector,
) -> AttributeVector {
    let [yaw, pitch, _] = angles.to_degrees();
    let mut a = base;
    let profile = yaw.abs() > thresholds.profile_yaw;
    let up = pitch < -thresholds.head_pitch;
    let down = pitch > thresholds.head_pitch;
    a.set(AttributeClass::Profile, profile);
    a.set(AttributeClass::HeadUp, up);
    a.set(AttributeClass::HeadDown, down);
    a.set(AttributeClass::Frontal, !(profile || up || down));
    a
}

/// Result of annotating one face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AngleAnnotation {
    Angles(EulerAngles),
    /// An anchor landmark is not visible.
    Unavailable,
}

impl AngleAnnotation {
    pub fn angles(self) -> Option<EulerAngles> {
        match self {
            AngleAnnotation::Angles(a) => Some(a),
            AngleAnnotation::Unavailable => None,
        }
    }
}

/// Pose angles of one landmark set (pixel or any isotropically scaled
/// frame).
pub fn annotate_landmarks(
    landmarks: &LandmarkSet,
    scheme: Scheme,
    reference: &ReferenceFace,
) -> Result<AngleAnnotation> {
    if scheme != reference.scheme {
        return Err(Error::invalid(format!(
            "reference face is for scheme {}, sample uses {scheme}",
            reference.scheme
        )));
    }
    match annotate_pose(landmarks, reference) {
        Ok(a) => Ok(AngleAnnotation::Angles(a)),
        Err(Error::OccludedAnchor(_)) => Ok(AngleAnnotation::Unavailable),
        Err(e) => Err(e),
    }
}

/// Sets `gt_angles` on every sample; samples with an invisible anchor get
/// `None` and are left out of angle supervision.
pub fn annotate_angles(samples: &mut [FaceSample], reference: &ReferenceFace) -> Result<()> {
    let results = crate::par::map_slice(samples, |s| {
        annotate_landmarks(&s.pixel_landmarks(), s.scheme, reference)
    });
    for (s, r) in samples.iter_mut().zip(results) {
        s.gt_angles = r?.angles();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BBox, Image};
    use crate::geometry::{project_weak_perspective, PoseEstimate};
    use crate::landmarks::Point2;
    use AttributeClass::*;

    fn with(classes: &[AttributeClass]) -> AttributeVector {
        AttributeVector::from_classes(classes)
    }

    #[test]
    fn frontal_only_gives_neutral_weights_elsewhere() {
        let attrs = vec![with(&[Frontal]); 4];
        let s = AttributeStats::from_attributes(&attrs).unwrap();
        assert_eq!(s.fractions, [0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.class_weights().omega, [1.0; 6]);
    }

    #[test]
    fn half_profile_half_frontal() {
        let attrs = [
            with(&[Profile]),
            with(&[Frontal]),
            with(&[Profile]),
            with(&[Frontal]),
        ];
        let s = AttributeStats::from_attributes(&attrs).unwrap();
        assert_eq!(s.fractions[Profile.index()], 0.5);
        assert_eq!(s.fractions[Frontal.index()], 0.5);
        let w = s.class_weights();
        assert_eq!((w.omega[0], w.omega[1]), (2.0, 2.0));
    }

    #[test]
    fn hand_tally_of_mixed_labels() {
        let attrs = [
            with(&[Profile, Occlusion]),
            with(&[Frontal]),
            with(&[Frontal, Expression]),
            with(&[HeadUp]),
            with(&[HeadDown, Occlusion]),
            with(&[Frontal]),
            with(&[Profile, HeadUp]),
            with(&[Frontal, Expression, Occlusion]),
            with(&[]),
            with(&[Frontal]),
        ];
        let s = AttributeStats::from_attributes(&attrs).unwrap();
        assert_eq!(s.counts, [2, 5, 2, 1, 2, 3]);
        assert_eq!(s.fractions, [0.2, 0.5, 0.2, 0.1, 0.2, 0.3]);
        assert!(AttributeStats::from_attributes(&[]).is_err());
    }

    #[test]
    fn pose_thresholds() {
        let t = PoseThresholds::default();
        let base = with(&[Occlusion]);
        let a = pose_attributes(&EulerAngles::from_degrees(35.0, 0.0, 0.0), &t, base);
        assert!(a.has(Profile) && !a.has(Frontal) && a.has(Occlusion));
        let a = pose_attributes(
            &EulerAngles::from_degrees(10.0, -25.0, 0.0),
            &t,
            AttributeVector::default(),
        );
        assert!(a.has(HeadUp) && !a.has(HeadDown) && !a.has(Frontal));
        let a = pose_attributes(
            &EulerAngles::from_degrees(-10.0, 5.0, 40.0),
            &t,
            AttributeVector::default(),
        );
        assert_eq!(a, with(&[Frontal]));
    }

    fn sample_from_pose(angles: EulerAngles, visible: Option<Vec<bool>>) -> FaceSample {
        let r = ReferenceFace::bundled(Scheme::Face68);
        let pose = PoseEstimate::from_euler(angles, 40.0, Point2::new(64.0, 64.0)).unwrap();
        let mut lm = project_weak_perspective(&r, &pose);
        if let Some(v) = visible {
            lm.visible = v;
        }
        FaceSample {
            image: Image::new(8, 8, [0.0; 3]),
            bbox: BBox::new(0.0, 0.0, 128.0, 128.0),
            landmarks: lm,
            scheme: Scheme::Face68,
            attributes: AttributeVector::default(),
            attributes_known: false,
            gt_angles: None,
            cropped: false,
        }
    }

    #[test]
    fn annotation_recovers_generation_pose() {
        let r = ReferenceFace::bundled(Scheme::Face68);
        let mut s = vec![
            sample_from_pose(EulerAngles::ZERO, None),
            sample_from_pose(EulerAngles::from_degrees(25.0, 0.0, 0.0), None),
        ];
        annotate_angles(&mut s, &r).unwrap();
        let a0 = s[0].gt_angles.unwrap();
        assert!(a0.as_array().iter().all(|v| v.abs() < 1e-6));
        assert!((s[1].gt_angles.unwrap().yaw - 25f64.to_radians()).abs() < 1e-6);
    }

    #[test]
    fn occluded_anchor_is_unavailable() {
        let r = ReferenceFace::bundled(Scheme::Face68);
        let mut vis = vec![true; 68];
        vis[r.anchor_indices[0]] = false;
        let mut s = vec![sample_from_pose(EulerAngles::ZERO, Some(vis))];
        s[0].gt_angles = Some(EulerAngles::ZERO);
        annotate_angles(&mut s, &r).unwrap();
        assert!(s[0].gt_angles.is_none());
        assert!(annotate_angles(&mut s, &ReferenceFace::bundled(Scheme::Face21)).is_err());
    }
}
