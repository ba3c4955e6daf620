//! Pose- and imbalance-weighted landmark loss.
//!
//! For a batch of `M` faces with per-landmark deviations `d = gt - pred`,
//!
//! ```text
//! L = 1/M · Σ_m γ_m · Σ_{n visible} ‖d_n^m‖
//! γ_m = (Σ_{c active} ω_c) · (floor + Σ_k (1 - cos θ_k^m))
//! ```
//!
//! where `θ_k` are the yaw/pitch/roll deviations between the annotated and
//! the predicted head pose and `ω_c` are per-class imbalance weights. The
//! ℓ2/ℓ1 baselines use `γ = 1`; the ablation variants switch off either the
//! class-weight factor or the angle factor (replacing it by 1).
//!
//! Angles and attributes are per face, so `γ` is constant over landmarks.
//! Invisible landmarks are skipped without renormalizing the sum.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geometry::{angle_deviation, EulerAngles};
use crate::landmarks::{LandmarkSet, Point2};
use crate::{par, Error, Result};

/// Number of attribute classes.
pub const NUM_CLASSES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttributeClass {
    Profile,
    Frontal,
    HeadUp,
    HeadDown,
    Expression,
    Occlusion,
}

impl AttributeClass {
    pub const ALL: [AttributeClass; NUM_CLASSES] = [
        AttributeClass::Profile,
        AttributeClass::Frontal,
        AttributeClass::HeadUp,
        AttributeClass::HeadDown,
        AttributeClass::Expression,
        AttributeClass::Occlusion,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            AttributeClass::Profile => "profile",
            AttributeClass::Frontal => "frontal",
            AttributeClass::HeadUp => "head_up",
            AttributeClass::HeadDown => "head_down",
            AttributeClass::Expression => "expression",
            AttributeClass::Occlusion => "occlusion",
        }
    }
}

/// Multi-label class membership of one face.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AttributeVector(pub [bool; NUM_CLASSES]);

impl AttributeVector {
    pub fn from_classes(classes: &[AttributeClass]) -> Self {
        let mut v = [false; NUM_CLASSES];
        for c in classes {
            v[c.index()] = true;
        }
        Self(v)
    }

    pub fn has(&self, c: AttributeClass) -> bool {
        self.0[c.index()]
    }

    pub fn set(&mut self, c: AttributeClass, on: bool) {
        self.0[c.index()] = on;
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&b| b)
    }

    /// `"010000"`-style bit string in class order.
    pub fn to_bits(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bits(s: &str) -> Option<Self> {
        if s.len() != NUM_CLASSES {
            return None;
        }
        let mut v = [false; NUM_CLASSES];
        for (slot, ch) in v.iter_mut().zip(s.chars()) {
            *slot = match ch {
                '0' => false,
                '1' => true,
                _ => return None,
            };
        }
        Some(Self(v))
    }
}

/// Per-class weights `ω_c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub omega: [f64; NUM_CLASSES],
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self::uniform()
    }
}

impl ClassWeights {
    pub fn uniform() -> Self {
        Self {
            omega: [1.0; NUM_CLASSES],
        }
    }

    pub fn new(omega: [f64; NUM_CLASSES]) -> Result<Self> {
        if omega.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::invalid(format!(
                "class weights must be positive and finite: {omega:?}"
            )));
        }
        Ok(Self { omega })
    }

    /// Sum of the weights of the active classes; 1 when no class is active.
    pub fn active_sum(&self, attrs: &AttributeVector) -> f64 {
        if !attrs.any() {
            return 1.0;
        }
        attrs
            .0
            .iter()
            .zip(&self.omega)
            .filter(|(&on, _)| on)
            .map(|(_, &w)| w)
            .sum()
    }

    pub fn scaled(&self, lambda: f64) -> Result<Self> {
        Self::new(self.omega.map(|w| w * lambda))
    }
}

/// `ω_c = 1 / fraction_c`.
pub fn class_weights_from_fractions(fractions: &[f64]) -> Result<ClassWeights> {
    if fractions.len() != NUM_CLASSES {
        return Err(Error::invalid(format!(
            "expected {NUM_CLASSES} class fractions, got {}",
            fractions.len()
        )));
    }
    let mut omega = [0.0; NUM_CLASSES];
    for (w, &f) in omega.iter_mut().zip(fractions) {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::invalid(format!("class fraction {f} outside (0, 1]")));
        }
        *w = 1.0 / f;
    }
    ClassWeights::new(omega)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseMetric {
    /// Squared Euclidean distance.
    L2,
    /// Absolute (Manhattan) distance.
    L1,
}

/// The five loss settings compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    L2,
    L1,
    PfldNoOmega,
    PfldNoTheta,
    Pfld,
}

impl LossVariant {
    /// Ablation table order.
    pub const ALL: [LossVariant; 5] = [
        LossVariant::L2,
        LossVariant::L1,
        LossVariant::PfldNoOmega,
        LossVariant::PfldNoTheta,
        LossVariant::Pfld,
    ];

    pub fn id(self) -> &'static str {
        match self {
            LossVariant::L2 => "l2",
            LossVariant::L1 => "l1",
            LossVariant::Pfld => "pfld",
            LossVariant::PfldNoOmega => "pfld_no_omega",
            LossVariant::PfldNoTheta => "pfld_no_theta",
        }
    }

    /// Column label used in ablation reports.
    pub fn label(self) -> &'static str {
        match self {
            LossVariant::L2 => "ℓ2",
            LossVariant::L1 => "ℓ1",
            LossVariant::PfldNoOmega => "pfld w/o ω",
            LossVariant::PfldNoTheta => "pfld w/o θ",
            LossVariant::Pfld => "pfld",
        }
    }

    pub fn base(self) -> BaseMetric {
        match self {
            LossVariant::L1 => BaseMetric::L1,
            _ => BaseMetric::L2,
        }
    }

    pub fn uses_class_weights(self) -> bool {
        matches!(self, LossVariant::Pfld | LossVariant::PfldNoTheta)
    }

    pub fn uses_angles(self) -> bool {
        matches!(self, LossVariant::Pfld | LossVariant::PfldNoOmega)
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.id() == s)
            .ok_or_else(|| Error::invalid(format!("unknown loss variant `{s}`")))
    }
}

/// Loss selection as exposed to training and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Added to the angle factor. 0 reproduces the multiplier exactly; with
    /// 0, faces whose predicted pose matches the annotation contribute
    /// nothing, so short runs are better served by 1.
    pub angle_floor: f64,
    pub class_weights: ClassWeights,
}

/// Floor recommended for desk-scale training runs.
pub const RECOMMENDED_ANGLE_FLOOR: f64 = 1.0;

impl LossConfig {
    pub fn new(variant: LossVariant) -> Self {
        Self {
            variant,
            angle_floor: 0.0,
            class_weights: ClassWeights::uniform(),
        }
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.angle_floor = floor;
        self
    }

    pub fn with_weights(mut self, w: ClassWeights) -> Self {
        self.class_weights = w;
        self
    }

    pub fn terms(&self) -> LossTerms {
        LossTerms {
            base: self.variant.base(),
            use_class_weights: self.variant.uses_class_weights(),
            use_angles: self.variant.uses_angles(),
            angle_floor: self.angle_floor,
            class_weights: self.class_weights,
        }
    }
}

/// The individual switches behind a [`LossConfig`]; lets arbitrary
/// combinations (e.g. both factors off) be evaluated directly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub base: BaseMetric,
    pub use_class_weights: bool,
    pub use_angles: bool,
    pub angle_floor: f64,
    pub class_weights: ClassWeights,
}

impl LossTerms {
    fn validate(&self) -> Result<()> {
        if !(self.angle_floor >= 0.0 && self.angle_floor.is_finite()) {
            return Err(Error::invalid(format!(
                "angle floor {} must be ≥ 0",
                self.angle_floor
            )));
        }
        Ok(())
    }
}

/// One batch of predictions and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    pub pred_landmarks: Vec<LandmarkSet>,
    pub gt_landmarks: Vec<LandmarkSet>,
    pub pred_angles: Vec<EulerAngles>,
    /// `None` marks faces whose pose annotation failed; they fall back to an
    /// angle factor of 1 and receive no angle gradient.
    pub gt_angles: Vec<Option<EulerAngles>>,
    pub attributes: Vec<AttributeVector>,
}

impl LossBatch {
    pub fn len(&self) -> usize {
        self.gt_landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt_landmarks.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let m = self.gt_landmarks.len();
        if m == 0 {
            return Err(Error::invalid("loss batch is empty"));
        }
        let lens = [
            self.pred_landmarks.len(),
            self.pred_angles.len(),
            self.gt_angles.len(),
            self.attributes.len(),
        ];
        if lens.iter().any(|&l| l != m) {
            return Err(Error::invalid(format!(
                "loss batch fields disagree on batch size: {m} vs {lens:?}"
            )));
        }
        let n = self.gt_landmarks[0].len();
        for (i, (g, p)) in self
            .gt_landmarks
            .iter()
            .zip(&self.pred_landmarks)
            .enumerate()
        {
            if g.len() != n || p.len() != n {
                return Err(Error::invalid(format!(
                    "sample {i}: landmark counts {} / {} differ from {n}",
                    g.len(),
                    p.len()
                )));
            }
        }
        Ok(())
    }
}

/// `γ` for one face given its angle deviations.
pub fn sample_multiplier(
    attrs: &AttributeVector,
    weights: &ClassWeights,
    theta: [f64; 3],
    config: &LossConfig,
) -> f64 {
    multiplier(
        attrs,
        Some(theta),
        &LossTerms {
            class_weights: *weights,
            ..config.terms()
        },
    )
}

fn multiplier(attrs: &AttributeVector, theta: Option<[f64; 3]>, terms: &LossTerms) -> f64 {
    let class_factor = if terms.use_class_weights {
        terms.class_weights.active_sum(attrs)
    } else {
        1.0
    };
    let angle_factor = match theta {
        Some(t) if terms.use_angles => {
            terms.angle_floor + t.iter().map(|a| 1.0 - a.cos()).sum::<f64>()
        }
        _ => 1.0,
    };
    class_factor * angle_factor
}

/// Loss value together with its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// `∂L/∂pred` per face and landmark.
    pub d_landmarks: Vec<Vec<Point2>>,
    /// `∂L/∂pred_angles` per face as `[yaw, pitch, roll]`.
    pub d_angles: Vec<[f64; 3]>,
}

struct SampleTerms {
    weighted: f64,
    d_landmarks: Vec<Point2>,
    d_angles: [f64; 3],
}

fn sample_terms(batch: &LossBatch, m: usize, terms: &LossTerms, inv_m: f64) -> SampleTerms {
    let gt = &batch.gt_landmarks[m];
    let pred = &batch.pred_landmarks[m];
    let gt_angles = batch.gt_angles[m];
    let theta = gt_angles.map(|g| angle_deviation(&g, &batch.pred_angles[m]));
    let gamma = multiplier(&batch.attributes[m], theta, terms);

    let mut distance = 0.0;
    let mut d_landmarks = vec![Point2::default(); gt.len()];
    for (n, slot) in d_landmarks.iter_mut().enumerate() {
        if !gt.visible[n] {
            continue;
        }
        let d = gt.points[n] - pred.points[n];
        match terms.base {
            BaseMetric::L2 => {
                distance += d.x * d.x + d.y * d.y;
                *slot = d * (-2.0 * gamma * inv_m);
            }
            BaseMetric::L1 => {
                distance += d.x.abs() + d.y.abs();
                *slot = Point2::new(sign(d.x), sign(d.y)) * (-gamma * inv_m);
            }
        }
    }

    let mut d_angles = [0.0; 3];
    if let (true, Some(g)) = (terms.use_angles, gt_angles) {
        let class_factor = if terms.use_class_weights {
            terms.class_weights.active_sum(&batch.attributes[m])
        } else {
            1.0
        };
        let g = g.as_array();
        let p = batch.pred_angles[m].as_array();
        // 1 - cos θ = 1 - cos(g - p) regardless of wrapping.
        for k in 0..3 {
            d_angles[k] = -class_factor * (g[k] - p[k]).sin() * distance * inv_m;
        }
    }
    SampleTerms {
        weighted: gamma * distance,
        d_landmarks,
        d_angles,
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss and analytic gradients for an explicit set of terms.
pub fn evaluate_terms(batch: &LossBatch, terms: &LossTerms) -> Result<LossOutput> {
    batch.validate()?;
    terms.validate()?;
    let inv_m = 1.0 / batch.len() as f64;
    let per_sample = par::map_range(batch.len(), |m| sample_terms(batch, m, terms, inv_m));
    // Fixed-order reduction.
    let mut value = 0.0;
    let mut d_landmarks = Vec::with_capacity(batch.len());
    let mut d_angles = Vec::with_capacity(batch.len());
    for s in per_sample {
        value += s.weighted;
        d_landmarks.push(s.d_landmarks);
        d_angles.push(s.d_angles);
    }
    Ok(LossOutput {
        value: value * inv_m,
        d_landmarks,
        d_angles,
    })
}

pub fn evaluate(batch: &LossBatch, config: &LossConfig) -> Result<LossOutput> {
    evaluate_terms(batch, &config.terms())
}

pub fn loss_value(batch: &LossBatch, config: &LossConfig) -> Result<f64> {
    evaluate(batch, config).map(|o| o.value)
}

/// `(∂L/∂pred_landmarks, ∂L/∂pred_angles)`.
pub fn loss_gradients(
    batch: &LossBatch,
    config: &LossConfig,
) -> Result<(Vec<Vec<Point2>>, Vec<[f64; 3]>)> {
    evaluate(batch, config).map(|o| (o.d_landmarks, o.d_angles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, m: usize, n: usize) -> LossBatch {
        let mut b = LossBatch {
            pred_landmarks: vec![],
            gt_landmarks: vec![],
            pred_angles: vec![],
            gt_angles: vec![],
            attributes: vec![],
        };
        for _ in 0..m {
            let gt: Vec<Point2> = (0..n)
                .map(|_| Point2::new(rng.random(), rng.random()))
                .collect();
            let pred: Vec<Point2> = gt
                .iter()
                .map(|p| *p + Point2::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)))
                .collect();
            let vis: Vec<bool> = (0..n).map(|_| rng.random_bool(0.85)).collect();
            b.gt_landmarks
                .push(LandmarkSet::with_visibility(gt, vis).unwrap());
            b.pred_landmarks.push(LandmarkSet::new(pred));
            let ang = |rng: &mut ChaCha8Rng| {
                EulerAngles::new(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            };
            b.pred_angles.push(ang(rng));
            b.gt_angles.push(if rng.random_bool(0.9) {
                Some(ang(rng))
            } else {
                None
            });
            let mut attrs = AttributeVector::default();
            for c in AttributeClass::ALL {
                attrs.set(c, rng.random_bool(0.3));
            }
            b.attributes.push(attrs);
        }
        b
    }

    fn weights() -> ClassWeights {
        class_weights_from_fractions(&[0.1, 0.9, 0.2, 0.15, 0.3, 0.25]).unwrap()
    }

    #[test]
    fn reciprocal_weights() {
        assert_eq!(
            class_weights_from_fractions(&[1.0; 6]).unwrap().omega,
            [1.0; 6]
        );
        assert_eq!(
            class_weights_from_fractions(&[0.5, 0.25, 0.25, 1.0, 1.0, 1.0])
                .unwrap()
                .omega,
            [2.0, 4.0, 4.0, 1.0, 1.0, 1.0]
        );
        assert!(class_weights_from_fractions(&[0.0, 1.0, 1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(class_weights_from_fractions(&[-0.5, 1.0, 1.0, 1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn multiplier_examples() {
        let frontal = AttributeVector::from_classes(&[AttributeClass::Frontal]);
        let cfg = LossConfig::new(LossVariant::Pfld);
        let g = sample_multiplier(
            &frontal,
            &ClassWeights::uniform(),
            [60f64.to_radians(), 0.0, 0.0],
            &cfg,
        );
        assert_abs_diff_eq!(g, 0.5, epsilon = 1e-15);
        assert_eq!(
            sample_multiplier(&frontal, &ClassWeights::uniform(), [0.0; 3], &cfg),
            0.0
        );

        let two =
            AttributeVector::from_classes(&[AttributeClass::Profile, AttributeClass::Frontal]);
        let w = ClassWeights::new([2.0, 4.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let g = sample_multiplier(
            &two,
            &w,
            [0.3, 0.2, 0.1],
            &LossConfig::new(LossVariant::PfldNoTheta),
        );
        assert_eq!(g, 6.0);
    }

    fn single(d: Point2, pred_yaw: f64) -> LossBatch {
        LossBatch {
            pred_landmarks: vec![LandmarkSet::new(vec![Point2::default()])],
            gt_landmarks: vec![LandmarkSet::new(vec![d])],
            pred_angles: vec![EulerAngles::new(pred_yaw, 0.0, 0.0)],
            gt_angles: vec![Some(EulerAngles::ZERO)],
            attributes: vec![AttributeVector::from_classes(&[AttributeClass::Frontal])],
        }
    }

    #[test]
    fn single_landmark_value_and_gradient() {
        let batch = single(Point2::new(3.0, 4.0), 60f64.to_radians());
        let cfg = LossConfig::new(LossVariant::Pfld);
        assert_abs_diff_eq!(loss_value(&batch, &cfg).unwrap(), 12.5, epsilon = 1e-12);
        let (dl, _) = loss_gradients(&batch, &cfg).unwrap();
        assert_abs_diff_eq!(dl[0][0].x, -3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dl[0][0].y, -4.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_deviation_gives_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = random_batch(&mut rng, 4, 10);
        b.pred_landmarks = b.gt_landmarks.clone();
        for v in LossVariant::ALL {
            let cfg = LossConfig::new(v).with_floor(1.0).with_weights(weights());
            let out = evaluate(&b, &cfg).unwrap();
            assert_eq!(out.value, 0.0);
            assert!(out
                .d_landmarks
                .iter()
                .flatten()
                .all(|p| p.x == 0.0 && p.y == 0.0));
        }
    }

    #[test]
    fn errors_on_bad_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random_batch(&mut rng, 2, 5);
        let cfg = LossConfig::new(LossVariant::L2);
        let mut empty = b.clone();
        empty.gt_landmarks.clear();
        empty.pred_landmarks.clear();
        empty.pred_angles.clear();
        empty.gt_angles.clear();
        empty.attributes.clear();
        assert!(loss_value(&empty, &cfg).is_err());
        let mut mismatch = b.clone();
        mismatch.pred_landmarks[1] = LandmarkSet::new(vec![Point2::default(); 4]);
        assert!(loss_value(&mismatch, &cfg).is_err());
        assert!(loss_value(&b, &cfg.with_floor(-1.0)).is_err());
    }

    #[test]
    fn neutral_pfld_matches_l2() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let b = random_batch(&mut rng, 8, 68);
            let l2 = loss_value(&b, &LossConfig::new(LossVariant::L2)).unwrap();
            let neutral = LossTerms {
                base: BaseMetric::L2,
                use_class_weights: false,
                use_angles: false,
                angle_floor: 0.0,
                class_weights: ClassWeights::uniform(),
            };
            let p = evaluate_terms(&b, &neutral).unwrap().value;
            assert!((p - l2).abs() <= 1e-12 * l2.max(1.0));
        }
    }

    #[test]
    fn invisible_landmarks_are_skipped() {
        let mut b = single(Point2::new(3.0, 4.0), 0.0);
        b.gt_landmarks[0].visible[0] = false;
        assert_eq!(
            loss_value(&b, &LossConfig::new(LossVariant::L2)).unwrap(),
            0.0
        );
    }

    fn fd_check(b: &LossBatch, cfg: &LossConfig) {
        let h = 1e-5;
        let out = evaluate(b, cfg).unwrap();
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        for m in 0..b.len() {
            for n in 0..b.gt_landmarks[m].len() {
                for axis in 0..2 {
                    let mut plus = b.clone();
                    let mut minus = b.clone();
                    let bump = |s: &mut LossBatch, d: f64| {
                        let p = &mut s.pred_landmarks[m].points[n];
                        if axis == 0 {
                            p.x += d
                        } else {
                            p.y += d
                        }
                    };
                    bump(&mut plus, h);
                    bump(&mut minus, -h);
                    let num = (loss_value(&plus, cfg).unwrap() - loss_value(&minus, cfg).unwrap())
                        / (2.0 * h);
                    let a = if axis == 0 {
                        out.d_landmarks[m][n].x
                    } else {
                        out.d_landmarks[m][n].y
                    };
                    assert!(
                        rel(a, num) < 1e-4,
                        "{cfg:?} landmark ({m},{n},{axis}): {a} vs {num}"
                    );
                }
            }
            for k in 0..3 {
                let mut plus = b.clone();
                let mut minus = b.clone();
                let mut pa = plus.pred_angles[m].as_array();
                pa[k] += h;
                plus.pred_angles[m] = EulerAngles::from_array(pa);
                let mut ma = minus.pred_angles[m].as_array();
                ma[k] -= h;
                minus.pred_angles[m] = EulerAngles::from_array(ma);
                let num = (loss_value(&plus, cfg).unwrap() - loss_value(&minus, cfg).unwrap())
                    / (2.0 * h);
                let a = out.d_angles[m][k];
                assert!(rel(a, num) < 1e-4, "{cfg:?} angle ({m},{k}): {a} vs {num}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for v in LossVariant::ALL {
            let b = random_batch(&mut rng, 3, 6);
            fd_check(
                &b,
                &LossConfig::new(v).with_floor(0.5).with_weights(weights()),
            );
        }
    }

    proptest! {
        #[test]
        fn nonnegative_and_weight_scaling(seed in 0u64..1000, lambda in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut b = random_batch(&mut rng, 4, 8);
            for v in LossVariant::ALL {
                let cfg = LossConfig::new(v).with_weights(weights());
                prop_assert!(loss_value(&b, &cfg).unwrap() >= 0.0);
            }
            // Samples without an active class carry a fixed factor of 1.
            for a in &mut b.attributes {
                if !a.any() {
                    a.set(AttributeClass::ALL[seed as usize % NUM_CLASSES], true);
                }
            }
            let cfg = LossConfig::new(LossVariant::Pfld).with_floor(0.3).with_weights(weights());
            let base = loss_value(&b, &cfg).unwrap();
            let scaled = loss_value(&b, &cfg.with_weights(weights().scaled(lambda).unwrap())).unwrap();
            prop_assert!((scaled - lambda * base).abs() <= 1e-12 * scaled.abs().max(1.0));
        }

        #[test]
        fn monotone_in_angle_error(t1 in 0.0f64..std::f64::consts::PI, dt in 0.0f64..1.0, axis in 0usize..3) {
            let t2 = (t1 + dt).min(std::f64::consts::PI);
            let loss_at = |t: f64| {
                let mut b = single(Point2::new(0.1, -0.2), 0.0);
                let mut a = [0.0; 3];
                a[axis] = t;
                b.pred_angles[0] = EulerAngles::from_array(a);
                loss_value(&b, &LossConfig::new(LossVariant::Pfld)).unwrap()
            };
            prop_assert!(loss_at(t2) >= loss_at(t1));
        }
    }
}
