//! Normalized mean error, cumulative error distributions, evaluation
//! reports and inference benchmarks.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{input_tensor, BBox, FaceSample};
use crate::geometry::EulerAngles;
use crate::landmarks::{LandmarkSet, Point2, Scheme};
use crate::loss::AttributeClass;
use crate::network::{
    angles_from_tensor, parameter_count, serialized_size, Mode, ParamStore, Pfld,
};
use crate::{par, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmeNormalization {
    /// Distance between the pupil centres (eye-contour centroids for 68
    /// points).
    InterPupil,
    /// Distance between the outer eye corners.
    InterOcular,
    /// `sqrt(w·h)` of the face box.
    BboxSize,
}

impl NmeNormalization {
    pub const ALL: [NmeNormalization; 3] = [
        NmeNormalization::InterPupil,
        NmeNormalization::InterOcular,
        NmeNormalization::BboxSize,
    ];

    pub fn id(self) -> &'static str {
        match self {
            NmeNormalization::InterPupil => "ipn",
            NmeNormalization::InterOcular => "ion",
            NmeNormalization::BboxSize => "bbox",
        }
    }
}

impl std::fmt::Display for NmeNormalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for NmeNormalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ipn" | "inter_pupil" => Ok(NmeNormalization::InterPupil),
            "ion" | "inter_ocular" => Ok(NmeNormalization::InterOcular),
            "bbox" | "bbox_size" => Ok(NmeNormalization::BboxSize),
            _ => Err(Error::invalid(format!("unknown normalization `{s}`"))),
        }
    }
}

fn centroid(l: &LandmarkSet, idx: &[usize]) -> Point2 {
    let s = idx.iter().fold(Point2::default(), |a, &i| a + l.points[i]);
    s * (1.0 / idx.len() as f64)
}

/// The normalizing distance of `gt` under `norm`.
pub fn normalizer(
    gt: &LandmarkSet,
    scheme: Scheme,
    norm: NmeNormalization,
    bbox: Option<&BBox>,
) -> Result<f64> {
    if gt.len() != scheme.num_landmarks() {
        return Err(Error::invalid(format!(
            "{} landmarks under scheme {scheme}",
            gt.len()
        )));
    }
    let d = match norm {
        NmeNormalization::InterPupil => {
            let (l, r) = scheme.pupil_groups();
            centroid(gt, &l).distance(centroid(gt, &r))
        }
        NmeNormalization::InterOcular => {
            let (l, r) = scheme.outer_eye_corners();
            gt.points[l].distance(gt.points[r])
        }
        NmeNormalization::BboxSize => {
            let b = bbox.ok_or_else(|| Error::invalid("bbox normalization needs a bbox"))?;
            (b.w.max(0.0) * b.h.max(0.0)).sqrt()
        }
    };
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::invalid(format!("{norm} normalizer is {d}")));
    }
    Ok(d)
}

/// Mean Euclidean error over the landmarks visible in `gt`, divided by the
/// normalizer.
pub fn nme(
    pred: &LandmarkSet,
    gt: &LandmarkSet,
    scheme: Scheme,
    norm: NmeNormalization,
    bbox: Option<&BBox>,
) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "{} predicted vs {} ground-truth landmarks",
            pred.len(),
            gt.len()
        )));
    }
    let d = normalizer(gt, scheme, norm, bbox)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, g), &v) in pred.points.iter().zip(&gt.points).zip(&gt.visible) {
        if v {
            sum += p.distance(*g);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no visible landmarks"));
    }
    Ok(sum / n as f64 / d)
}

/// `0, 0.001, …, 0.08`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=80).map(|i| i as f64 / 1000.0).collect()
}

/// Fraction of images with error at or below each threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CedCurve {
    pub thresholds: Vec<f64>,
    pub fractions: Vec<f64>,
}

impl CedCurve {
    /// Area under the curve on `[thresholds[0], cutoff]` by the trapezoid
    /// rule, divided by the interval length so a perfect curve scores 1.
    pub fn auc(&self, cutoff: f64) -> f64 {
        let mut area = 0.0;
        let start = self.thresholds[0];
        for i in 1..self.thresholds.len() {
            let (t0, t1) = (self.thresholds[i - 1], self.thresholds[i]);
            if t0 >= cutoff {
                break;
            }
            let t1c = t1.min(cutoff);
            let f1 = self.fractions[i - 1]
                + (self.fractions[i] - self.fractions[i - 1]) * (t1c - t0) / (t1 - t0);
            area += 0.5 * (self.fractions[i - 1] + f1) * (t1c - t0);
        }
        let span = cutoff.min(*self.thresholds.last().unwrap()) - start;
        if span > 0.0 {
            area / span
        } else {
            self.fractions[0]
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fraction\n");
        for (t, f) in self.thresholds.iter().zip(&self.fractions) {
            writeln!(s, "{t},{f}").unwrap();
        }
        s
    }
}

pub fn ced(errors: &[f64], thresholds: &[f64]) -> Result<CedCurve> {
    if errors.is_empty() || thresholds.is_empty() {
        return Err(Error::invalid("CED needs errors and thresholds"));
    }
    if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("CED thresholds must be strictly ascending"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let fractions = thresholds
        .iter()
        .map(|&t| sorted.partition_point(|&e| e <= t) as f64 / n)
        .collect();
    Ok(CedCurve {
        thresholds: thresholds.to_vec(),
        fractions,
    })
}

/// Network outputs for a set of cropped samples, in crop coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub landmarks: Vec<LandmarkSet>,
    /// Empty unless angles were requested.
    pub angles: Vec<EulerAngles>,
}

/// Eval-mode forward over `samples` in batches of `batch_size`.
pub fn predict(
    model: &Pfld,
    params: &ParamStore,
    samples: &[FaceSample],
    batch_size: usize,
    with_angles: bool,
) -> Result<Predictions> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let n = model.num_landmarks();
    let mut out = Predictions {
        landmarks: Vec::with_capacity(samples.len()),
        angles: Vec::new(),
    };
    for chunk in samples.chunks(batch_size) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let f = model.forward(params, input_tensor(&images)?, Mode::Eval, with_angles)?;
        for i in 0..chunk.len() {
            let row = f.landmarks.item(i);
            out.landmarks.push(LandmarkSet::new(
                (0..n)
                    .map(|k| Point2::new(row[2 * k] as f64, row[2 * k + 1] as f64))
                    .collect(),
            ));
        }
        if let Some(a) = f.angles {
            out.angles.extend(angles_from_tensor(&a));
        }
    }
    Ok(out)
}

/// Mean NME per normalization for one group of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub name: String,
    pub count: usize,
    /// Aligned with [`EvalReport::norms`]; NaN for an empty group.
    pub mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub norms: Vec<NmeNormalization>,
    /// `full` first, then one entry per split tag.
    pub splits: Vec<GroupSummary>,
    /// One entry per attribute class over the samples carrying it.
    pub attributes: Vec<GroupSummary>,
    /// One curve per normalization.
    pub ced: Vec<CedCurve>,
    /// `per_image[i][k]` is image `i`'s NME under `norms[k]`.
    pub per_image: Vec<Vec<f64>>,
}

impl EvalReport {
    pub fn mean(&self, norm: NmeNormalization) -> Option<f64> {
        let k = self.norms.iter().position(|&n| n == norm)?;
        Some(self.splits[0].mean[k])
    }

    pub fn split(&self, name: &str) -> Option<&GroupSummary> {
        self.splits.iter().find(|s| s.name == name)
    }

    pub fn attribute(&self, class: AttributeClass) -> Option<&GroupSummary> {
        self.attributes.iter().find(|s| s.name == class.name())
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        write!(s, "{:<16} {:>6}", "group", "count").unwrap();
        for n in &self.norms {
            write!(s, " {:>10}", format!("nme_{n}")).unwrap();
        }
        s.push('\n');
        for g in self.splits.iter().chain(&self.attributes) {
            write!(s, "{:<16} {:>6}", g.name, g.count).unwrap();
            for v in &g.mean {
                write!(s, " {:>10.6}", v).unwrap();
            }
            s.push('\n');
        }
        for (n, c) in self.norms.iter().zip(&self.ced) {
            let cutoff = *c.thresholds.last().unwrap();
            writeln!(s, "auc_{n}@{cutoff} {:.6}", c.auc(cutoff)).unwrap();
        }
        s
    }

    /// `report.json`, `report.txt`, `ced_<norm>.csv` and `per_image.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(p, e))
        };
        put(
            "report.json",
            serde_json::to_string_pretty(self).expect("serializable"),
        )?;
        put("report.txt", self.to_table())?;
        for (n, c) in self.norms.iter().zip(&self.ced) {
            put(&format!("ced_{n}.csv"), c.to_csv())?;
        }
        let mut csv = String::from("index");
        for n in &self.norms {
            write!(csv, ",{n}").unwrap();
        }
        csv.push('\n');
        for (i, row) in self.per_image.iter().enumerate() {
            write!(csv, "{i}").unwrap();
            for v in row {
                write!(csv, ",{v}").unwrap();
            }
            csv.push('\n');
        }
        put("per_image.csv", csv)
    }
}

fn summarize(name: &str, rows: &[&Vec<f64>], k: usize) -> GroupSummary {
    // Images are weighted equally.
    let mean = (0..k)
        .map(|j| {
            if rows.is_empty() {
                f64::NAN
            } else {
                rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64
            }
        })
        .collect();
    GroupSummary {
        name: name.to_string(),
        count: rows.len(),
        mean,
    }
}

/// Scores crop-coordinate predictions against cropped samples. Errors are
/// measured in source pixels, with the crop region as the bbox. `tags`
/// assigns each image to a named split (e.g. `common` / `challenging`).
pub fn evaluate_predictions(
    samples: &[FaceSample],
    predictions: &[LandmarkSet],
    tags: Option<&[String]>,
    norms: &[NmeNormalization],
    thresholds: &[f64],
) -> Result<EvalReport> {
    if samples.is_empty() || samples.len() != predictions.len() {
        return Err(Error::invalid(format!(
            "{} samples vs {} predictions",
            samples.len(),
            predictions.len()
        )));
    }
    if norms.is_empty() {
        return Err(Error::invalid("no normalization selected"));
    }
    if let Some(t) = tags {
        if t.len() != samples.len() {
            return Err(Error::invalid("one split tag per sample is required"));
        }
    }
    let per_image = par::map_range(samples.len(), |i| {
        let s = &samples[i];
        let gt = s.pixel_landmarks();
        let b = s.bbox;
        let pred = if s.cropped {
            predictions[i].map_points(|p| Point2::new(b.x + p.x * b.w, b.y + p.y * b.h))
        } else {
            predictions[i].clone()
        };
        norms
            .iter()
            .map(|&n| nme(&pred, &gt, s.scheme, n, Some(&b)))
            .collect::<Result<Vec<f64>>>()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let k = norms.len();
    let all: Vec<&Vec<f64>> = per_image.iter().collect();
    let mut splits = vec![summarize("full", &all, k)];
    if let Some(tags) = tags {
        let mut names: Vec<&String> = tags.iter().collect();
        names.sort();
        names.dedup();
        for name in names {
            let rows: Vec<&Vec<f64>> = per_image
                .iter()
                .zip(tags)
                .filter(|(_, t)| *t == name)
                .map(|(r, _)| r)
                .collect();
            splits.push(summarize(name, &rows, k));
        }
    }
    let attributes = AttributeClass::ALL
        .iter()
        .map(|&c| {
            let rows: Vec<&Vec<f64>> = per_image
                .iter()
                .zip(samples)
                .filter(|(_, s)| s.attributes.has(c))
                .map(|(r, _)| r)
                .collect();
            summarize(c.name(), &rows, k)
        })
        .collect();
    let ced = (0..k)
        .map(|j| {
            ced(
                &per_image.iter().map(|r| r[j]).collect::<Vec<_>>(),
                thresholds,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        norms: norms.to_vec(),
        splits,
        attributes,
        ced,
        per_image,
    })
}

/// Predicts and scores a cropped dataset.
pub fn evaluate(
    model: &Pfld,
    params: &ParamStore,
    samples: &[FaceSample],
    tags: Option<&[String]>,
    norms: &[NmeNormalization],
    thresholds: &[f64],
) -> Result<EvalReport> {
    let p = predict(model, params, samples, 32, false)?;
    evaluate_predictions(samples, &p.landmarks, tags, norms, thresholds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub width: f32,
    pub batch: usize,
    pub repetitions: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub parameters: usize,
    pub serialized_bytes: usize,
}

/// Times eval-mode forwards of a `[batch, S, S, 3]` input on the calling
/// thread after one warm-up pass.
pub fn benchmark(
    model: &Pfld,
    params: &ParamStore,
    batch: usize,
    repetitions: usize,
) -> Result<BenchReport> {
    if repetitions < 3 {
        return Err(Error::invalid("benchmark needs at least 3 repetitions"));
    }
    if batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let s = model.input_size();
    let input = crate::network::Tensor::filled(&[batch, s, s, 3], 0.1);
    let times = par::sequential(|| -> Result<Vec<f64>> {
        model.predict(params, input.clone())?;
        let mut t = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let start = Instant::now();
            std::hint::black_box(model.predict(params, input.clone())?);
            t.push(start.elapsed().as_secs_f64() * 1e3);
        }
        Ok(t)
    })?;
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    Ok(BenchReport {
        width: model.backbone.config.width,
        batch,
        repetitions,
        median_ms: median,
        min_ms: sorted[0],
        parameters: parameter_count(params),
        serialized_bytes: serialized_size(params),
    })
}
