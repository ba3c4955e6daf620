//! Joint single-stage optimization of the backbone and auxiliary branch.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment_variant, compute_attribute_stats, crop_resize, input_tensor, AugmentationConfig,
    FaceSample, VariantKind,
};
use crate::evaluation::{default_thresholds, evaluate, EvalReport, NmeNormalization};
use crate::geometry::EulerAngles;
use crate::landmarks::{LandmarkSet, Point2, Scheme};
use crate::loss::{
    evaluate as evaluate_loss, AttributeClass, ClassWeights, LossBatch, LossConfig, LossVariant,
};
use crate::network::{
    angles_from_tensor, apply_stat_updates, BackboneConfig, Checkpoint, CheckpointHeader,
    EntryKind, Mode, ParamStore, Pfld, Tensor,
};
use crate::{par, seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecayMode {
    /// Shrink parameters directly, outside the adaptive scaling.
    Decoupled,
    /// Add `decay · θ` to the gradient.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecayMode,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-6,
            decay_mode: WeightDecayMode::Decoupled,
        }
    }
}

/// Adam moments for every trainable entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: ParamStore,
    pub v: ParamStore,
    /// Completed updates.
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One update of every trainable entry of `params`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powf(self.t as f64);
        let bc2 = 1.0 - c.beta2.powf(self.t as f64);
        let lr = c.learning_rate as f32;
        let step = (c.learning_rate / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let (b1, b2, eps, wd) = (
            c.beta1 as f32,
            c.beta2 as f32,
            c.epsilon as f32,
            c.weight_decay as f32,
        );
        for (name, e) in params.iter_mut() {
            if e.kind != EntryKind::Trainable {
                continue;
            }
            let g = grads.get(name)?.data();
            let m = self.m.get_mut(name)?.data_mut();
            let v = self.v.get_mut(name)?.data_mut();
            let p = e.tensor.data_mut();
            if g.len() != p.len() {
                return Err(Error::invalid(format!(
                    "gradient for `{name}` has the wrong size"
                )));
            }
            for i in 0..p.len() {
                let gi = match c.decay_mode {
                    WeightDecayMode::L2 => g[i] + wd * p[i],
                    WeightDecayMode::Decoupled => g[i],
                };
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let update = step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
                p[i] -= update;
                if c.decay_mode == WeightDecayMode::Decoupled {
                    p[i] -= lr * wd * p[i];
                }
            }
        }
        Ok(())
    }
}

/// Which network graph to build.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub width: f32,
    pub scheme: Scheme,
    /// The small 16×16 graph used for fast tests.
    pub reduced: bool,
}

impl ModelSpec {
    pub fn build(&self) -> Result<Pfld> {
        let n = self.scheme.num_landmarks();
        let cfg = if self.reduced {
            BackboneConfig::reduced(n)
        } else {
            BackboneConfig::new(self.width, n)?
        };
        Pfld::new(cfg)
    }

    fn header(&self) -> CheckpointHeader {
        let mut h = CheckpointHeader::new(
            self.width,
            self.scheme.num_landmarks() as u32,
            self.scheme.id(),
        );
        h.set_meta("graph", if self.reduced { "reduced" } else { "standard" });
        h
    }

    pub fn from_header(h: &CheckpointHeader) -> Result<Self> {
        let scheme: Scheme = h.scheme.parse()?;
        if scheme.num_landmarks() as u32 != h.num_landmarks {
            return Err(Error::Checkpoint(format!(
                "scheme {scheme} with {} landmarks",
                h.num_landmarks
            )));
        }
        Ok(Self {
            width: h.width,
            scheme,
            reduced: h.meta("graph") == Some("reduced"),
        })
    }
}

/// Model-only checkpoint.
pub fn model_checkpoint(spec: &ModelSpec, params: &ParamStore) -> Checkpoint {
    Checkpoint::new(spec.header(), params.clone())
}

/// Reads a checkpoint and rebuilds its network, dropping optimizer state.
pub fn load_model(path: &Path) -> Result<(ModelSpec, Pfld, ParamStore)> {
    let ck = Checkpoint::read(path)?;
    let spec = ModelSpec::from_header(&ck.header)?;
    let model = spec.build()?;
    let params = model_params(&ck.params);
    if !params.same_layout(&model.init(0)?) {
        return Err(Error::Checkpoint(format!(
            "{}: parameters do not match the declared graph",
            path.display()
        )));
    }
    Ok((spec, model, params))
}

const OPT_M: &str = "optim.m.";
const OPT_V: &str = "optim.v.";

fn model_params(store: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, e) in store.iter() {
        if !name.starts_with("optim.") {
            out.insert(name, e.kind, e.tensor.clone())
                .expect("unique names");
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    pub variant: LossVariant,
    /// Added to the angle factor of the angle-weighted variants.
    pub angle_floor: f64,
    /// `None` derives `ω` from the training split.
    pub class_weights: Option<ClassWeights>,
    /// Coefficient of an extra squared-error term on the auxiliary angles;
    /// 0 leaves the branch supervised only through the landmark weights.
    pub angle_regression: f64,
    pub adam: AdamConfig,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// On-the-fly augmentation: each slot draws one variant kind.
    pub augmentation: Option<AugmentationConfig>,
    /// 0 disables held-out evaluation.
    pub eval_every: u64,
    /// 0 disables intermediate state checkpoints.
    pub checkpoint_every: u64,
    /// Iterations per logged training-loss record.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec {
                width: 0.25,
                scheme: Scheme::Face68,
                reduced: false,
            },
            batch_size: 32,
            iterations: 2000,
            seed: 0,
            variant: LossVariant::Pfld,
            angle_floor: crate::loss::RECOMMENDED_ANGLE_FLOOR,
            class_weights: None,
            angle_regression: 0.0,
            adam: AdamConfig::default(),
            grad_clip: None,
            augmentation: None,
            eval_every: 500,
            checkpoint_every: 500,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        let ok = self.batch_size > 0
            && a.learning_rate >= 0.0
            && a.weight_decay >= 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.epsilon > 0.0
            && self.angle_floor >= 0.0
            && self.angle_regression >= 0.0
            && self.log_every > 0
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if !ok {
            return Err(Error::invalid("training configuration out of range"));
        }
        if let Some(aug) = &self.augmentation {
            aug.validate()?;
        }
        Ok(())
    }

    fn uses_auxiliary(&self) -> bool {
        self.variant.uses_angles() || self.angle_regression > 0.0
    }
}

/// Crops every sample to the network input size.
pub fn prepare(samples: &[FaceSample], input_size: usize, margin: f64) -> Result<Vec<FaceSample>> {
    par::map_slice(samples, |s| {
        if s.cropped {
            Ok(s.clone())
        } else {
            crop_resize(s, input_size, margin)
        }
    })
    .into_iter()
    .collect()
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: Adam,
    /// Completed steps; the batch schedule and augmentation draws are
    /// functions of this counter, so no RNG state needs saving.
    pub iteration: u64,
    pub best_nme: Option<f64>,
}

impl TrainState {
    pub fn new(model: &Pfld, config: &TrainConfig) -> Result<Self> {
        let params = model.init(config.seed)?;
        let adam = Adam::new(&params, config.adam);
        Ok(Self {
            params,
            adam,
            iteration: 0,
            best_nme: None,
        })
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Result<Checkpoint> {
        let mut ck = model_checkpoint(&config.model, &self.params);
        for (prefix, store) in [(OPT_M, &self.adam.m), (OPT_V, &self.adam.v)] {
            for (name, e) in store.iter() {
                if self.params.entry(name).map(|p| p.kind) == Some(EntryKind::Trainable) {
                    ck.params.insert(
                        format!("{prefix}{name}"),
                        EntryKind::Statistic,
                        e.tensor.clone(),
                    )?;
                }
            }
        }
        let h = &mut ck.header;
        h.set_meta("iteration", self.iteration.to_string());
        h.set_meta("adam_t", self.adam.t.to_string());
        if let Some(b) = self.best_nme {
            h.set_meta("best_nme", format!("{b:?}"));
        }
        h.set_meta(
            "config",
            serde_json::to_string(config).expect("serializable"),
        );
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, config: &TrainConfig) -> Result<Self> {
        let params = model_params(&ck.params);
        let mut adam = Adam::new(&params, config.adam);
        for (prefix, store) in [(OPT_M, &mut adam.m), (OPT_V, &mut adam.v)] {
            for (name, e) in ck.params.iter() {
                if let Some(base) = name.strip_prefix(prefix) {
                    store
                        .get_mut(base)?
                        .data_mut()
                        .copy_from_slice(e.tensor.data());
                }
            }
        }
        let num = |k: &str| -> Result<u64> {
            ck.header
                .meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("state checkpoint lacks `{k}`")))
        };
        adam.t = num("adam_t")?;
        Ok(Self {
            params,
            adam,
            iteration: num("iteration")?,
            best_nme: ck.header.meta("best_nme").and_then(|v| v.parse().ok()),
        })
    }
}

/// Dataset index of every slot in the infinite stream of shuffled epochs.
#[derive(Debug)]
pub struct BatchSchedule {
    len: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
}

const EPOCH_STREAM: u64 = 0x6570_6f63;
const AUGMENT_STREAM: u64 = 0x6175_676d;

impl BatchSchedule {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut s = Self {
            len,
            seed,
            epoch: u64::MAX,
            order: Vec::new(),
        };
        s.load(0);
        s
    }

    fn load(&mut self, epoch: u64) {
        if epoch != self.epoch {
            self.order = (0..self.len).collect();
            self.order
                .shuffle(&mut seed::rng(self.seed, &[EPOCH_STREAM, epoch]));
            self.epoch = epoch;
        }
    }

    /// Indices of batch `iteration`.
    pub fn batch(&mut self, iteration: u64, batch_size: usize) -> Vec<usize> {
        (0..batch_size as u64)
            .map(|j| {
                let pos = iteration * batch_size as u64 + j;
                self.load(pos / self.len as u64);
                self.order[(pos % self.len as u64) as usize]
            })
            .collect()
    }
}

/// Samples of batch `iteration`, augmented when configured. Slot `j`'s
/// variant draw uses the stream `(seed, iteration, j)`.
pub fn assemble_batch(
    samples: &[FaceSample],
    indices: &[usize],
    config: &TrainConfig,
    iteration: u64,
) -> Result<Vec<FaceSample>> {
    let Some(aug) = &config.augmentation else {
        return Ok(indices.iter().map(|&i| samples[i].clone()).collect());
    };
    let kinds = aug.kinds();
    par::map_range(indices.len(), |j| {
        let mut rng = seed::rng(config.seed, &[AUGMENT_STREAM, iteration, j as u64]);
        let kind = kinds[rng.random_range(0..kinds.len())];
        let s = &samples[indices[j]];
        Ok(match augment_variant(s, kind, aug, &mut rng)? {
            Some(v) => v.sample,
            None => {
                augment_variant(s, VariantKind::Original, aug, &mut rng)?
                    .expect("original is kept")
                    .sample
            }
        })
    })
    .into_iter()
    .collect()
}

fn tensor_to_landmarks(t: &Tensor, n: usize) -> Vec<LandmarkSet> {
    (0..t.batch())
        .map(|i| {
            let r = t.item(i);
            LandmarkSet::new(
                (0..n)
                    .map(|k| Point2::new(r[2 * k] as f64, r[2 * k + 1] as f64))
                    .collect(),
            )
        })
        .collect()
}

fn global_norm(grads: &ParamStore) -> f64 {
    grads
        .iter()
        .map(|(_, e)| e.tensor.sum_sq())
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub grad_norm: f64,
}

/// One forward through both branches, one loss evaluation, one backward
/// and one optimizer update.
pub fn train_step(
    model: &Pfld,
    state: &mut TrainState,
    batch: &[FaceSample],
    config: &TrainConfig,
    loss: &LossConfig,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let with_aux = config.uses_auxiliary();
    let fwd = model.forward(&state.params, input_tensor(&images)?, Mode::Train, with_aux)?;
    let n = model.num_landmarks();
    let m = batch.len();
    let pred_angles = match &fwd.angles {
        Some(a) => angles_from_tensor(a),
        None => vec![EulerAngles::ZERO; m],
    };
    let lb = LossBatch {
        pred_landmarks: tensor_to_landmarks(&fwd.landmarks, n),
        gt_landmarks: batch.iter().map(|s| s.landmarks.clone()).collect(),
        pred_angles: pred_angles.clone(),
        gt_angles: batch.iter().map(|s| s.gt_angles).collect(),
        attributes: batch.iter().map(|s| s.attributes).collect(),
    };
    let mut out = evaluate_loss(&lb, loss)?;
    if config.angle_regression > 0.0 {
        let k = config.angle_regression / m as f64;
        for (i, (p, g)) in pred_angles.iter().zip(&lb.gt_angles).enumerate() {
            if let Some(g) = g {
                let (p, g) = (p.as_array(), g.as_array());
                for a in 0..3 {
                    out.value += k * (p[a] - g[a]).powi(2);
                    out.d_angles[i][a] += 2.0 * k * (p[a] - g[a]);
                }
            }
        }
    }
    if !out.value.is_finite() {
        let bad = lb
            .pred_landmarks
            .iter()
            .position(|l| !l.points.iter().all(|p| p.is_finite()))
            .map_or_else(
                || "loss".to_string(),
                |i| format!("loss (sample {i} has non-finite predictions)"),
            );
        return Err(Error::NonFinite { layer: bad });
    }
    let d_lm: Vec<f32> = out
        .d_landmarks
        .iter()
        .flat_map(|s| s.iter().flat_map(|p| [p.x as f32, p.y as f32]))
        .collect();
    let d_lm = Tensor::from_vec(&[m, 2 * n], d_lm)?;
    let d_ang = with_aux
        .then(|| {
            Tensor::from_vec(
                &[m, 3],
                out.d_angles
                    .iter()
                    .flat_map(|a| a.map(|v| v as f32))
                    .collect(),
            )
        })
        .transpose()?;
    let mut grads = model.backward(&state.params, fwd.tape, d_lm, d_ang)?;
    let grad_norm = global_norm(&grads);
    if !grad_norm.is_finite() {
        let layer = grads
            .iter()
            .find(|(_, e)| !e.tensor.all_finite())
            .map_or("gradients", |(n, _)| n)
            .to_string();
        return Err(Error::NonFinite { layer });
    }
    if let Some(clip) = config.grad_clip {
        if grad_norm > clip {
            let s = (clip / grad_norm) as f32;
            for (_, e) in grads.iter_mut() {
                e.tensor.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    state.adam.step(&mut state.params, &grads)?;
    apply_stat_updates(&mut state.params, fwd.stats)?;
    state.iteration += 1;
    Ok(StepOutput {
        loss: out.value,
        grad_norm,
    })
}

/// Loss configuration for a training split: `ω` comes from the split's
/// attribute fractions unless fixed in `config`.
pub fn loss_config(config: &TrainConfig, train: &[FaceSample]) -> Result<LossConfig> {
    let weights = match config.class_weights {
        Some(w) => w,
        None => compute_attribute_stats(train)?.class_weights(),
    };
    Ok(LossConfig::new(config.variant)
        .with_floor(config.angle_floor)
        .with_weights(weights))
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: u64,
    pub variant: LossVariant,
    pub width: f32,
    /// Mean training loss since the previous record.
    pub train_loss: Option<f64>,
    pub eval: Option<EvalMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub nme_ipn: f64,
    pub nme_ion: f64,
    pub nme_bbox: f64,
    /// Mean bbox NME over profile faces, when any are present.
    pub nme_bbox_profile: Option<f64>,
}

impl EvalMetrics {
    pub fn from_report(r: &EvalReport) -> Self {
        let get = |n| r.mean(n).unwrap_or(f64::NAN);
        let k = r
            .norms
            .iter()
            .position(|&n| n == NmeNormalization::BboxSize);
        let profile = r.attribute(AttributeClass::Profile).filter(|g| g.count > 0);
        Self {
            nme_ipn: get(NmeNormalization::InterPupil),
            nme_ion: get(NmeNormalization::InterOcular),
            nme_bbox: get(NmeNormalization::BboxSize),
            nme_bbox_profile: profile.zip(k).map(|(g, k)| g.mean[k]),
        }
    }
}

/// Held-out scores of `params` under all three normalizations.
pub fn eval_metrics(
    model: &Pfld,
    params: &ParamStore,
    held_out: &[FaceSample],
) -> Result<EvalMetrics> {
    let r = evaluate(
        model,
        params,
        held_out,
        None,
        &NmeNormalization::ALL,
        &default_thresholds(),
    )?;
    Ok(EvalMetrics::from_report(&r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iterations: u64,
    /// Loss of every step run in this call.
    pub losses: Vec<f64>,
    pub final_eval: Option<EvalMetrics>,
    pub best_nme: Option<f64>,
    pub out_dir: PathBuf,
}

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub const STATE_FILE: &str = "state.ckpt";
pub const FINAL_FILE: &str = "final.ckpt";
pub const BEST_FILE: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";

/// Trains on cropped `train` samples, evaluating on `held_out` every
/// `eval_every` steps.
///
/// Writes `metrics.jsonl` (reproducible), `timing.jsonl` (wall clock),
/// `state.ckpt` (parameters plus optimizer moments), `final.ckpt` and,
/// when evaluation runs, `best.ckpt` (lowest bbox NME). With `resume`, an
/// existing `state.ckpt` in `out_dir` is continued; the result is bitwise
/// identical to an uninterrupted run.
pub fn train(
    config: &TrainConfig,
    train: &[FaceSample],
    held_out: &[FaceSample],
    out_dir: &Path,
    resume: bool,
) -> Result<TrainSummary> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let model = config.model.build()?;
    let size = model.input_size();
    if let Some(s) = train
        .iter()
        .chain(held_out)
        .find(|s| !s.cropped || s.image.width() != size || s.image.height() != size)
    {
        return Err(Error::invalid(format!(
            "training expects {size}×{size} crops, found {}×{} (cropped: {})",
            s.image.width(),
            s.image.height(),
            s.cropped
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let state_path = out_dir.join(STATE_FILE);
    let metrics_path = out_dir.join(METRICS_FILE);
    let timing_path = out_dir.join(TIMING_FILE);
    let mut state = if resume && state_path.exists() {
        TrainState::from_checkpoint(&Checkpoint::read(&state_path)?, config)?
    } else {
        for p in [&metrics_path, &timing_path] {
            if p.exists() {
                std::fs::remove_file(p).map_err(|e| Error::io(p, e))?;
            }
        }
        TrainState::new(&model, config)?
    };
    let loss = loss_config(config, train)?;
    let mut schedule = BatchSchedule::new(train.len(), config.seed);
    let start = Instant::now();
    let mut losses = Vec::new();
    let mut window = Vec::new();
    let mut final_eval = None;

    let evaluate_now = |state: &mut TrainState,
                        final_eval: &mut Option<EvalMetrics>|
     -> Result<Option<EvalMetrics>> {
        if held_out.is_empty() || config.eval_every == 0 {
            return Ok(None);
        }
        let m = eval_metrics(&model, &state.params, held_out)?;
        if state.best_nme.is_none_or(|b| m.nme_bbox < b) {
            state.best_nme = Some(m.nme_bbox);
            model_checkpoint(&config.model, &state.params).write(&out_dir.join(BEST_FILE))?;
        }
        *final_eval = Some(m);
        Ok(Some(m))
    };

    if state.iteration == 0 {
        let eval = evaluate_now(&mut state, &mut final_eval)?;
        let rec = MetricRecord {
            iteration: 0,
            variant: config.variant,
            width: config.model.width,
            train_loss: None,
            eval,
        };
        append(
            &metrics_path,
            &serde_json::to_string(&rec).expect("serializable"),
        )?;
    }
    while state.iteration < config.iterations {
        let it = state.iteration;
        let idx = schedule.batch(it, config.batch_size);
        let batch = assemble_batch(train, &idx, config, it)?;
        let out = train_step(&model, &mut state, &batch, config, &loss)?;
        losses.push(out.loss);
        window.push(out.loss);
        let done = state.iteration;
        let log_now = done % config.log_every == 0 || done == config.iterations;
        let eval_now =
            config.eval_every > 0 && (done % config.eval_every == 0 || done == config.iterations);
        if log_now || eval_now {
            let eval = if eval_now {
                evaluate_now(&mut state, &mut final_eval)?
            } else {
                None
            };
            let rec = MetricRecord {
                iteration: done,
                variant: config.variant,
                width: config.model.width,
                train_loss: (!window.is_empty())
                    .then(|| window.iter().sum::<f64>() / window.len() as f64),
                eval,
            };
            window.clear();
            append(
                &metrics_path,
                &serde_json::to_string(&rec).expect("serializable"),
            )?;
            append(
                &timing_path,
                &format!(
                    "{{\"iteration\":{done},\"wall_time_s\":{:.3}}}",
                    start.elapsed().as_secs_f64()
                ),
            )?;
        }
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
            state.to_checkpoint(config)?.write(&state_path)?;
        }
    }
    state.to_checkpoint(config)?.write(&state_path)?;
    model_checkpoint(&config.model, &state.params).write(&out_dir.join(FINAL_FILE))?;
    Ok(TrainSummary {
        iterations: state.iteration,
        losses,
        final_eval,
        best_nme: state.best_nme,
        out_dir: out_dir.to_path_buf(),
    })
}

/// One row of the loss-function comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: LossVariant,
    pub label: String,
    pub eval: EvalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: LossVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Variants as columns, metrics as rows.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<20}", "metric");
        for r in &self.rows {
            write!(s, " {:>12}", r.label).unwrap();
        }
        s.push('\n');
        type Getter = fn(&EvalMetrics) -> Option<f64>;
        let metrics: [(&str, Getter); 4] = [
            ("nme_ipn", |e| Some(e.nme_ipn)),
            ("nme_ion", |e| Some(e.nme_ion)),
            ("nme_bbox", |e| Some(e.nme_bbox)),
            ("nme_bbox_profile", |e| e.nme_bbox_profile),
        ];
        for (name, get) in metrics {
            write!(s, "{name:<20}").unwrap();
            for r in &self.rows {
                match get(&r.eval) {
                    Some(v) => write!(s, " {:>12.6}", v).unwrap(),
                    None => write!(s, " {:>12}", "-").unwrap(),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Trains every variant under the same seed and configuration, each in
/// `out_dir/<variant id>`, and tabulates final held-out scores.
pub fn ablate(
    config: &TrainConfig,
    variants: &[LossVariant],
    train_set: &[FaceSample],
    held_out: &[FaceSample],
    out_dir: &Path,
) -> Result<AblationReport> {
    if held_out.is_empty() {
        return Err(Error::invalid("ablation needs a held-out split"));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let cfg = TrainConfig {
            variant: v,
            ..config.clone()
        };
        let dir = out_dir.join(v.id());
        let summary = train(&cfg, train_set, held_out, &dir, false)?;
        let eval = match summary.final_eval {
            Some(e) => e,
            None => {
                let (_, model, params) = load_model(&dir.join(FINAL_FILE))?;
                eval_metrics(&model, &params, held_out)?
            }
        };
        rows.push(AblationRow {
            variant: v,
            label: v.label().to_string(),
            eval,
        });
    }
    let report = AblationReport { rows };
    let put = |name: &str, text: String| {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    put("ablation.txt", report.to_table())?;
    put(
        "ablation.json",
        serde_json::to_string_pretty(&report).expect("serializable"),
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthConfig;

    fn quad_store(x: [f32; 2]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "x",
            EntryKind::Trainable,
            Tensor::from_vec(&[2], x.to_vec()).unwrap(),
        )
        .unwrap();
        s
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        let mut p = quad_store([0.0, 0.0]);
        let mut adam = Adam::new(
            &p,
            AdamConfig {
                learning_rate: 0.05,
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
        );
        for _ in 0..2000 {
            let x = p.get("x").unwrap().data().to_vec();
            let g = quad_store([2.0 * (x[0] - 3.0), 20.0 * (x[1] + 1.0)]);
            adam.step(&mut p, &g).unwrap();
        }
        let x = p.get("x").unwrap().data();
        assert!(
            (x[0] - 3.0).abs() < 1e-3 && (x[1] + 1.0).abs() < 1e-3,
            "{x:?}"
        );
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let mut p = quad_store([1.5, -2.0]);
        let before = p.clone();
        let mut adam = Adam::new(
            &p,
            AdamConfig {
                learning_rate: 0.0,
                ..AdamConfig::default()
            },
        );
        adam.step(&mut p, &quad_store([3.0, 4.0])).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn decay_alone_shrinks_norm() {
        let mut p = quad_store([1.5, -2.0]);
        let mut adam = Adam::new(
            &p,
            AdamConfig {
                learning_rate: 0.1,
                weight_decay: 0.5,
                ..AdamConfig::default()
            },
        );
        let mut prev = p.get("x").unwrap().sum_sq();
        for _ in 0..20 {
            adam.step(&mut p, &quad_store([0.0, 0.0])).unwrap();
            let now = p.get("x").unwrap().sum_sq();
            assert!(now <= prev);
            prev = now;
        }
        assert!(prev < 6.25);
    }

    #[test]
    fn statistics_are_not_optimized() {
        let mut p = quad_store([1.0, 1.0]);
        p.insert("s", EntryKind::Statistic, Tensor::filled(&[1], 7.0))
            .unwrap();
        let mut g = p.zeros_like();
        g.get_mut("s").unwrap().data_mut()[0] = 100.0;
        Adam::new(&p, AdamConfig::default())
            .step(&mut p, &g)
            .unwrap();
        assert_eq!(p.get("s").unwrap().data(), &[7.0]);
    }

    #[test]
    fn schedule_covers_each_epoch_once() {
        let mut s = BatchSchedule::new(10, 3);
        let mut first: Vec<usize> = (0..5).flat_map(|k| s.batch(k, 2)).collect();
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        let a = s.batch(7, 4);
        assert_eq!(BatchSchedule::new(10, 3).batch(7, 4), a);
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            model: ModelSpec {
                width: 1.0,
                scheme: Scheme::Face68,
                reduced: true,
            },
            batch_size: 4,
            iterations: 6,
            seed: 1,
            eval_every: 3,
            checkpoint_every: 2,
            log_every: 2,
            adam: AdamConfig {
                learning_rate: 1e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> (Vec<FaceSample>, Vec<FaceSample>) {
        let d = SynthConfig {
            count: 12,
            seed: 2,
            ..SynthConfig::default()
        }
        .generate()
        .unwrap();
        let all = prepare(&d.samples, 16, 0.0).unwrap();
        (all[..8].to_vec(), all[8..].to_vec())
    }

    fn read(p: &Path) -> Vec<u8> {
        std::fs::read(p).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let (tr, ho) = tiny_data();
        let cfg = TrainConfig {
            augmentation: Some(AugmentationConfig::default()),
            ..tiny_config()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = train(&cfg, &tr, &ho, a.path(), false).unwrap();
        let sb = train(&cfg, &tr, &ho, b.path(), false).unwrap();
        assert_eq!(sa.losses, sb.losses);
        assert_eq!(sa.iterations, 6);
        for f in [FINAL_FILE, STATE_FILE, METRICS_FILE, BEST_FILE] {
            assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
        }
        // Stop at 4, then resume to 6.
        let c = tempfile::tempdir().unwrap();
        train(
            &TrainConfig {
                iterations: 4,
                ..cfg.clone()
            },
            &tr,
            &ho,
            c.path(),
            false,
        )
        .unwrap();
        let sc = train(&cfg, &tr, &ho, c.path(), true).unwrap();
        assert_eq!(sc.losses, sa.losses[4..]);
        assert_eq!(
            read(&a.path().join(FINAL_FILE)),
            read(&c.path().join(FINAL_FILE))
        );
    }

    #[test]
    fn zero_iterations_writes_initial_model() {
        let (tr, ho) = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            iterations: 0,
            ..tiny_config()
        };
        let s = train(&cfg, &tr, &ho, dir.path(), false).unwrap();
        assert!(s.losses.is_empty());
        let (_, model, params) = load_model(&dir.path().join(FINAL_FILE)).unwrap();
        assert_eq!(params, model.init(1).unwrap());
    }

    #[test]
    fn one_update_per_batch_and_state_round_trip() {
        let (tr, _) = tiny_data();
        let cfg = tiny_config();
        let model = cfg.model.build().unwrap();
        let mut st = TrainState::new(&model, &cfg).unwrap();
        let loss = loss_config(&cfg, &tr).unwrap();
        for k in 0..3 {
            train_step(&model, &mut st, &tr[k..k + 4], &cfg, &loss).unwrap();
        }
        assert_eq!((st.iteration, st.adam.t), (3, 3));
        let back = TrainState::from_checkpoint(
            &Checkpoint::from_bytes(&st.to_checkpoint(&cfg).unwrap().to_bytes().unwrap()).unwrap(),
            &cfg,
        )
        .unwrap();
        assert_eq!(back, st);
    }

    #[test]
    fn loss_falls_on_repeated_batch() {
        let (tr, _) = tiny_data();
        let cfg = TrainConfig {
            adam: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            ..tiny_config()
        };
        let model = cfg.model.build().unwrap();
        let mut st = TrainState::new(&model, &cfg).unwrap();
        let loss = loss_config(&cfg, &tr).unwrap();
        let first = train_step(&model, &mut st, &tr[..4], &cfg, &loss)
            .unwrap()
            .loss;
        let mut last = first;
        for _ in 0..60 {
            last = train_step(&model, &mut st, &tr[..4], &cfg, &loss)
                .unwrap()
                .loss;
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn angle_regression_trains_auxiliary_under_plain_l2() {
        let (tr, _) = tiny_data();
        let cfg = TrainConfig {
            variant: LossVariant::L2,
            angle_regression: 1.0,
            ..tiny_config()
        };
        let model = cfg.model.build().unwrap();
        let mut st = TrainState::new(&model, &cfg).unwrap();
        let before = st.params.get("aux.fc2.weight").unwrap().clone();
        let loss = loss_config(&cfg, &tr).unwrap();
        train_step(&model, &mut st, &tr[..4], &cfg, &loss).unwrap();
        assert_ne!(st.params.get("aux.fc2.weight").unwrap(), &before);

        let plain = TrainConfig {
            variant: LossVariant::L2,
            ..tiny_config()
        };
        let mut st = TrainState::new(&model, &plain).unwrap();
        train_step(&model, &mut st, &tr[..4], &plain, &loss).unwrap();
        assert_eq!(st.params.get("aux.fc2.weight").unwrap(), &before);
    }

    #[test]
    fn rejects_uncropped_input() {
        let d = SynthConfig {
            count: 2,
            ..SynthConfig::default()
        }
        .generate()
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(train(&tiny_config(), &d.samples, &[], dir.path(), false).is_err());
    }
}
