//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
//! malformed input), 3 runtime failure. Every command that takes `--out`
//! writes `config.json` there with all resolved settings.

use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::data::attributes::annotate_landmarks;
use crate::data::convert::{convert_csv, convert_pts, CoordinateOrigin};
use crate::data::{
    annotate_angles, load_manifest, pose_attributes, read_manifest, write_manifest,
    AugmentationConfig, FaceSample, ImbalanceProfile, ManifestEntry, PoseDistribution,
    PoseThresholds, SynthConfig,
};
use crate::evaluation::{benchmark, default_thresholds, evaluate, predict, NmeNormalization};
use crate::geometry::ReferenceFace;
use crate::landmarks::{LandmarkSet, Point2, Scheme};
use crate::loss::LossVariant;
use crate::training::{
    ablate, load_model, prepare, train, AdamConfig, ModelSpec, TrainConfig, WeightDecayMode,
};
use crate::{par, Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "pfld",
    version,
    about = "Facial landmark detection: synthesis, annotation, training and evaluation"
)]
pub struct Cli {
    /// Worker threads for data-parallel loops; 1 gives reproducible timing.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: u32,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Render a synthetic face dataset (PNG images plus manifest).
    Synth(SynthArgs),
    /// Convert 68-point .pts folders or 21-point CSV files to a manifest.
    Convert(ConvertArgs),
    /// Add Euler angles (and optionally pose attributes) to a manifest.
    Annotate(AnnotateArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Train the five loss variants under one seed and compare them.
    Ablate(AblateArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Predict landmarks for manifest faces.
    Infer(InferArgs),
    /// Print Euler angles (degrees) for manifest faces.
    Pose(PoseArgs),
    /// Time eval-mode inference and report model size.
    Bench(BenchArgs),
    /// Print the reference for every command, flag and exit code.
    Docs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum SchemeArg {
    #[value(name = "68")]
    Face68,
    #[value(name = "21")]
    Face21,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Face68 => Scheme::Face68,
            SchemeArg::Face21 => Scheme::Face21,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 512)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "68")]
    pub scheme: SchemeArg,
    /// Canvas side in pixels.
    #[arg(long, default_value_t = 128)]
    pub canvas: usize,
    /// Fraction of faces drawn with |yaw| beyond the profile threshold.
    #[arg(long, default_value_t = 0.1)]
    pub profile_fraction: f64,
    #[arg(long, default_value_t = 0.05)]
    pub head_up_fraction: f64,
    #[arg(long, default_value_t = 0.05)]
    pub head_down_fraction: f64,
    #[arg(long, default_value_t = 0.15)]
    pub expression_probability: f64,
    #[arg(long, default_value_t = 0.1)]
    pub occlusion_probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ConvertFormat {
    /// Folder of iBUG `.pts` files next to same-stem images.
    Pts,
    /// `image,x1,y1,v1,…,x21,y21,v21` rows.
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum OriginArg {
    OneBased,
    ZeroBased,
    Continuous,
}

#[derive(Debug, Args, Serialize)]
pub struct ConvertArgs {
    #[arg(long, value_enum)]
    pub format: ConvertFormat,
    /// Folder (pts) or file (csv).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Pixel-centre convention of the source; defaults to one-based for
    /// pts and zero-based for csv.
    #[arg(long, value_enum)]
    pub origin: Option<OriginArg>,
    /// Margin added around the squared landmark extents.
    #[arg(long, default_value_t = 0.1)]
    pub margin: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Reference face file; the bundled one for the scheme by default.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Also set profile/frontal/head-up/head-down from the angles.
    #[arg(long)]
    pub pose_attributes: bool,
    #[arg(long, default_value_t = 30.0)]
    pub profile_yaw: f64,
    #[arg(long, default_value_t = 20.0)]
    pub head_pitch: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum VariantArg {
    L2,
    L1,
    PfldNoOmega,
    PfldNoTheta,
    Pfld,
}

impl From<VariantArg> for LossVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::L2 => LossVariant::L2,
            VariantArg::L1 => LossVariant::L1,
            VariantArg::PfldNoOmega => LossVariant::PfldNoOmega,
            VariantArg::PfldNoTheta => LossVariant::PfldNoTheta,
            VariantArg::Pfld => LossVariant::Pfld,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum DecayArg {
    Decoupled,
    L2,
}

/// Settings shared by `train` and `ablate`.
#[derive(Debug, Args, Serialize)]
pub struct TrainCommon {
    /// Training manifest.
    #[arg(long)]
    pub train: PathBuf,
    /// Held-out manifest; without it the last `--holdout-fraction` of the
    /// training manifest is held out.
    #[arg(long)]
    pub held_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub holdout_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Width multiplier α.
    #[arg(long, default_value_t = 0.25)]
    pub width: f32,
    /// Use the 16×16 test graph instead of the 112×112 network.
    #[arg(long)]
    pub reduced: bool,
    /// Batch size; full-scale runs use 256.
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Steps; full-scale runs use 64000.
    #[arg(long, default_value_t = 2000)]
    pub iterations: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub weight_decay: f64,
    #[arg(long, value_enum, default_value = "decoupled")]
    pub decay_mode: DecayArg,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub epsilon: f64,
    /// Constant added to the angle factor.
    #[arg(long, default_value_t = 1.0)]
    pub angle_floor: f64,
    /// Extra squared-error term on the auxiliary angles (0 = off).
    #[arg(long, default_value_t = 0.0)]
    pub angle_regression: f64,
    /// Clip the global gradient norm.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Draw one flip/rotation/occlusion variant per batch slot.
    #[arg(long)]
    pub augment: bool,
    #[arg(long, default_value_t = 500)]
    pub eval_every: u64,
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: u64,
    #[arg(long, default_value_t = 10)]
    pub log_every: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Crop margin around the manifest bbox.
    #[arg(long, default_value_t = 0.0)]
    pub margin: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    #[arg(long, value_enum, default_value = "pfld")]
    pub variant: VariantArg,
    /// Continue from `<out>/state.ckpt` when present.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    /// Variants to compare, in table order.
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["l2", "l1", "pfld-no-omega", "pfld-no-theta", "pfld"])]
    pub variants: Vec<VariantArg>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values = ["ipn", "ion", "bbox"])]
    pub norms: Vec<String>,
    /// Images whose path contains this text form the `challenging` split,
    /// the rest `common`.
    #[arg(long)]
    pub challenging_pattern: Option<String>,
    /// Largest CED threshold.
    #[arg(long, default_value_t = 0.08)]
    pub ced_max: f64,
    #[arg(long, default_value_t = 0.001)]
    pub ced_step: f64,
    #[arg(long, default_value_t = 0.0)]
    pub margin: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Faces to process; landmark fields are ignored.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub margin: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct PoseArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Use the auxiliary branch of this checkpoint instead of fitting the
    /// manifest landmarks.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub margin: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    /// Width multipliers to time with fresh weights.
    #[arg(long, value_delimiter = ',', default_values_t = [0.25f32, 1.0])]
    pub widths: Vec<f32>,
    /// Time this checkpoint instead.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 20)]
    pub repetitions: usize,
    #[arg(long, value_enum, default_value = "68")]
    pub scheme: SchemeArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv` (including the program name), runs the command and maps
/// the outcome to an exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_data_error() {
                EXIT_DATA
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn echo_config(out: &Path, cli: &Cli) -> Result<()> {
    mkdir(out)?;
    let v = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "threads": cli.threads,
        "command": cli.command,
    });
    write_text(
        &out.join("config.json"),
        &serde_json::to_string_pretty(&v).expect("serializable"),
    )
}

fn dispatch(cli: &Cli) -> Result<()> {
    par::init_threads(cli.threads as usize)?;
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Convert(a) => convert(cli, a),
        Command::Annotate(a) => annotate(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Ablate(a) => ablate_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Infer(a) => infer(cli, a),
        Command::Pose(a) => pose(cli, a),
        Command::Bench(a) => bench(cli, a),
        Command::Docs => {
            print!("{}", reference_text());
            Ok(())
        }
    }
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    echo_config(&a.out, cli)?;
    let cfg = SynthConfig {
        count: a.count,
        scheme: a.scheme.into(),
        canvas: a.canvas,
        pose: PoseDistribution::default(),
        imbalance: ImbalanceProfile {
            profile_fraction: a.profile_fraction,
            head_up_fraction: a.head_up_fraction,
            head_down_fraction: a.head_down_fraction,
            expression_probability: a.expression_probability,
            occlusion_probability: a.occlusion_probability,
        },
        seed: a.seed,
        ..SynthConfig::default()
    };
    let d = cfg.generate()?;
    let m = d.write(&a.out)?;
    println!("wrote {} faces to {}", d.len(), m.display());
    Ok(())
}

/// Image path usable from a manifest in another directory.
fn absolute(base: &Path, image: &Path) -> Result<PathBuf> {
    let p = base.join(image);
    std::path::absolute(&p).map_err(|e| Error::io(p, e))
}

fn convert(cli: &Cli, a: &ConvertArgs) -> Result<()> {
    echo_config(&a.out, cli)?;
    let origin = |default| match a.origin {
        Some(OriginArg::OneBased) => CoordinateOrigin::OneBased,
        Some(OriginArg::ZeroBased) => CoordinateOrigin::ZeroBased,
        Some(OriginArg::Continuous) => CoordinateOrigin::Continuous,
        None => default,
    };
    let (mut entries, base) = match a.format {
        ConvertFormat::Pts => (
            convert_pts(&a.input, origin(CoordinateOrigin::OneBased), a.margin)?,
            a.input.clone(),
        ),
        ConvertFormat::Csv => (
            convert_csv(&a.input, origin(CoordinateOrigin::ZeroBased), a.margin)?,
            a.input.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
    };
    for e in &mut entries {
        e.image = absolute(&base, &e.image)?;
    }
    let m = a.out.join("manifest.txt");
    write_manifest(&m, &entries)?;
    println!("wrote {} faces to {}", entries.len(), m.display());
    Ok(())
}

fn reference_for(path: &Option<PathBuf>, scheme: Scheme) -> Result<ReferenceFace> {
    let r = match path {
        Some(p) => ReferenceFace::read(p)?,
        None => ReferenceFace::bundled(scheme),
    };
    if r.scheme != scheme {
        return Err(Error::invalid(format!(
            "reference is for scheme {}, manifest uses {scheme}",
            r.scheme
        )));
    }
    Ok(r)
}

fn manifest_scheme(entries: &[ManifestEntry]) -> Result<Scheme> {
    let s = entries
        .first()
        .ok_or_else(|| Error::invalid("manifest is empty"))?
        .scheme;
    if entries.iter().any(|e| e.scheme != s) {
        return Err(Error::invalid("manifest mixes landmark schemes"));
    }
    Ok(s)
}

fn annotate(cli: &Cli, a: &AnnotateArgs) -> Result<()> {
    echo_config(&a.out, cli)?;
    let m = read_manifest(&a.manifest)?;
    let scheme = manifest_scheme(&m.entries)?;
    let reference = reference_for(&a.reference, scheme)?;
    let thresholds = PoseThresholds {
        profile_yaw: a.profile_yaw,
        head_pitch: a.head_pitch,
    };
    let results = par::map_slice(&m.entries, |e| {
        annotate_landmarks(&e.landmarks, e.scheme, &reference)
    });
    let mut out = Vec::with_capacity(m.entries.len());
    let mut unavailable = 0;
    for (e, r) in m.entries.iter().zip(results) {
        let mut e = e.clone();
        e.image = absolute(&m.base_dir, &e.image)?;
        e.angles = r?.angles();
        match e.angles {
            Some(angles) if a.pose_attributes => {
                e.attributes = Some(pose_attributes(
                    &angles,
                    &thresholds,
                    e.attributes.unwrap_or_default(),
                ));
            }
            Some(_) => {}
            None => unavailable += 1,
        }
        out.push(e);
    }
    let path = a.out.join("manifest.txt");
    write_manifest(&path, &out)?;
    println!(
        "annotated {} faces ({unavailable} without visible anchors) into {}",
        out.len(),
        path.display()
    );
    Ok(())
}

fn split_tags(m: &crate::data::Manifest, pattern: &Option<String>) -> Option<Vec<String>> {
    let p = pattern.as_ref()?;
    Some(
        m.entries
            .iter()
            .map(|e| {
                if e.image.to_string_lossy().contains(p.as_str()) {
                    "challenging"
                } else {
                    "common"
                }
                .to_string()
            })
            .collect(),
    )
}

/// Loads a manifest, crops every face and fills in missing angles from
/// the bundled reference.
fn load_cropped(path: &Path, size: usize, margin: f64) -> Result<Vec<FaceSample>> {
    let mut samples = load_manifest(path)?;
    if samples.is_empty() {
        return Err(Error::invalid(format!("{} has no faces", path.display())));
    }
    let missing: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].gt_angles.is_none())
        .collect();
    if !missing.is_empty() {
        let reference = ReferenceFace::bundled(samples[0].scheme);
        let mut subset: Vec<FaceSample> = missing.iter().map(|&i| samples[i].clone()).collect();
        annotate_angles(&mut subset, &reference)?;
        for (i, s) in missing.into_iter().zip(subset) {
            samples[i].gt_angles = s.gt_angles;
        }
    }
    prepare(&samples, size, margin)
}

fn train_config(c: &TrainCommon, scheme: Scheme, variant: LossVariant) -> TrainConfig {
    TrainConfig {
        model: ModelSpec {
            width: c.width,
            scheme,
            reduced: c.reduced,
        },
        batch_size: c.batch_size,
        iterations: c.iterations,
        seed: c.seed,
        variant,
        angle_floor: c.angle_floor,
        class_weights: None,
        angle_regression: c.angle_regression,
        adam: AdamConfig {
            learning_rate: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
            weight_decay: c.weight_decay,
            decay_mode: match c.decay_mode {
                DecayArg::Decoupled => WeightDecayMode::Decoupled,
                DecayArg::L2 => WeightDecayMode::L2,
            },
        },
        grad_clip: c.grad_clip,
        augmentation: c.augment.then(AugmentationConfig::default),
        eval_every: c.eval_every,
        checkpoint_every: c.checkpoint_every,
        log_every: c.log_every,
    }
}

fn train_data(c: &TrainCommon) -> Result<(Scheme, Vec<FaceSample>, Vec<FaceSample>)> {
    let scheme = manifest_scheme(&read_manifest(&c.train)?.entries)?;
    let size = ModelSpec {
        width: c.width,
        scheme,
        reduced: c.reduced,
    }
    .build()?
    .input_size();
    let mut train_set = load_cropped(&c.train, size, c.margin)?;
    let held = match &c.held_out {
        Some(p) => load_cropped(p, size, c.margin)?,
        None => {
            if !(0.0..1.0).contains(&c.holdout_fraction) {
                return Err(Error::invalid("holdout fraction must lie in [0, 1)"));
            }
            let k = (train_set.len() as f64 * c.holdout_fraction).round() as usize;
            train_set.split_off(train_set.len() - k)
        }
    };
    if train_set.is_empty() {
        return Err(Error::invalid(
            "no training faces left after the held-out split",
        ));
    }
    Ok((scheme, train_set, held))
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    echo_config(&a.common.out, cli)?;
    let (scheme, tr, ho) = train_data(&a.common)?;
    let cfg = train_config(&a.common, scheme, a.variant.into());
    let s = train(&cfg, &tr, &ho, &a.common.out, a.resume)?;
    println!(
        "trained {} iterations; final loss {:?}",
        s.iterations,
        s.losses.last()
    );
    if let Some(e) = s.final_eval {
        println!(
            "held-out NME ipn {:.6} ion {:.6} bbox {:.6}",
            e.nme_ipn, e.nme_ion, e.nme_bbox
        );
    }
    Ok(())
}

fn ablate_cmd(cli: &Cli, a: &AblateArgs) -> Result<()> {
    echo_config(&a.common.out, cli)?;
    let (scheme, tr, ho) = train_data(&a.common)?;
    let cfg = train_config(&a.common, scheme, LossVariant::Pfld);
    let variants: Vec<LossVariant> = a.variants.iter().map(|&v| v.into()).collect();
    let r = ablate(&cfg, &variants, &tr, &ho, &a.common.out)?;
    print!("{}", r.to_table());
    Ok(())
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> Result<()> {
    echo_config(&a.out, cli)?;
    let norms = a
        .norms
        .iter()
        .map(|s| s.parse())
        .collect::<Result<Vec<NmeNormalization>>>()?;
    if !(a.ced_step > 0.0 && a.ced_max > 0.0) {
        return Err(Error::invalid("CED range must be positive"));
    }
    let steps = (a.ced_max / a.ced_step).round() as usize;
    let thresholds: Vec<f64> = if steps == 80 && a.ced_step == 0.001 {
        default_thresholds()
    } else {
        (0..=steps).map(|i| i as f64 * a.ced_step).collect()
    };
    let (spec, model, params) = load_model(&a.checkpoint)?;
    let m = read_manifest(&a.manifest)?;
    if manifest_scheme(&m.entries)? != spec.scheme {
        return Err(Error::invalid(format!(
            "checkpoint is for scheme {}, manifest differs",
            spec.scheme
        )));
    }
    let tags = split_tags(&m, &a.challenging_pattern);
    let samples = prepare(&load_manifest(&a.manifest)?, model.input_size(), a.margin)?;
    let r = evaluate(
        &model,
        &params,
        &samples,
        tags.as_deref(),
        &norms,
        &thresholds,
    )?;
    r.write(&a.out)?;
    print!("{}", r.to_table());
    Ok(())
}

fn infer(cli: &Cli, a: &InferArgs) -> Result<()> {
    echo_config(&a.out, cli)?;
    let (spec, model, params) = load_model(&a.checkpoint)?;
    let m = read_manifest(&a.manifest)?;
    let samples = prepare(&load_manifest(&a.manifest)?, model.input_size(), a.margin)?;
    if samples.iter().any(|s| s.scheme != spec.scheme) {
        return Err(Error::invalid(
            "manifest scheme differs from the checkpoint",
        ));
    }
    let p = predict(&model, &params, &samples, 32, false)?;
    let mut entries = Vec::with_capacity(samples.len());
    for ((e, s), l) in m.entries.iter().zip(&samples).zip(&p.landmarks) {
        let b = s.bbox;
        let px = l.map_points(|q| Point2::new(b.x + q.x * b.w, b.y + q.y * b.h));
        entries.push(ManifestEntry {
            image: absolute(&m.base_dir, &e.image)?,
            scheme: e.scheme,
            bbox: e.bbox,
            landmarks: LandmarkSet::new(px.points),
            attributes: None,
            angles: None,
        });
    }
    let path = a.out.join("predictions.txt");
    write_manifest(&path, &entries)?;
    println!("wrote {} predictions to {}", entries.len(), path.display());
    Ok(())
}

fn pose(cli: &Cli, a: &PoseArgs) -> Result<()> {
    if let Some(out) = &a.out {
        echo_config(out, cli)?;
    }
    let m = read_manifest(&a.manifest)?;
    let scheme = manifest_scheme(&m.entries)?;
    let angles: Vec<Option<[f64; 3]>> = match &a.checkpoint {
        Some(ck) => {
            let (_, model, params) = load_model(ck)?;
            let samples = prepare(&load_manifest(&a.manifest)?, model.input_size(), a.margin)?;
            let p = predict(&model, &params, &samples, 32, true)?;
            p.angles.iter().map(|a| Some(a.to_degrees())).collect()
        }
        None => {
            let reference = reference_for(&a.reference, scheme)?;
            par::map_slice(&m.entries, |e| {
                annotate_landmarks(&e.landmarks, e.scheme, &reference)
            })
            .into_iter()
            .map(|r| r.map(|x| x.angles().map(|a| a.to_degrees())))
            .collect::<Result<_>>()?
        }
    };
    let mut text = String::from("image\tyaw_deg\tpitch_deg\troll_deg\n");
    for (e, a) in m.entries.iter().zip(&angles) {
        match a {
            Some([y, p, r]) => {
                text.push_str(&format!("{}\t{y:.4}\t{p:.4}\t{r:.4}\n", e.image.display()))
            }
            None => text.push_str(&format!("{}\t-\t-\t-\n", e.image.display())),
        }
    }
    print!("{text}");
    if let Some(out) = &a.out {
        write_text(&out.join("pose.tsv"), &text)?;
    }
    Ok(())
}

fn bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    if let Some(out) = &a.out {
        echo_config(out, cli)?;
    }
    let mut reports = Vec::new();
    match &a.checkpoint {
        Some(ck) => {
            let (_, model, params) = load_model(ck)?;
            reports.push(benchmark(&model, &params, a.batch, a.repetitions)?);
        }
        None => {
            for &w in &a.widths {
                let model = ModelSpec {
                    width: w,
                    scheme: a.scheme.into(),
                    reduced: false,
                }
                .build()?;
                let params = model.init(0)?;
                reports.push(benchmark(&model, &params, a.batch, a.repetitions)?);
            }
        }
    }
    let mut text = String::from("width\tbatch\tmedian_ms\tmin_ms\tparameters\tbytes\n");
    for r in &reports {
        text.push_str(&format!(
            "{}\t{}\t{:.3}\t{:.3}\t{}\t{}\n",
            r.width, r.batch, r.median_ms, r.min_ms, r.parameters, r.serialized_bytes
        ));
    }
    print!("{text}");
    if let Some(out) = &a.out {
        write_text(&out.join("bench.tsv"), &text)?;
        write_text(
            &out.join("bench.json"),
            &serde_json::to_string_pretty(&reports).expect("serializable"),
        )?;
    }
    Ok(())
}

/// Man-style reference built from the command table.
pub fn reference_text() -> String {
    let mut cmd = Cli::command();
    let mut s = String::new();
    s.push_str(&cmd.render_long_help().to_string());
    s.push_str("\nEXIT CODES\n  0  success\n  1  usage error\n  2  data error (unreadable or malformed input)\n  3  runtime failure\n");
    s.push_str(
        "\nFILES\n  manifest.txt  one face per line; see the data::manifest module documentation\n",
    );
    s.push_str("  config.json   resolved settings of the run that produced a directory\n");
    for sub in cmd.get_subcommands_mut() {
        if sub.get_name() == "help" {
            continue;
        }
        s.push_str(&format!("\n==== pfld {} ====\n", sub.get_name()));
        s.push_str(&sub.render_long_help().to_string());
    }
    s
}
