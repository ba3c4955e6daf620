//! The landmark backbone with its multi-scale head, and the auxiliary pose
//! branch that reads an intermediate backbone feature map.

use super::layers::{
    backward_seq, forward_seq, Activation, BatchNorm, Block, Cache, Conv2d, DepthwiseConv2d, Layer,
    Linear, Mode, StatUpdates,
};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::geometry::EulerAngles;
use crate::{Error, Result};

pub const INPUT_SIZE: usize = 112;
pub const MIN_CHANNELS: usize = 8;

/// One inverted-residual sequence: `repeat` blocks, the first with `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BottleneckConfig {
    pub expansion: usize,
    pub out_channels: usize,
    pub repeat: usize,
    pub stride: usize,
}

impl BottleneckConfig {
    pub const fn new(expansion: usize, out_channels: usize, repeat: usize, stride: usize) -> Self {
        Self {
            expansion,
            out_channels,
            repeat,
            stride,
        }
    }
}

/// Bottleneck sequences of the full-size backbone, in order.
pub const BACKBONE_STAGES: [BottleneckConfig; 4] = [
    BottleneckConfig::new(2, 64, 5, 2),
    BottleneckConfig::new(2, 128, 1, 2),
    BottleneckConfig::new(4, 128, 6, 1),
    BottleneckConfig::new(2, 16, 1, 1),
];

/// Which three feature maps the fully connected head concatenates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadScales {
    /// Last bottleneck output, the strided 3×3 conv output, and the
    /// full-extent conv output (14²×16, 7²×32, 1²×128 at full size).
    #[default]
    BlockAndConvs,
    /// The two head conv outputs, with the last one passed through twice
    /// (7²×32, 1²×128, 1²×128 at full size).
    ConvsOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub width: f32,
    pub num_landmarks: usize,
    pub input_size: usize,
    pub stem_channels: usize,
    pub stages: Vec<BottleneckConfig>,
    pub s2_channels: usize,
    pub s3_channels: usize,
    pub head: HeadScales,
}

/// `max(8, round(α·c / 8)·8)`.
pub fn scale_channels(channels: usize, width: f32) -> usize {
    let units = (width as f64 * channels as f64 / 8.0).round() as usize;
    (units * 8).max(MIN_CHANNELS)
}

impl BackboneConfig {
    /// Full-size 112×112 backbone at width multiplier `width`.
    pub fn new(width: f32, num_landmarks: usize) -> Result<Self> {
        let cfg = Self {
            width,
            num_landmarks,
            input_size: INPUT_SIZE,
            stem_channels: 64,
            stages: BACKBONE_STAGES.to_vec(),
            s2_channels: 32,
            s3_channels: 128,
            head: HeadScales::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// A small graph with the same operator set: 16×16 input, 8–16
    /// channels, one residual block.
    pub fn reduced(num_landmarks: usize) -> Self {
        Self {
            width: 1.0,
            num_landmarks,
            input_size: 16,
            stem_channels: 8,
            stages: vec![
                BottleneckConfig::new(2, 8, 2, 2),
                BottleneckConfig::new(2, 16, 1, 2),
                BottleneckConfig::new(2, 8, 1, 1),
            ],
            s2_channels: 8,
            s3_channels: 16,
            head: HeadScales::default(),
        }
    }

    pub fn with_head(mut self, head: HeadScales) -> Self {
        self.head = head;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width <= 1.0) {
            return Err(Error::invalid(format!(
                "width multiplier {} outside (0, 1]",
                self.width
            )));
        }
        let widest = self
            .stages
            .iter()
            .map(|s| s.out_channels)
            .chain([self.stem_channels, self.s2_channels, self.s3_channels])
            .max()
            .unwrap_or(0);
        if (self.width as f64) * (widest as f64) < MIN_CHANNELS as f64 {
            return Err(Error::invalid(format!(
                "width multiplier {} scales every stage below {MIN_CHANNELS} channels",
                self.width
            )));
        }
        if self.num_landmarks == 0 {
            return Err(Error::invalid("num_landmarks must be positive"));
        }
        if self.stages.is_empty() {
            return Err(Error::invalid(
                "backbone needs at least one bottleneck sequence",
            ));
        }
        for s in &self.stages {
            if !matches!(s.stride, 1 | 2)
                || s.expansion == 0
                || s.repeat == 0
                || s.out_channels == 0
            {
                return Err(Error::invalid(format!(
                    "invalid bottleneck configuration {s:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn channels(&self, c: usize) -> usize {
        scale_channels(c, self.width)
    }

    /// Channel count of the auxiliary tap (first bottleneck sequence output).
    pub fn tap_channels(&self) -> usize {
        self.channels(self.stages[0].out_channels)
    }
}

fn conv_bn_act(
    name: &str,
    k: usize,
    s: usize,
    pad: usize,
    cin: usize,
    cout: usize,
    act: Option<Activation>,
) -> Vec<Layer> {
    let mut v = vec![
        Layer::Conv(Conv2d::new(name, k, s, pad, cin, cout)),
        Layer::BatchNorm(BatchNorm::new(format!("{name}.bn"), cout)),
    ];
    v.extend(act.map(Layer::Act));
    v
}

fn bottleneck(name: &str, cin: usize, cout: usize, expansion: usize, stride: usize) -> Layer {
    let hidden = cin * expansion;
    let mut layers = Vec::new();
    if expansion != 1 {
        layers.extend(conv_bn_act(
            &format!("{name}.expand"),
            1,
            1,
            0,
            cin,
            hidden,
            Some(Activation::Relu6),
        ));
    }
    layers.push(Layer::Depthwise(DepthwiseConv2d::new(
        format!("{name}.dw"),
        3,
        stride,
        1,
        hidden,
    )));
    layers.push(Layer::BatchNorm(BatchNorm::new(
        format!("{name}.dw.bn"),
        hidden,
    )));
    layers.push(Layer::Act(Activation::Relu6));
    layers.extend(conv_bn_act(
        &format!("{name}.project"),
        1,
        1,
        0,
        hidden,
        cout,
        None,
    ));
    Layer::Block(Block::new(name, layers, stride == 1 && cin == cout))
}

fn seq_shape(layers: &[Layer], mut shape: Vec<usize>) -> Result<Vec<usize>> {
    for l in layers {
        shape = l.output_shape(&shape)?;
    }
    Ok(shape)
}

fn init_all(layers: &[Layer], store: &mut ParamStore, seed: u64) -> Result<()> {
    layers.iter().try_for_each(|l| l.init(store, seed))
}

/// Concatenates flattened per-sample items of equally batched tensors.
fn concat_items(parts: &[&Tensor]) -> Result<Tensor> {
    let batch = parts.first().map_or(0, |t| t.batch());
    let width: usize = parts.iter().map(|t| t.item_len()).sum();
    let mut data = Vec::with_capacity(batch * width);
    for b in 0..batch {
        for p in parts {
            data.extend_from_slice(p.item(b));
        }
    }
    Tensor::from_vec(&[batch, width], data)
}

/// Inverse of [`concat_items`]: splits `[B, Σ]` back into the given shapes.
fn split_items(t: &Tensor, shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    let batch = t.batch();
    let mut out: Vec<Vec<f32>> = shapes
        .iter()
        .map(|s| Vec::with_capacity(s.iter().product::<usize>() * batch))
        .collect();
    for b in 0..batch {
        let mut item = t.item(b);
        for (dst, s) in out.iter_mut().zip(shapes) {
            let n: usize = s.iter().product();
            dst.extend_from_slice(&item[..n]);
            item = &item[n..];
        }
    }
    out.into_iter()
        .zip(shapes)
        .map(|(d, s)| {
            let mut shape = vec![batch];
            shape.extend_from_slice(s);
            Tensor::from_vec(&shape, d)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BackboneOutput {
    /// `[B, 2N]`, interleaved x, y in crop coordinates.
    pub landmarks: Tensor,
    /// First bottleneck sequence output, `[B, H, W, C]`.
    pub aux_tap: Tensor,
}

#[derive(Debug, Default)]
pub struct BackboneTape {
    stem: Vec<Cache>,
    stages: Vec<Vec<Cache>>,
    s2: Vec<Cache>,
    s3: Vec<Cache>,
    fc: Vec<Cache>,
}

/// Layer graph of the backbone for a fixed configuration.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: Vec<Layer>,
    stages: Vec<Vec<Layer>>,
    s2: Vec<Layer>,
    s3: Vec<Layer>,
    fc: Vec<Layer>,
    s1_shape: Vec<usize>,
    s2_shape: Vec<usize>,
    s3_shape: Vec<usize>,
    tap_shape: Vec<usize>,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let stem_c = config.channels(config.stem_channels);
        let mut stem = conv_bn_act("backbone.conv1", 3, 2, 1, 3, stem_c, Some(Activation::Relu));
        stem.push(Layer::Depthwise(DepthwiseConv2d::new(
            "backbone.dw",
            3,
            1,
            1,
            stem_c,
        )));
        stem.push(Layer::BatchNorm(BatchNorm::new("backbone.dw.bn", stem_c)));
        stem.push(Layer::Act(Activation::Relu));

        let mut cin = stem_c;
        let mut stages: Vec<Vec<Layer>> = Vec::new();
        for (si, st) in config.stages.iter().enumerate() {
            let cout = config.channels(st.out_channels);
            let blocks: Vec<Layer> = (0..st.repeat)
                .map(|r| {
                    let stride = if r == 0 { st.stride } else { 1 };
                    let b = bottleneck(
                        &format!("backbone.bottleneck{}.{r}", si + 1),
                        cin,
                        cout,
                        st.expansion,
                        stride,
                    );
                    cin = cout;
                    b
                })
                .collect();
            stages.push(blocks);
        }

        let input = vec![1, config.input_size, config.input_size, 3];
        let after_stem = seq_shape(&stem, input)?;
        let tap_shape = seq_shape(&stages[0], after_stem)?;
        let s1_shape = stages[1..]
            .iter()
            .try_fold(tap_shape.clone(), |s, st| seq_shape(st, s))?;
        let s2 = conv_bn_act(
            "backbone.s2",
            3,
            2,
            1,
            cin,
            config.channels(config.s2_channels),
            Some(Activation::Relu),
        );
        let s2_shape = seq_shape(&s2, s1_shape.clone())?;
        // The last head conv spans the whole remaining map.
        let k = s2_shape[1];
        if s2_shape[1] != s2_shape[2] {
            return Err(Error::invalid("head feature map must be square"));
        }
        let s3 = conv_bn_act(
            "backbone.s3",
            k,
            1,
            0,
            s2_shape[3],
            config.channels(config.s3_channels),
            Some(Activation::Relu),
        );
        let s3_shape = seq_shape(&s3, s2_shape.clone())?;
        let mut bb = Self {
            fc: Vec::new(),
            s1_shape: s1_shape[1..].to_vec(),
            s2_shape: s2_shape[1..].to_vec(),
            s3_shape: s3_shape[1..].to_vec(),
            tap_shape: tap_shape[1..].to_vec(),
            config,
            stem,
            stages,
            s2,
            s3,
        };
        let features = bb
            .head_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum();
        bb.fc = vec![Layer::Linear(Linear::new(
            "backbone.fc",
            features,
            2 * bb.config.num_landmarks,
        ))];
        Ok(bb)
    }

    /// Per-item shapes of the three concatenated head inputs.
    pub fn head_shapes(&self) -> [Vec<usize>; 3] {
        match self.config.head {
            HeadScales::BlockAndConvs => [
                self.s1_shape.clone(),
                self.s2_shape.clone(),
                self.s3_shape.clone(),
            ],
            HeadScales::ConvsOnly => [
                self.s2_shape.clone(),
                self.s3_shape.clone(),
                self.s3_shape.clone(),
            ],
        }
    }

    pub fn head_features(&self) -> usize {
        self.head_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// Per-item shape `[H, W, C]` of the auxiliary tap.
    pub fn tap_shape(&self) -> &[usize] {
        &self.tap_shape
    }

    pub fn output_dim(&self) -> usize {
        2 * self.config.num_landmarks
    }

    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        init_all(&self.stem, &mut store, seed)?;
        for st in &self.stages {
            init_all(st, &mut store, seed)?;
        }
        init_all(&self.s2, &mut store, seed)?;
        init_all(&self.s3, &mut store, seed)?;
        init_all(&self.fc, &mut store, seed)?;
        Ok(store)
    }

    /// Named per-item output shapes of every table row, in execution order.
    pub fn trace(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut rows = Vec::new();
        let mut shape = vec![1, self.config.input_size, self.config.input_size, 3];
        rows.push(("input".to_string(), shape[1..].to_vec()));
        shape = seq_shape(&self.stem[..3], shape)?;
        rows.push(("conv3x3".to_string(), shape[1..].to_vec()));
        shape = seq_shape(&self.stem[3..], shape)?;
        rows.push(("depthwise3x3".to_string(), shape[1..].to_vec()));
        for (i, st) in self.stages.iter().enumerate() {
            shape = seq_shape(st, shape)?;
            rows.push((format!("bottleneck{}", i + 1), shape[1..].to_vec()));
        }
        shape = seq_shape(&self.s2, shape)?;
        rows.push(("s2_conv3x3".to_string(), shape[1..].to_vec()));
        shape = seq_shape(&self.s3, shape)?;
        rows.push(("s3_conv".to_string(), shape[1..].to_vec()));
        rows.push(("concat".to_string(), vec![self.head_features()]));
        rows.push(("fc".to_string(), vec![self.output_dim()]));
        Ok(rows)
    }

    /// Residual flag of every bottleneck block, keyed by block name.
    pub fn residual_flags(&self) -> Vec<(String, bool)> {
        self.stages
            .iter()
            .flatten()
            .filter_map(|l| match l {
                Layer::Block(b) => Some((b.name.clone(), b.residual)),
                _ => None,
            })
            .collect()
    }

    pub fn forward(
        &self,
        params: &ParamStore,
        input: Tensor,
        mode: Mode,
        stats: &mut StatUpdates,
    ) -> Result<(BackboneOutput, BackboneTape)> {
        let s = self.config.input_size;
        input.expect_shape(&[input.batch(), s, s, 3], "backbone input")?;
        if input.batch() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if !input.all_finite() {
            return Err(Error::NonFinite {
                layer: "backbone input".into(),
            });
        }
        let mut tape = BackboneTape::default();
        let (h, c) = forward_seq(&self.stem, params, input, mode, stats)?;
        tape.stem = c;
        let (tap, c) = forward_seq(&self.stages[0], params, h, mode, stats)?;
        tape.stages.push(c);
        let mut h = tap.clone();
        for st in &self.stages[1..] {
            let (y, c) = forward_seq(st, params, h, mode, stats)?;
            h = y;
            tape.stages.push(c);
        }
        let s1 = h;
        let (s2, c) = forward_seq(&self.s2, params, s1.clone(), mode, stats)?;
        tape.s2 = c;
        let (s3, c) = forward_seq(&self.s3, params, s2.clone(), mode, stats)?;
        tape.s3 = c;
        let features = match self.config.head {
            HeadScales::BlockAndConvs => concat_items(&[&s1, &s2, &s3])?,
            HeadScales::ConvsOnly => concat_items(&[&s2, &s3, &s3])?,
        };
        let (landmarks, c) = forward_seq(&self.fc, params, features, mode, stats)?;
        tape.fc = c;
        Ok((
            BackboneOutput {
                landmarks,
                aux_tap: tap,
            },
            tape,
        ))
    }

    /// Accumulates parameter gradients given output gradients; `d_tap` is
    /// the gradient arriving at the auxiliary tap, if any.
    pub fn backward(
        &self,
        params: &ParamStore,
        tape: BackboneTape,
        d_landmarks: Tensor,
        d_tap: Option<Tensor>,
        grads: &mut ParamStore,
    ) -> Result<()> {
        if tape.stages.len() != self.stages.len() || tape.fc.is_empty() {
            return Err(Error::NoForwardState);
        }
        d_landmarks.expect_shape(
            &[d_landmarks.batch(), self.output_dim()],
            "landmark gradient",
        )?;
        let d_feat = backward_seq(&self.fc, params, tape.fc, d_landmarks, grads, true)?
            .ok_or(Error::NoForwardState)?;
        let mut parts = split_items(&d_feat, &self.head_shapes())?.into_iter();
        let (p1, p2, p3) = (
            parts.next().unwrap(),
            parts.next().unwrap(),
            parts.next().unwrap(),
        );
        let (d_s1, mut d_s2, d_s3) = match self.config.head {
            HeadScales::BlockAndConvs => (Some(p1), p2, p3),
            HeadScales::ConvsOnly => {
                let mut d3 = p2;
                d3.add_assign(&p3);
                (None, p1, d3)
            }
        };
        let g = backward_seq(&self.s3, params, tape.s3, d_s3, grads, true)?
            .ok_or(Error::NoForwardState)?;
        d_s2.add_assign(&g);
        let g = backward_seq(&self.s2, params, tape.s2, d_s2, grads, true)?
            .ok_or(Error::NoForwardState)?;
        let mut d = match d_s1 {
            Some(mut d1) => {
                d1.add_assign(&g);
                d1
            }
            None => g,
        };
        let mut stage_tapes = tape.stages;
        for st in self.stages[1..].iter().rev() {
            let c = stage_tapes.pop().ok_or(Error::NoForwardState)?;
            d = backward_seq(st, params, c, d, grads, true)?.ok_or(Error::NoForwardState)?;
        }
        if let Some(t) = d_tap {
            d.add_assign(&t);
        }
        let c = stage_tapes.pop().ok_or(Error::NoForwardState)?;
        let d = backward_seq(&self.stages[0], params, c, d, grads, true)?
            .ok_or(Error::NoForwardState)?;
        backward_seq(&self.stem, params, tape.stem, d, grads, false)?;
        Ok(())
    }
}

/// Widths of the auxiliary stack: three 3×3 convs, the full-extent conv, and
/// the hidden full connection.
pub const AUX_WIDTHS: [usize; 5] = [128, 128, 32, 128, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryConfig {
    pub in_channels: usize,
    /// Spatial size of the (square) tap.
    pub tap_size: usize,
    pub widths: [usize; 5],
}

impl AuxiliaryConfig {
    /// Auxiliary net reading the tap of a full-size backbone at `width`.
    pub fn for_width(width: f32) -> Result<Self> {
        let bb = BackboneConfig::new(width, 1)?;
        Ok(Self {
            in_channels: bb.tap_channels(),
            tap_size: INPUT_SIZE / 4,
            widths: AUX_WIDTHS,
        })
    }
}

/// Layer graph of the pose branch.
#[derive(Debug, Clone)]
pub struct Auxiliary {
    pub config: AuxiliaryConfig,
    layers: Vec<Layer>,
}

impl Auxiliary {
    pub fn new(config: AuxiliaryConfig) -> Result<Self> {
        let [c1, c2, c3, c4, f1] = config.widths;
        let relu = Some(Activation::Relu);
        let mut layers = conv_bn_act("aux.conv1", 3, 2, 1, config.in_channels, c1, relu);
        layers.extend(conv_bn_act("aux.conv2", 3, 1, 1, c1, c2, relu));
        layers.extend(conv_bn_act("aux.conv3", 3, 2, 1, c2, c3, relu));
        let s = seq_shape(
            &layers,
            vec![1, config.tap_size, config.tap_size, config.in_channels],
        )?;
        layers.extend(conv_bn_act("aux.conv4", s[1], 1, 0, c3, c4, relu));
        layers.push(Layer::Linear(Linear::new("aux.fc1", c4, f1)));
        layers.push(Layer::Act(Activation::Relu));
        layers.push(Layer::Linear(Linear::new("aux.fc2", f1, 3)));
        Ok(Self { config, layers })
    }

    pub fn tap_shape(&self) -> [usize; 3] {
        let c = &self.config;
        [c.tap_size, c.tap_size, c.in_channels]
    }

    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        init_all(&self.layers, &mut store, seed)?;
        Ok(store)
    }

    /// Named per-item output shapes of every row, in execution order.
    pub fn trace(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut rows = vec![("input".to_string(), self.tap_shape().to_vec())];
        let mut shape = vec![
            1,
            self.config.tap_size,
            self.config.tap_size,
            self.config.in_channels,
        ];
        for l in &self.layers {
            shape = l.output_shape(&shape)?;
            if matches!(l, Layer::Conv(_) | Layer::Linear(_)) {
                rows.push((
                    l.name().trim_start_matches("aux.").to_string(),
                    shape[1..].to_vec(),
                ));
            }
        }
        Ok(rows)
    }

    /// `[B, 3]` angles in radians (yaw, pitch, roll).
    pub fn forward(
        &self,
        params: &ParamStore,
        tap: Tensor,
        mode: Mode,
        stats: &mut StatUpdates,
    ) -> Result<(Tensor, Vec<Cache>)> {
        let mut expected = vec![tap.batch()];
        expected.extend(self.tap_shape());
        tap.expect_shape(&expected, "auxiliary tap")?;
        forward_seq(&self.layers, params, tap, mode, stats)
    }

    pub fn backward(
        &self,
        params: &ParamStore,
        caches: Vec<Cache>,
        d_angles: Tensor,
        grads: &mut ParamStore,
    ) -> Result<Tensor> {
        backward_seq(&self.layers, params, caches, d_angles, grads, true)?
            .ok_or(Error::NoForwardState)
    }
}

/// Converts a `[B, 3]` network output to per-sample angles.
pub fn angles_from_tensor(t: &Tensor) -> Vec<EulerAngles> {
    t.data()
        .chunks_exact(3)
        .map(|c| EulerAngles::new(c[0] as f64, c[1] as f64, c[2] as f64))
        .collect()
}

/// Retained intermediates of a training forward pass through both branches.
#[derive(Debug, Default)]
pub struct GradientTape {
    backbone: Option<BackboneTape>,
    auxiliary: Option<Vec<Cache>>,
}

impl GradientTape {
    pub fn is_empty(&self) -> bool {
        self.backbone.is_none()
    }
}

#[derive(Debug)]
pub struct PfldForward {
    /// `[B, 2N]`.
    pub landmarks: Tensor,
    /// `[B, 3]`, present when the auxiliary branch ran.
    pub angles: Option<Tensor>,
    /// Running-statistic replacements (train mode only).
    pub stats: StatUpdates,
    pub tape: GradientTape,
}

/// Backbone plus auxiliary branch with a shared parameter store.
#[derive(Debug, Clone)]
pub struct Pfld {
    pub backbone: Backbone,
    pub auxiliary: Auxiliary,
}

impl Pfld {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        let backbone = Backbone::new(config)?;
        let tap = backbone.tap_shape();
        if tap[0] != tap[1] {
            return Err(Error::invalid("auxiliary tap must be square"));
        }
        let auxiliary = Auxiliary::new(AuxiliaryConfig {
            in_channels: tap[2],
            tap_size: tap[0],
            widths: if backbone.config.input_size == INPUT_SIZE {
                AUX_WIDTHS
            } else {
                [8, 8, 8, 8, 8]
            },
        })?;
        Ok(Self {
            backbone,
            auxiliary,
        })
    }

    pub fn num_landmarks(&self) -> usize {
        self.backbone.config.num_landmarks
    }

    pub fn input_size(&self) -> usize {
        self.backbone.config.input_size
    }

    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut store = self.backbone.init(seed)?;
        store.merge(self.auxiliary.init(seed)?)?;
        Ok(store)
    }

    /// Runs the backbone and, when `with_auxiliary`, the pose branch.
    /// Train mode records a tape for [`Pfld::backward`].
    pub fn forward(
        &self,
        params: &ParamStore,
        input: Tensor,
        mode: Mode,
        with_auxiliary: bool,
    ) -> Result<PfldForward> {
        let mut stats = StatUpdates::new();
        let (out, bb_tape) = self.backbone.forward(params, input, mode, &mut stats)?;
        let (angles, aux_tape) = if with_auxiliary {
            let (a, c) = self
                .auxiliary
                .forward(params, out.aux_tap, mode, &mut stats)?;
            (Some(a), Some(c))
        } else {
            (None, None)
        };
        let tape = if mode == Mode::Train {
            GradientTape {
                backbone: Some(bb_tape),
                auxiliary: aux_tape,
            }
        } else {
            GradientTape::default()
        };
        Ok(PfldForward {
            landmarks: out.landmarks,
            angles,
            stats,
            tape,
        })
    }

    /// Landmark predictions in eval mode, `[B, 2N]`.
    pub fn predict(&self, params: &ParamStore, input: Tensor) -> Result<Tensor> {
        Ok(self.forward(params, input, Mode::Eval, false)?.landmarks)
    }

    /// Gradients of every parameter given output gradients. `d_angles` is
    /// required exactly when the tape includes the auxiliary branch.
    pub fn backward(
        &self,
        params: &ParamStore,
        tape: GradientTape,
        d_landmarks: Tensor,
        d_angles: Option<Tensor>,
    ) -> Result<ParamStore> {
        let bb_tape = tape.backbone.ok_or(Error::NoForwardState)?;
        let mut grads = params.zeros_like();
        let d_tap = match (tape.auxiliary, d_angles) {
            (Some(caches), Some(d)) => {
                d.expect_shape(&[d.batch(), 3], "angle gradient")?;
                Some(self.auxiliary.backward(params, caches, d, &mut grads)?)
            }
            (None, None) => None,
            (None, Some(_)) => return Err(Error::NoForwardState),
            (Some(_), None) => {
                return Err(Error::invalid(
                    "angle gradient missing for auxiliary branch",
                ))
            }
        };
        self.backbone
            .backward(params, bb_tape, d_landmarks, d_tap, &mut grads)?;
        Ok(grads)
    }
}

/// Replaces running statistics with the values recorded by a training pass.
pub fn apply_stat_updates(params: &mut ParamStore, stats: StatUpdates) -> Result<()> {
    for (name, values) in stats {
        params.get_mut(&name)?.data_mut().copy_from_slice(&values);
    }
    Ok(())
}

pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<ParamStore> {
    Backbone::new(config.clone())?.init(seed)
}

pub fn forward_backbone(
    config: &BackboneConfig,
    params: &ParamStore,
    input: Tensor,
    mode: Mode,
) -> Result<BackboneOutput> {
    let mut stats = StatUpdates::new();
    Ok(Backbone::new(config.clone())?
        .forward(params, input, mode, &mut stats)?
        .0)
}

pub fn build_auxiliary(width: f32, seed: u64) -> Result<ParamStore> {
    Auxiliary::new(AuxiliaryConfig::for_width(width)?)?.init(seed)
}

pub fn forward_auxiliary(width: f32, params: &ParamStore, tap: Tensor) -> Result<Vec<EulerAngles>> {
    let mut stats = StatUpdates::new();
    let (out, _) = Auxiliary::new(AuxiliaryConfig::for_width(width)?)?.forward(
        params,
        tap,
        Mode::Eval,
        &mut stats,
    )?;
    Ok(angles_from_tensor(&out))
}
