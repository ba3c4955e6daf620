//! Differentiable operators over NHWC tensors.
//!
//! Every operator has an explicit forward pass that optionally retains what
//! its backward pass needs, and a backward pass that accumulates parameter
//! gradients into a [`ParamStore`] and returns the input gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::gemm::{sgemm, Op};
use super::params::{EntryKind, ParamStore};
use super::tensor::Tensor;
use crate::{par, Error, Result};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, retained intermediates.
    Train,
    /// Running statistics, nothing retained.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// ReLU clamped at 6.
    Relu6,
}

/// Running-statistic replacements produced by a training forward pass.
pub type StatUpdates = Vec<(String, Vec<f32>)>;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    pub name: String,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

/// A sequence of layers, optionally wrapped by an identity skip connection.
#[derive(Debug, Clone)]
pub struct Block {
    pub name: String,
    pub layers: Vec<Layer>,
    pub residual: bool,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Depthwise(DepthwiseConv2d),
    BatchNorm(BatchNorm),
    Act(Activation),
    Linear(Linear),
    Block(Block),
}

/// Intermediates retained by a training forward pass.
#[derive(Debug)]
pub enum Cache {
    Conv { a: Vec<f32>, in_shape: Vec<usize> },
    Depthwise { input: Tensor },
    BatchNorm { xhat: Vec<f32>, inv_std: Vec<f32> },
    Act { mask: Vec<u8> },
    Linear { input: Tensor },
    Block(Vec<Cache>),
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if size + 2 * pad < kernel {
        return Err(Error::invalid(format!(
            "kernel {kernel} larger than padded input {size}+2·{pad}"
        )));
    }
    Ok((size + 2 * pad - kernel) / stride + 1)
}

fn expect_nhwc(shape: &[usize], channels: usize, layer: &str) -> Result<()> {
    if shape.len() != 4 || shape[3] != channels {
        return Err(Error::Shape {
            context: layer.into(),
            expected: vec![shape.first().copied().unwrap_or(0), 0, 0, channels],
            actual: shape.to_vec(),
        });
    }
    Ok(())
}

fn layer_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name keeps initialization independent of build order.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

fn normal_tensor(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("length matches")
}

fn accumulate(grads: &mut ParamStore, name: &str, values: &[f32]) -> Result<()> {
    let g = grads.get_mut(name)?;
    for (a, b) in g.data_mut().iter_mut().zip(values) {
        *a += b;
    }
    Ok(())
}

impl Conv2d {
    pub fn new(
        name: impl Into<String>,
        kernel: usize,
        stride: usize,
        pad: usize,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self {
            name: name.into(),
            kernel,
            stride,
            pad,
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    pub fn output_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        expect_nhwc(s, self.in_channels, &self.name)?;
        Ok(vec![
            s[0],
            conv_out(s[1], self.kernel, self.stride, self.pad)?,
            conv_out(s[2], self.kernel, self.stride, self.pad)?,
            self.out_channels,
        ])
    }

    fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let mut rng = layer_rng(seed, &self.name);
        let std = (2.0 / self.patch_len() as f32).sqrt();
        store.insert(
            self.weight_name(),
            EntryKind::Trainable,
            normal_tensor(
                &[
                    self.kernel,
                    self.kernel,
                    self.in_channels,
                    self.out_channels,
                ],
                std,
                &mut rng,
            ),
        )
    }

    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Vec<f32> {
        let [_, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let k = self.kernel;
        let plen = self.patch_len();
        let mut col = vec![0.0f32; x.batch() * oh * ow * plen];
        par::for_each_chunk_mut(&mut col, oh * ow * plen, |b, dst| {
            let src = x.item(b);
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &mut dst[(oy * ow + ox) * plen..][..plen];
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let s = (iy as usize * w + ix as usize) * c;
                            row[(ky * k + kx) * c..][..c].copy_from_slice(&src[s..s + c]);
                        }
                    }
                }
            }
        });
        col
    }

    fn col2im(&self, dcol: &[f32], in_shape: &[usize], oh: usize, ow: usize) -> Tensor {
        let [b, h, w, c] = [in_shape[0], in_shape[1], in_shape[2], in_shape[3]];
        let k = self.kernel;
        let plen = self.patch_len();
        let mut dx = Tensor::zeros(&[b, h, w, c]);
        par::for_each_chunk_mut(dx.data_mut(), h * w * c, |bi, dst| {
            let src = &dcol[bi * oh * ow * plen..][..oh * ow * plen];
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &src[(oy * ow + ox) * plen..][..plen];
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let d = &mut dst[(iy as usize * w + ix as usize) * c..][..c];
                            for (a, g) in d.iter_mut().zip(&row[(ky * k + kx) * c..][..c]) {
                                *a += g;
                            }
                        }
                    }
                }
            }
        });
        dx
    }

    fn forward(
        &self,
        params: &ParamStore,
        x: Tensor,
        mode: Mode,
    ) -> Result<(Tensor, Option<Cache>)> {
        let out_shape = self.output_shape(x.shape())?;
        let (oh, ow) = (out_shape[1], out_shape[2]);
        let rows = x.batch() * oh * ow;
        let in_shape = x.shape().to_vec();
        let a = if self.is_pointwise() {
            x.into_data()
        } else {
            self.im2col(&x, oh, ow)
        };
        let w = params.get(&self.weight_name())?;
        let mut out = vec![0.0f32; rows * self.out_channels];
        sgemm(
            rows,
            self.patch_len(),
            self.out_channels,
            &a,
            Op::Normal,
            w.data(),
            Op::Normal,
            0.0,
            &mut out,
        );
        let cache = (mode == Mode::Train).then_some(Cache::Conv { a, in_shape });
        Ok((Tensor::from_vec(&out_shape, out)?, cache))
    }

    fn backward(
        &self,
        params: &ParamStore,
        cache: Cache,
        dy: Tensor,
        grads: &mut ParamStore,
        need_dx: bool,
    ) -> Result<Option<Tensor>> {
        let Cache::Conv { a, in_shape } = cache else {
            return Err(Error::NoForwardState);
        };
        let (oh, ow) = (dy.shape()[1], dy.shape()[2]);
        let rows = in_shape[0] * oh * ow;
        let plen = self.patch_len();
        let cout = self.out_channels;
        let gw = grads.get_mut(&self.weight_name())?;
        sgemm(
            plen,
            rows,
            cout,
            &a,
            Op::Transposed,
            dy.data(),
            Op::Normal,
            1.0,
            gw.data_mut(),
        );
        if !need_dx {
            return Ok(None);
        }
        let w = params.get(&self.weight_name())?;
        let mut da = vec![0.0f32; rows * plen];
        sgemm(
            rows,
            cout,
            plen,
            dy.data(),
            Op::Normal,
            w.data(),
            Op::Transposed,
            0.0,
            &mut da,
        );
        if self.is_pointwise() {
            return Ok(Some(Tensor::from_vec(&in_shape, da)?));
        }
        Ok(Some(self.col2im(&da, &in_shape, oh, ow)))
    }
}

impl DepthwiseConv2d {
    pub fn new(
        name: impl Into<String>,
        kernel: usize,
        stride: usize,
        pad: usize,
        channels: usize,
    ) -> Self {
        Self {
            name: name.into(),
            kernel,
            stride,
            pad,
            channels,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn output_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        expect_nhwc(s, self.channels, &self.name)?;
        Ok(vec![
            s[0],
            conv_out(s[1], self.kernel, self.stride, self.pad)?,
            conv_out(s[2], self.kernel, self.stride, self.pad)?,
            self.channels,
        ])
    }

    fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let mut rng = layer_rng(seed, &self.name);
        let std = (2.0 / (self.kernel * self.kernel) as f32).sqrt();
        store.insert(
            self.weight_name(),
            EntryKind::Trainable,
            normal_tensor(&[self.kernel, self.kernel, self.channels], std, &mut rng),
        )
    }

    /// Calls `f(out_offset, in_offset, tap)` for every valid kernel tap.
    fn for_each_tap(
        &self,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
        mut f: impl FnMut(usize, usize, usize),
    ) {
        let (k, c) = (self.kernel, self.channels);
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        f(
                            (oy * ow + ox) * c,
                            (iy as usize * w + ix as usize) * c,
                            (ky * k + kx) * c,
                        );
                    }
                }
            }
        }
    }

    fn forward(
        &self,
        params: &ParamStore,
        x: Tensor,
        mode: Mode,
    ) -> Result<(Tensor, Option<Cache>)> {
        let out_shape = self.output_shape(x.shape())?;
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let (oh, ow) = (out_shape[1], out_shape[2]);
        let c = self.channels;
        let weight = params.get(&self.weight_name())?.data();
        let mut out = Tensor::zeros(&out_shape);
        par::for_each_chunk_mut(out.data_mut(), oh * ow * c, |b, dst| {
            let src = x.item(b);
            self.for_each_tap(h, w, oh, ow, |o, i, t| {
                let (d, s, k) = (&mut dst[o..o + c], &src[i..i + c], &weight[t..t + c]);
                for ((d, s), k) in d.iter_mut().zip(s).zip(k) {
                    *d += s * k;
                }
            });
        });
        let cache = (mode == Mode::Train).then_some(Cache::Depthwise { input: x });
        Ok((out, cache))
    }

    fn backward(
        &self,
        params: &ParamStore,
        cache: Cache,
        dy: Tensor,
        grads: &mut ParamStore,
        need_dx: bool,
    ) -> Result<Option<Tensor>> {
        let Cache::Depthwise { input } = cache else {
            return Err(Error::NoForwardState);
        };
        let (h, w) = (input.shape()[1], input.shape()[2]);
        let (oh, ow) = (dy.shape()[1], dy.shape()[2]);
        let c = self.channels;
        let klen = self.kernel * self.kernel * c;
        let weight = params.get(&self.weight_name())?.data();
        let partial: Vec<(Vec<f32>, Option<Vec<f32>>)> = par::map_range(input.batch(), |b| {
            let src = input.item(b);
            let g = dy.item(b);
            let mut dw = vec![0.0f32; klen];
            let mut dx = need_dx.then(|| vec![0.0f32; h * w * c]);
            self.for_each_tap(h, w, oh, ow, |o, i, t| {
                let go = &g[o..o + c];
                for ((acc, s), gv) in dw[t..t + c].iter_mut().zip(&src[i..i + c]).zip(go) {
                    *acc += s * gv;
                }
                if let Some(dx) = dx.as_mut() {
                    for ((acc, k), gv) in dx[i..i + c].iter_mut().zip(&weight[t..t + c]).zip(go) {
                        *acc += k * gv;
                    }
                }
            });
            (dw, dx)
        });
        let mut dx_all = need_dx.then(|| Vec::with_capacity(input.len()));
        let gw = grads.get_mut(&self.weight_name())?;
        for (dw, dx) in partial {
            for (a, b) in gw.data_mut().iter_mut().zip(&dw) {
                *a += b;
            }
            if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
                all.extend_from_slice(&dx);
            }
        }
        dx_all
            .map(|d| Tensor::from_vec(input.shape(), d))
            .transpose()
    }
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn param_names(&self) -> [String; 4] {
        [
            format!("{}.gamma", self.name),
            format!("{}.beta", self.name),
            format!("{}.running_mean", self.name),
            format!("{}.running_var", self.name),
        ]
    }

    fn init(&self, store: &mut ParamStore) -> Result<()> {
        let [g, b, m, v] = self.param_names();
        let c = self.channels;
        store.insert(g, EntryKind::Trainable, Tensor::filled(&[c], 1.0))?;
        store.insert(b, EntryKind::Trainable, Tensor::zeros(&[c]))?;
        store.insert(m, EntryKind::Statistic, Tensor::zeros(&[c]))?;
        store.insert(v, EntryKind::Statistic, Tensor::filled(&[c], 1.0))
    }

    /// Per-channel `(Σ a, Σ a·b)` over all rows, where `b` defaults to `a`.
    /// Partial sums are formed per leading-axis item and reduced in item
    /// order.
    fn channel_sums(&self, a: &Tensor, b: Option<&[f32]>) -> (Vec<f64>, Vec<f64>) {
        let c = self.channels;
        let item = a.item_len();
        let partial = par::map_range(a.batch(), |i| {
            let mut s0 = vec![0.0f64; c];
            let mut s1 = vec![0.0f64; c];
            let xa = a.item(i);
            let xb = b.map_or(xa, |b| &b[i * item..(i + 1) * item]);
            for (ra, rb) in xa.chunks_exact(c).zip(xb.chunks_exact(c)) {
                for (((s0, s1), &va), &vb) in s0.iter_mut().zip(s1.iter_mut()).zip(ra).zip(rb) {
                    *s0 += va as f64;
                    *s1 += va as f64 * vb as f64;
                }
            }
            (s0, s1)
        });
        let mut s0 = vec![0.0f64; c];
        let mut s1 = vec![0.0f64; c];
        for (a, q) in partial {
            for ch in 0..c {
                s0[ch] += a[ch];
                s1[ch] += q[ch];
            }
        }
        (s0, s1)
    }

    fn forward(
        &self,
        params: &ParamStore,
        mut x: Tensor,
        mode: Mode,
        stats: &mut StatUpdates,
    ) -> Result<(Tensor, Option<Cache>)> {
        let c = self.channels;
        if x.shape().last() != Some(&c) {
            return Err(Error::Shape {
                context: self.name.clone(),
                expected: vec![c],
                actual: x.shape().to_vec(),
            });
        }
        let [gn, bn, mn, vn] = self.param_names();
        let gamma = params.get(&gn)?.data().to_vec();
        let beta = params.get(&bn)?.data().to_vec();
        let rows = x.len() / c;
        match mode {
            Mode::Eval => {
                let mean = params.get(&mn)?.data();
                let var = params.get(&vn)?.data();
                let scale: Vec<f32> = (0..c)
                    .map(|i| gamma[i] / (var[i] + BN_EPS).sqrt())
                    .collect();
                let shift: Vec<f32> = (0..c).map(|i| beta[i] - mean[i] * scale[i]).collect();
                for row in x.data_mut().chunks_exact_mut(c) {
                    for ((v, s), t) in row.iter_mut().zip(&scale).zip(&shift) {
                        *v = *v * s + t;
                    }
                }
                Ok((x, None))
            }
            Mode::Train => {
                let (sum, sumsq) = self.channel_sums(&x, None);
                let n = rows as f64;
                let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
                let var: Vec<f64> = sumsq
                    .iter()
                    .zip(&mean)
                    .map(|(q, m)| (q / n - m * m).max(0.0))
                    .collect();
                let inv_std: Vec<f32> = var
                    .iter()
                    .map(|v| 1.0 / ((*v as f32) + BN_EPS).sqrt())
                    .collect();
                let mean32: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
                let mut xhat = vec![0.0f32; x.len()];
                for (xr, hr) in x
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(xhat.chunks_exact_mut(c))
                {
                    let it = xr
                        .iter_mut()
                        .zip(hr.iter_mut())
                        .zip(&mean32)
                        .zip(&inv_std)
                        .zip(&gamma)
                        .zip(&beta);
                    for (((((xv, hv), m), is), g), b) in it {
                        let h = (*xv - m) * is;
                        *hv = h;
                        *xv = g * h + b;
                    }
                }
                let running_mean = params.get(&mn)?.data();
                let running_var = params.get(&vn)?.data();
                let unbias = if rows > 1 { n / (n - 1.0) } else { 1.0 };
                stats.push((
                    mn,
                    (0..c)
                        .map(|i| (1.0 - BN_MOMENTUM) * running_mean[i] + BN_MOMENTUM * mean32[i])
                        .collect(),
                ));
                stats.push((
                    vn,
                    (0..c)
                        .map(|i| {
                            (1.0 - BN_MOMENTUM) * running_var[i]
                                + BN_MOMENTUM * (var[i] * unbias) as f32
                        })
                        .collect(),
                ));
                Ok((x, Some(Cache::BatchNorm { xhat, inv_std })))
            }
        }
    }

    fn backward(
        &self,
        params: &ParamStore,
        cache: Cache,
        mut dy: Tensor,
        grads: &mut ParamStore,
        need_dx: bool,
    ) -> Result<Option<Tensor>> {
        let Cache::BatchNorm { xhat, inv_std } = cache else {
            return Err(Error::NoForwardState);
        };
        let c = self.channels;
        let [gn, bn, _, _] = self.param_names();
        let (dbeta, dgamma) = self.channel_sums(&dy, Some(&xhat));
        let dg32: Vec<f32> = dgamma.iter().map(|&v| v as f32).collect();
        let db32: Vec<f32> = dbeta.iter().map(|&v| v as f32).collect();
        accumulate(grads, &gn, &dg32)?;
        accumulate(grads, &bn, &db32)?;
        if !need_dx {
            return Ok(None);
        }
        let gamma = params.get(&gn)?.data();
        let n = (dy.len() / c) as f32;
        let mean_db: Vec<f32> = db32.iter().map(|v| v / n).collect();
        let mean_dg: Vec<f32> = dg32.iter().map(|v| v / n).collect();
        let k: Vec<f32> = (0..c).map(|i| gamma[i] * inv_std[i]).collect();
        for (gr, hr) in dy.data_mut().chunks_exact_mut(c).zip(xhat.chunks_exact(c)) {
            for ((((g, h), k), mb), mg) in gr.iter_mut().zip(hr).zip(&k).zip(&mean_db).zip(&mean_dg)
            {
                *g = k * (*g - mb - h * mg);
            }
        }
        Ok(Some(dy))
    }
}

impl Activation {
    fn forward(self, mut x: Tensor, mode: Mode) -> (Tensor, Option<Cache>) {
        let cap = match self {
            Activation::Relu => f32::INFINITY,
            Activation::Relu6 => 6.0,
        };
        #[cfg(test)]
        if let Some(frozen) = frozen::apply(&mut x, cap) {
            let cache = (mode == Mode::Train).then_some(Cache::Act { mask: frozen });
            return (x, cache);
        }
        let cache = (mode == Mode::Train).then(|| Cache::Act {
            mask: x
                .data()
                .iter()
                .map(|&v| (v > 0.0 && v < cap) as u8)
                .collect(),
        });
        for v in x.data_mut() {
            *v = v.clamp(0.0, cap);
        }
        (x, cache)
    }

    fn backward(self, cache: Cache, mut dy: Tensor) -> Result<Tensor> {
        let Cache::Act { mask } = cache else {
            return Err(Error::NoForwardState);
        };
        for (g, &m) in dy.data_mut().iter_mut().zip(&mask) {
            if m == 0 {
                *g = 0.0;
            }
        }
        Ok(dy)
    }
}

impl Linear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Self {
            name: name.into(),
            in_features,
            out_features,
        }
    }

    pub fn param_names(&self) -> [String; 2] {
        [
            format!("{}.weight", self.name),
            format!("{}.bias", self.name),
        ]
    }

    fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let mut rng = layer_rng(seed, &self.name);
        let [w, b] = self.param_names();
        let std = (1.0 / self.in_features as f32).sqrt();
        store.insert(
            w,
            EntryKind::Trainable,
            normal_tensor(&[self.in_features, self.out_features], std, &mut rng),
        )?;
        store.insert(b, EntryKind::Trainable, Tensor::zeros(&[self.out_features]))
    }

    pub fn output_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        let item: usize = s.iter().skip(1).product();
        if s.is_empty() || item != self.in_features {
            return Err(Error::Shape {
                context: self.name.clone(),
                expected: vec![s.first().copied().unwrap_or(0), self.in_features],
                actual: s.to_vec(),
            });
        }
        Ok(vec![s[0], self.out_features])
    }

    fn forward(
        &self,
        params: &ParamStore,
        x: Tensor,
        mode: Mode,
    ) -> Result<(Tensor, Option<Cache>)> {
        let out_shape = self.output_shape(x.shape())?;
        let [wn, bn] = self.param_names();
        let (w, b) = (params.get(&wn)?, params.get(&bn)?);
        let batch = x.batch();
        let mut out = Vec::with_capacity(batch * self.out_features);
        for _ in 0..batch {
            out.extend_from_slice(b.data());
        }
        sgemm(
            batch,
            self.in_features,
            self.out_features,
            x.data(),
            Op::Normal,
            w.data(),
            Op::Normal,
            1.0,
            &mut out,
        );
        let cache = (mode == Mode::Train).then_some(Cache::Linear { input: x });
        Ok((Tensor::from_vec(&out_shape, out)?, cache))
    }

    fn backward(
        &self,
        params: &ParamStore,
        cache: Cache,
        dy: Tensor,
        grads: &mut ParamStore,
        need_dx: bool,
    ) -> Result<Option<Tensor>> {
        let Cache::Linear { input } = cache else {
            return Err(Error::NoForwardState);
        };
        let [wn, bn] = self.param_names();
        let batch = input.batch();
        let (fi, fo) = (self.in_features, self.out_features);
        sgemm(
            fi,
            batch,
            fo,
            input.data(),
            Op::Transposed,
            dy.data(),
            Op::Normal,
            1.0,
            grads.get_mut(&wn)?.data_mut(),
        );
        let mut db = vec![0.0f32; fo];
        for row in dy.data().chunks_exact(fo) {
            for (a, g) in db.iter_mut().zip(row) {
                *a += g;
            }
        }
        accumulate(grads, &bn, &db)?;
        if !need_dx {
            return Ok(None);
        }
        let mut dx = vec![0.0f32; batch * fi];
        sgemm(
            batch,
            fo,
            fi,
            dy.data(),
            Op::Normal,
            params.get(&wn)?.data(),
            Op::Transposed,
            0.0,
            &mut dx,
        );
        Ok(Some(Tensor::from_vec(input.shape(), dx)?))
    }
}

impl Block {
    pub fn new(name: impl Into<String>, layers: Vec<Layer>, residual: bool) -> Self {
        Self {
            name: name.into(),
            layers,
            residual,
        }
    }
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv(l) => &l.name,
            Layer::Depthwise(l) => &l.name,
            Layer::BatchNorm(l) => &l.name,
            Layer::Act(Activation::Relu) => "relu",
            Layer::Act(Activation::Relu6) => "relu6",
            Layer::Linear(l) => &l.name,
            Layer::Block(b) => &b.name,
        }
    }

    pub fn output_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv(l) => l.output_shape(s),
            Layer::Depthwise(l) => l.output_shape(s),
            Layer::BatchNorm(l) => {
                if s.last() != Some(&l.channels) {
                    return Err(Error::Shape {
                        context: l.name.clone(),
                        expected: vec![l.channels],
                        actual: s.to_vec(),
                    });
                }
                Ok(s.to_vec())
            }
            Layer::Act(_) => Ok(s.to_vec()),
            Layer::Linear(l) => l.output_shape(s),
            Layer::Block(b) => {
                let mut shape = s.to_vec();
                for l in &b.layers {
                    shape = l.output_shape(&shape)?;
                }
                if b.residual && shape != s {
                    return Err(Error::Shape {
                        context: format!("{} (residual)", b.name),
                        expected: s.to_vec(),
                        actual: shape,
                    });
                }
                Ok(shape)
            }
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        match self {
            Layer::Conv(l) => l.init(store, seed),
            Layer::Depthwise(l) => l.init(store, seed),
            Layer::BatchNorm(l) => l.init(store),
            Layer::Act(_) => Ok(()),
            Layer::Linear(l) => l.init(store, seed),
            Layer::Block(b) => b.layers.iter().try_for_each(|l| l.init(store, seed)),
        }
    }

    /// Runs the layer. In [`Mode::Train`] the returned cache is `Some`.
    pub fn forward(
        &self,
        params: &ParamStore,
        x: Tensor,
        mode: Mode,
        stats: &mut StatUpdates,
    ) -> Result<(Tensor, Option<Cache>)> {
        let (y, cache) = match self {
            Layer::Conv(l) => l.forward(params, x, mode)?,
            Layer::Depthwise(l) => l.forward(params, x, mode)?,
            Layer::BatchNorm(l) => l.forward(params, x, mode, stats)?,
            Layer::Act(a) => a.forward(x, mode),
            Layer::Linear(l) => l.forward(params, x, mode)?,
            Layer::Block(b) => {
                let skip = b.residual.then(|| x.clone());
                let mut caches = Vec::with_capacity(b.layers.len());
                let mut h = x;
                for l in &b.layers {
                    let (y, c) = l.forward(params, h, mode, stats)?;
                    h = y;
                    caches.extend(c);
                }
                if let Some(skip) = skip {
                    h.add_assign(&skip);
                }
                (h, (mode == Mode::Train).then_some(Cache::Block(caches)))
            }
        };
        if !matches!(self, Layer::Block(_)) && !y.all_finite() {
            return Err(Error::NonFinite {
                layer: self.name().to_string(),
            });
        }
        Ok((y, cache))
    }

    /// Backpropagates `dy`; returns `∂L/∂input` when `need_dx`.
    pub fn backward(
        &self,
        params: &ParamStore,
        cache: Cache,
        dy: Tensor,
        grads: &mut ParamStore,
        need_dx: bool,
    ) -> Result<Option<Tensor>> {
        match self {
            Layer::Conv(l) => l.backward(params, cache, dy, grads, need_dx),
            Layer::Depthwise(l) => l.backward(params, cache, dy, grads, need_dx),
            Layer::BatchNorm(l) => l.backward(params, cache, dy, grads, need_dx),
            Layer::Act(a) => a.backward(cache, dy).map(Some),
            Layer::Linear(l) => l.backward(params, cache, dy, grads, need_dx),
            Layer::Block(b) => {
                let Cache::Block(caches) = cache else {
                    return Err(Error::NoForwardState);
                };
                if caches.len() != b.layers.len() {
                    return Err(Error::NoForwardState);
                }
                let skip = (b.residual && need_dx).then(|| dy.clone());
                let mut g = dy;
                let last = b.layers.len();
                for (i, (l, c)) in b.layers.iter().zip(caches).enumerate().rev() {
                    // The block's first layer only needs an input gradient if
                    // the caller asked for one.
                    let want = i > 0 || need_dx;
                    match l.backward(params, c, g, grads, want)? {
                        Some(next) => g = next,
                        None => {
                            debug_assert!(i == 0 && i < last);
                            return Ok(None);
                        }
                    }
                }
                if let Some(skip) = skip {
                    g.add_assign(&skip);
                }
                Ok(Some(g))
            }
        }
    }

    /// Immediate sub-layers of a block; empty for primitives.
    pub fn children(&self) -> &[Layer] {
        match self {
            Layer::Block(b) => &b.layers,
            _ => &[],
        }
    }
}

/// Runs layers in sequence, collecting caches in train mode.
pub fn forward_seq(
    layers: &[Layer],
    params: &ParamStore,
    x: Tensor,
    mode: Mode,
    stats: &mut StatUpdates,
) -> Result<(Tensor, Vec<Cache>)> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut h = x;
    for l in layers {
        let (y, c) = l.forward(params, h, mode, stats)?;
        h = y;
        caches.extend(c);
    }
    Ok((h, caches))
}

/// Backward counterpart of [`forward_seq`].
pub fn backward_seq(
    layers: &[Layer],
    params: &ParamStore,
    caches: Vec<Cache>,
    dy: Tensor,
    grads: &mut ParamStore,
    need_dx: bool,
) -> Result<Option<Tensor>> {
    if caches.len() != layers.len() {
        return Err(Error::NoForwardState);
    }
    let mut g = dy;
    for (i, (l, c)) in layers.iter().zip(caches).enumerate().rev() {
        match l.backward(params, c, g, grads, i > 0 || need_dx)? {
            Some(next) => g = next,
            None => return Ok(None),
        }
    }
    Ok(Some(g))
}

/// Test hook that records the piecewise-linear pattern of every activation
/// and replays it, so the network can be evaluated as the smooth function it
/// equals near the recording point.
#[cfg(test)]
pub(crate) mod frozen {
    use std::cell::RefCell;
    use std::collections::VecDeque;

    use super::Tensor;

    /// Per element: 0 clamps to zero, 1 passes through, 2 clamps to the cap.
    enum State {
        Record(Vec<Vec<u8>>),
        Replay(VecDeque<Vec<u8>>),
    }

    thread_local! {
        static STATE: RefCell<Option<State>> = const { RefCell::new(None) };
    }

    pub(crate) fn record<R>(f: impl FnOnce() -> R) -> (R, Vec<Vec<u8>>) {
        STATE.with(|s| *s.borrow_mut() = Some(State::Record(Vec::new())));
        let r = f();
        match STATE.with(|s| s.borrow_mut().take()) {
            Some(State::Record(p)) => (r, p),
            _ => unreachable!("recording state replaced"),
        }
    }

    pub(crate) fn replay<R>(patterns: &[Vec<u8>], f: impl FnOnce() -> R) -> R {
        STATE.with(|s| *s.borrow_mut() = Some(State::Replay(patterns.iter().cloned().collect())));
        let r = f();
        STATE.with(|s| s.borrow_mut().take());
        r
    }

    /// Applies or records a pattern; returns the pass-through mask when a
    /// hook is active.
    pub(super) fn apply(x: &mut Tensor, cap: f32) -> Option<Vec<u8>> {
        STATE.with(|s| {
            let mut state = s.borrow_mut();
            let pattern = match state.as_mut()? {
                State::Record(out) => {
                    let p: Vec<u8> = x
                        .data()
                        .iter()
                        .map(|&v| {
                            if v <= 0.0 {
                                0
                            } else if v >= cap {
                                2
                            } else {
                                1
                            }
                        })
                        .collect();
                    out.push(p.clone());
                    p
                }
                State::Replay(queue) => queue.pop_front().expect("pattern for every activation"),
            };
            for (v, &p) in x.data_mut().iter_mut().zip(&pattern) {
                match p {
                    0 => *v = 0.0,
                    2 => *v = cap,
                    _ => {}
                }
            }
            Some(pattern.iter().map(|&p| (p == 1) as u8).collect())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap()
    }

    fn objective(layer: &Layer, p: &ParamStore, x: &Tensor, r: &Tensor) -> f64 {
        let (y, _) = layer
            .forward(p, x.clone(), Mode::Train, &mut StatUpdates::new())
            .unwrap();
        y.data()
            .iter()
            .zip(r.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let d = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let s = a
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        d / s.max(1e-12)
    }

    /// Central differences against analytic gradients for every trainable
    /// parameter and for the input.
    fn check(layer: Layer, in_shape: &[usize]) {
        let mut p = ParamStore::new();
        layer.init(&mut p, 1).unwrap();
        for (_, e) in p.iter_mut() {
            let mut rng = ChaCha8Rng::seed_from_u64(e.tensor.len() as u64);
            if e.kind == EntryKind::Trainable {
                e.tensor
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v += rng.random_range(-0.3f32..0.3));
            }
        }
        let x = random(in_shape, 2);
        let out_shape = layer.output_shape(in_shape).unwrap();
        let r = random(&out_shape, 3);
        let (_, cache) = layer
            .forward(&p, x.clone(), Mode::Train, &mut StatUpdates::new())
            .unwrap();
        let mut g = p.zeros_like();
        let dx = layer
            .backward(&p, cache.unwrap(), r.clone(), &mut g, true)
            .unwrap()
            .unwrap();
        let h = 1e-2f32;
        let names: Vec<String> = p
            .iter()
            .filter(|(_, e)| e.kind == EntryKind::Trainable)
            .map(|(n, _)| n.to_string())
            .collect();
        for name in names {
            let n = p.get(&name).unwrap().len();
            let (mut num, mut ana) = (Vec::new(), Vec::new());
            for i in (0..n).step_by((n / 12).max(1)) {
                let mut q = p.clone();
                q.get_mut(&name).unwrap().data_mut()[i] += h;
                let up = objective(&layer, &q, &x, &r);
                q.get_mut(&name).unwrap().data_mut()[i] -= 2.0 * h;
                let down = objective(&layer, &q, &x, &r);
                num.push((up - down) / (2.0 * h as f64));
                ana.push(g.get(&name).unwrap().data()[i] as f64);
            }
            assert!(rel(&num, &ana) < 1e-3, "{name}: {num:?} vs {ana:?}");
        }
        let (mut num, mut ana) = (Vec::new(), Vec::new());
        for i in (0..x.len()).step_by((x.len() / 16).max(1)) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let up = objective(&layer, &p, &xp, &r);
            xp.data_mut()[i] -= 2.0 * h;
            let down = objective(&layer, &p, &xp, &r);
            num.push((up - down) / (2.0 * h as f64));
            ana.push(dx.data()[i] as f64);
        }
        assert!(rel(&num, &ana) < 1e-3, "input: {num:?} vs {ana:?}");
    }

    #[test]
    fn conv_gradients() {
        check(Layer::Conv(Conv2d::new("c", 3, 2, 1, 3, 4)), &[2, 7, 6, 3]);
        check(Layer::Conv(Conv2d::new("c", 1, 1, 0, 3, 4)), &[2, 5, 5, 3]);
        check(Layer::Conv(Conv2d::new("c", 5, 1, 0, 2, 3)), &[2, 5, 5, 2]);
    }

    #[test]
    fn depthwise_gradients() {
        check(
            Layer::Depthwise(DepthwiseConv2d::new("d", 3, 1, 1, 5)),
            &[2, 6, 6, 5],
        );
        check(
            Layer::Depthwise(DepthwiseConv2d::new("d", 3, 2, 1, 3)),
            &[2, 7, 7, 3],
        );
    }

    #[test]
    fn batchnorm_gradients() {
        check(Layer::BatchNorm(BatchNorm::new("b", 4)), &[3, 4, 4, 4]);
    }

    #[test]
    fn linear_gradients() {
        check(Layer::Linear(Linear::new("l", 12, 5)), &[3, 2, 2, 3]);
    }

    #[test]
    fn residual_block_gradients() {
        let layers = vec![
            Layer::Conv(Conv2d::new("b.expand", 1, 1, 0, 4, 8)),
            Layer::Depthwise(DepthwiseConv2d::new("b.dw", 3, 1, 1, 8)),
            Layer::Conv(Conv2d::new("b.project", 1, 1, 0, 8, 4)),
        ];
        check(Layer::Block(Block::new("b", layers, true)), &[2, 5, 5, 4]);
    }

    #[test]
    fn activation_clamps() {
        let x = Tensor::from_vec(&[1, 4], vec![-1.0, 0.5, 5.0, 7.0]).unwrap();
        let (y, c) = Activation::Relu6.forward(x.clone(), Mode::Train);
        assert_eq!(y.data(), &[0.0, 0.5, 5.0, 6.0]);
        let g = Activation::Relu6
            .backward(c.unwrap(), Tensor::filled(&[1, 4], 1.0))
            .unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 1.0, 0.0]);
        let (y, _) = Activation::Relu.forward(x, Mode::Eval);
        assert_eq!(y.data(), &[0.0, 0.5, 5.0, 7.0]);
    }

    #[test]
    fn batchnorm_eval_uses_running_statistics() {
        let bn = BatchNorm::new("b", 2);
        let mut p = ParamStore::new();
        bn.init(&mut p).unwrap();
        p.get_mut("b.running_mean")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[1.0, -1.0]);
        p.get_mut("b.running_var")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[4.0, 1.0]);
        let x = Tensor::from_vec(&[1, 2], vec![3.0, 0.0]).unwrap();
        let (y, c) = bn
            .forward(&p, x, Mode::Eval, &mut StatUpdates::new())
            .unwrap();
        assert!(c.is_none());
        assert!((y.data()[0] - 2.0 / (4.0f32 + BN_EPS).sqrt()).abs() < 1e-6);
        assert!((y.data()[1] - 1.0 / (1.0f32 + BN_EPS).sqrt()).abs() < 1e-6);
    }
}
