//! Small residual CNN backbones that expose logits and an attention map.
//!
//! Two attention styles are supported. `at-small-resnet` takes the channel
//! mean of the squared stage-4 feature map. `abn-small-resnet` grows an
//! attention branch on the stage-3 features; its sigmoid map multiplies the
//! features before stage 4 (no residual passthrough) and the branch emits
//! auxiliary class scores of its own.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{CpuStorage, CustomOp2, CustomOp3, DType, Device, Layout, Shape, Tensor, Var, D};
use ktg_core::Arch;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output channels of the four residual stages.
    pub widths: [usize; 4],
    /// Stride of the first convolution of each stage.
    pub strides: [usize; 4],
    /// Crop sizes for attention losses; the architecture default when unset.
    pub crop_sizes: Option<Vec<usize>>,
    /// Weight of the attention-branch cross-entropy inside the hard loss.
    pub aux_weight: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 128],
            strides: [1, 2, 2, 1],
            crop_sizes: None,
            aux_weight: 1.0,
        }
    }
}

impl BackboneConfig {
    /// About 24k parameters per network; fast enough for CPU trend experiments.
    pub fn tiny() -> Self {
        Self {
            widths: [8, 16, 16, 32],
            strides: [1, 2, 1, 1],
            ..Self::default()
        }
    }

    pub fn default_crop_sizes(arch: Arch) -> &'static [usize] {
        match arch {
            Arch::AtSmallResnet => &[3, 5],
            Arch::AbnSmallResnet => &[3, 7, 11],
        }
    }
}

/// Everything needed to rebuild a node's network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub num_classes: usize,
    pub input: (usize, usize, usize),
    pub backbone: BackboneConfig,
}

fn conv_out(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

impl ModelSpec {
    /// Side lengths of the attention map.
    pub fn attention_hw(&self) -> (usize, usize) {
        let stages = match self.arch {
            Arch::AtSmallResnet => 4,
            Arch::AbnSmallResnet => 3,
        };
        let (_, mut h, mut w) = self.input;
        for &s in &self.backbone.strides[..stages] {
            h = conv_out(h, s);
            w = conv_out(w, s);
        }
        (h, w)
    }

    /// Configured crop sizes, or the architecture defaults shrunk to fit the
    /// attention map.
    pub fn crop_sizes(&self) -> Vec<usize> {
        let (h, w) = self.attention_hw();
        match &self.backbone.crop_sizes {
            Some(s) => s.clone(),
            None => fit_crop_sizes(BackboneConfig::default_crop_sizes(self.arch), h.min(w)),
        }
    }
}

/// Rescales crop sizes proportionally so the largest fits in `side`,
/// rounding each to the nearest odd size (lower on ties) and dropping
/// duplicates.
pub fn fit_crop_sizes(sizes: &[usize], side: usize) -> Vec<usize> {
    let largest = sizes.iter().copied().max().unwrap_or(0);
    if largest <= side {
        return sizes.to_vec();
    }
    let max_odd = if side % 2 == 1 { side } else { side.saturating_sub(1) }.max(1);
    let factor = side as f64 / largest as f64;
    let mut out: Vec<usize> = Vec::new();
    for &k in sizes {
        let x = k as f64 * factor;
        let below = ((x - 1.0) / 2.0).floor() * 2.0 + 1.0;
        let above = below + 2.0;
        let odd = if x - below <= above - x { below } else { above };
        let odd = (odd.max(1.0) as usize).min(max_odd);
        if !out.contains(&odd) {
            out.push(odd);
        }
    }
    out
}

/// Trainable parameters and running statistics, by name.
#[derive(Default)]
struct Store {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

struct Init<'a> {
    store: &'a mut Store,
    rng: ChaCha8Rng,
    device: Device,
}

impl Init<'_> {
    fn param(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let v = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let t = v.as_tensor().clone();
        self.store.params.insert(name.to_string(), v);
        Ok(t)
    }

    fn buffer(&mut self, name: &str, len: usize, value: f32) -> Result<Var> {
        let v = Var::from_tensor(&Tensor::full(value, len, &self.device)?)?;
        self.store.buffers.insert(name.to_string(), v.clone());
        Ok(v)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Conv> {
        let fan_in = (cin * k * k) as f32;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let data = (0..cout * cin * k * k).map(|_| normal.sample(&mut self.rng)).collect();
        Ok(Conv {
            weight: self.param(&format!("{name}.weight"), &[cout, cin, k, k], data)?,
            stride,
            padding: k / 2,
        })
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: self.param(&format!("{name}.weight"), &[c], vec![1.0; c])?,
            beta: self.param(&format!("{name}.bias"), &[c], vec![0.0; c])?,
            running_mean: self.buffer(&format!("{name}.running_mean"), c, 0.0)?,
            running_var: self.buffer(&format!("{name}.running_var"), c, 1.0)?,
        })
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize) -> Result<Linear> {
        let bound = 1.0 / (cin as f32).sqrt();
        let u = Uniform::new_inclusive(-bound, bound);
        let w = (0..cout * cin).map(|_| u.sample(&mut self.rng)).collect();
        let b = (0..cout).map(|_| u.sample(&mut self.rng)).collect();
        Ok(Linear {
            weight: self.param(&format!("{name}.weight"), &[cout, cin], w)?,
            bias: self.param(&format!("{name}.bias"), &[cout], b)?,
        })
    }
}

/// Geometry of a zero-padded, bias-free 2-D convolution.
///
/// Implemented as im2col plus hand-blocked products: per image, the patch
/// matrix is `(C*k*k, Ho*Wo)`, so every inner loop runs over contiguous
/// pixels. This is several times faster than the stock CPU conv backward on
/// the narrow layers used here.
#[derive(Clone, Copy, Debug)]
struct ConvOp {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

#[inline(always)]
fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline(always)]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 16];
    let (ca, cb) = (a.chunks_exact(16), b.chunks_exact(16));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..16 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

impl ConvOp {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Calls `f(patch_start, pixel_start, len)` for every run of in-bounds
    /// taps of one image. Patch indices address a `(C*k*k, Ho*Wo)` matrix and
    /// pixel indices the image's own `(C,H,W)` block; within a run both
    /// advance by one patch column and `stride` pixels per tap.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_hw();
        let (s, p) = (self.stride, self.pad);
        for ci in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = ((ci * self.k + ki) * self.k + kj) * ho * wo;
                    let plane = ci * self.h * self.w;
                    // valid ox: 0 <= ox*s + kj - p < w
                    let lo = p.saturating_sub(kj).div_ceil(s);
                    let hi = ((self.w + p - kj).div_ceil(s)).min(wo);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..ho {
                        let y = oy * s + ki;
                        if y < p || y - p >= self.h {
                            continue;
                        }
                        let src = plane + (y - p) * self.w + lo * s + kj - p;
                        f(row + oy * wo + lo, src, hi - lo);
                    }
                }
            }
        }
    }

    fn im2col(&self, image: &[f32], cols: &mut [f32]) {
        cols.iter_mut().for_each(|v| *v = 0.0);
        let s = self.stride;
        self.for_each_run(|dst, src, len| {
            if s == 1 {
                cols[dst..dst + len].copy_from_slice(&image[src..src + len]);
            } else {
                for (j, c) in cols[dst..dst + len].iter_mut().enumerate() {
                    *c = image[src + j * s];
                }
            }
        });
    }

    fn col2im_add(&self, cols: &[f32], image: &mut [f32]) {
        let s = self.stride;
        self.for_each_run(|dst, src, len| {
            for (j, c) in cols[dst..dst + len].iter().enumerate() {
                image[src + j * s] += c;
            }
        });
    }
}

fn contiguous_f32<'a>(storage: &'a CpuStorage, layout: &Layout) -> candle_core::Result<&'a [f32]> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("conv2d needs contiguous inputs".into()))?;
    match storage {
        CpuStorage::F32(v) => Ok(&v[start..end]),
        _ => Err(candle_core::Error::Msg("conv2d supports f32 only".into())),
    }
}

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        "ktg-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (x, w) = (contiguous_f32(s1, l1)?, contiguous_f32(s2, l2)?);
        let (ho, wo) = self.out_hw();
        let (hw, rows, img) = (ho * wo, self.rows(), self.c * self.h * self.w);
        let mut cols = vec![0f32; rows * hw];
        let mut out = vec![0f32; self.n * self.o * hw];
        for b in 0..self.n {
            self.im2col(&x[b * img..(b + 1) * img], &mut cols);
            for oi in 0..self.o {
                let y = &mut out[(b * self.o + oi) * hw..(b * self.o + oi + 1) * hw];
                for r in 0..rows {
                    axpy(w[oi * rows + r], &cols[r * hw..(r + 1) * hw], y);
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((self.n, self.o, ho, wo))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let xs = x.flatten_all()?.to_vec1::<f32>()?;
        let ws = w.flatten_all()?.to_vec1::<f32>()?;
        let g = grad.flatten_all()?.to_vec1::<f32>()?;
        let (ho, wo) = self.out_hw();
        let (hw, rows, img) = (ho * wo, self.rows(), self.c * self.h * self.w);
        let mut cols = vec![0f32; rows * hw];
        let mut dcols = vec![0f32; rows * hw];
        let mut dw = vec![0f32; self.o * rows];
        let mut dx = vec![0f32; self.n * img];
        for b in 0..self.n {
            self.im2col(&xs[b * img..(b + 1) * img], &mut cols);
            dcols.iter_mut().for_each(|v| *v = 0.0);
            for oi in 0..self.o {
                let gy = &g[(b * self.o + oi) * hw..(b * self.o + oi + 1) * hw];
                for r in 0..rows {
                    dw[oi * rows + r] += dot(gy, &cols[r * hw..(r + 1) * hw]);
                    axpy(ws[oi * rows + r], gy, &mut dcols[r * hw..(r + 1) * hw]);
                }
            }
            self.col2im_add(&dcols, &mut dx[b * img..(b + 1) * img]);
        }
        let dev = x.device();
        Ok((
            Some(Tensor::from_vec(dx, x.shape(), dev)?),
            Some(Tensor::from_vec(dw, w.shape(), dev)?),
        ))
    }
}

/// Zero-padded 2-D convolution without bias, `(N,C,H,W) * (O,C,k,k)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 || h + 2 * padding < k || w + 2 * padding < k || stride == 0 {
        return Err(Error::Core(ktg_core::Error::Contract(format!(
            "conv2d: input {:?}, kernel {:?}, stride {stride}, padding {padding}",
            x.dims(),
            weight.dims()
        ))));
    }
    let op = ConvOp {
        n,
        c,
        h,
        w,
        o,
        k,
        stride,
        pad: padding,
    };
    Ok(x.contiguous()?.apply_op2(&weight.contiguous()?, op)?)
}

struct Conv {
    weight: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, self.stride, self.padding)
    }
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics written by a training-mode [`BnOp`] forward pass.
type BatchStats = Arc<Mutex<Option<(Vec<f32>, Vec<f32>)>>>;

/// Fused batch normalization over `(N,C,...)` with a hand-derived backward.
/// In training mode it normalizes with the biased batch statistics and
/// reports them through `stats`; otherwise it uses `running`.
struct BnOp {
    running: Option<(Vec<f32>, Vec<f32>)>,
    stats: BatchStats,
}

impl BnOp {
    /// Per-channel `(mean, 1/sqrt(var+eps))` and the biased variance.
    fn moments(&self, x: &[f32], n: usize, c: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let inner = x.len() / (n * c);
        if let Some((mean, var)) = &self.running {
            let inv = var.iter().map(|v| (1.0 / (*v as f64 + BN_EPS).sqrt()) as f32).collect();
            return (mean.clone(), inv, var.clone());
        }
        let count = (n * inner) as f64;
        let (mut mean, mut var) = (vec![0f32; c], vec![0f32; c]);
        for ci in 0..c {
            let plane = |b: usize| &x[(b * c + ci) * inner..(b * c + ci + 1) * inner];
            let m = (0..n).map(|b| plane(b).iter().map(|&v| v as f64).sum::<f64>()).sum::<f64>() / count;
            let v = (0..n)
                .map(|b| plane(b).iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>())
                .sum::<f64>()
                / count;
            mean[ci] = m as f32;
            var[ci] = v as f32;
        }
        let inv = var.iter().map(|v| (1.0 / (*v as f64 + BN_EPS).sqrt()) as f32).collect();
        (mean, inv, var)
    }
}

impl CustomOp3 for BnOp {
    fn name(&self) -> &'static str {
        "ktg-batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = contiguous_f32(s1, l1)?;
        let (gamma, beta) = (contiguous_f32(s2, l2)?, contiguous_f32(s3, l3)?);
        let dims = l1.shape().dims();
        let (n, c) = (dims[0], dims[1]);
        let inner = x.len() / (n * c);
        let (mean, inv, var) = self.moments(x, n, c);
        let mut out = vec![0f32; x.len()];
        for b in 0..n {
            for ci in 0..c {
                let off = (b * c + ci) * inner;
                let (scale, m, sh) = (gamma[ci] * inv[ci], mean[ci], beta[ci]);
                for (o, &v) in out[off..off + inner].iter_mut().zip(&x[off..off + inner]) {
                    *o = (v - m) * scale + sh;
                }
            }
        }
        if self.running.is_none() {
            *self.stats.lock().expect("batch stats poisoned") = Some((mean, var));
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let xs = x.flatten_all()?.to_vec1::<f32>()?;
        let gs = gamma.to_vec1::<f32>()?;
        let dy = grad.flatten_all()?.to_vec1::<f32>()?;
        let (n, c) = (x.dim(0)?, x.dim(1)?);
        let inner = xs.len() / (n * c);
        let count = (n * inner) as f64;
        let (mean, inv, _) = self.moments(&xs, n, c);
        let (mut dgamma, mut dbeta) = (vec![0f32; c], vec![0f32; c]);
        let mut dx = vec![0f32; xs.len()];
        for ci in 0..c {
            let (mut sg, mut sb) = (0f64, 0f64);
            for b in 0..n {
                let off = (b * c + ci) * inner;
                for (&v, &g) in xs[off..off + inner].iter().zip(&dy[off..off + inner]) {
                    sb += g as f64;
                    sg += g as f64 * ((v - mean[ci]) * inv[ci]) as f64;
                }
            }
            dgamma[ci] = sg as f32;
            dbeta[ci] = sb as f32;
            let scale = gs[ci] * inv[ci];
            let (mb, mg) = if self.running.is_none() {
                ((sb / count) as f32, (sg / count) as f32)
            } else {
                (0.0, 0.0)
            };
            for b in 0..n {
                let off = (b * c + ci) * inner;
                for ((d, &v), &g) in dx[off..off + inner]
                    .iter_mut()
                    .zip(&xs[off..off + inner])
                    .zip(&dy[off..off + inner])
                {
                    let xhat = (v - mean[ci]) * inv[ci];
                    *d = scale * (g - mb - xhat * mg);
                }
            }
        }
        let dev = x.device();
        Ok((
            Some(Tensor::from_vec(dx, x.shape(), dev)?),
            Some(Tensor::from_vec(dgamma, c, dev)?),
            Some(Tensor::from_vec(dbeta, c, dev)?),
        ))
    }
}

struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let stats: BatchStats = Arc::default();
        let running = if train {
            None
        } else {
            Some((
                self.running_mean.as_tensor().to_vec1::<f32>()?,
                self.running_var.as_tensor().to_vec1::<f32>()?,
            ))
        };
        let op = BnOp {
            running,
            stats: stats.clone(),
        };
        let y = x.contiguous()?.apply_op3(&self.gamma, &self.beta, op)?;
        if let Some((mean, var)) = stats.lock().expect("batch stats poisoned").take() {
            let count = (x.elem_count() / x.dim(1)?) as f32;
            let unbiased = count / (count - 1.0).max(1.0);
            let m = BN_MOMENTUM as f32;
            let blend = |old: &Var, new: &[f32], k: f32| -> Result<()> {
                let old_v = old.as_tensor().to_vec1::<f32>()?;
                let v: Vec<f32> = old_v.iter().zip(new).map(|(o, b)| (1.0 - m) * o + m * k * b).collect();
                old.set(&Tensor::from_vec(v, old_v.len(), &Device::Cpu)?)?;
                Ok(())
            };
            blend(&self.running_mean, &mean, 1.0)?;
            blend(&self.running_var, &var, unbiased)?;
        }
        Ok(y)
    }
}

struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

struct ResBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    shortcut: Option<(Conv, BatchNorm)>,
}

impl ResBlock {
    fn new(init: &mut Init<'_>, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || cin != cout {
            Some((
                init.conv(&format!("{name}.down.conv"), cin, cout, 1, stride)?,
                init.bn(&format!("{name}.down.bn"), cout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: init.conv(&format!("{name}.conv1"), cin, cout, 3, stride)?,
            bn1: init.bn(&format!("{name}.bn1"), cout)?,
            conv2: init.conv(&format!("{name}.conv2"), cout, cout, 3, 1)?,
            bn2: init.bn(&format!("{name}.bn2"), cout)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, train)?;
        let skip = match &self.shortcut {
            Some((c, b)) => b.forward(&c.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

struct AttentionBranch {
    conv: Conv,
    bn: BatchNorm,
    to_classes: Conv,
    bn_classes: BatchNorm,
    aux: Conv,
    to_map: Conv,
    bn_map: BatchNorm,
}

impl AttentionBranch {
    fn new(init: &mut Init<'_>, c: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            conv: init.conv("att.conv", c, c, 3, 1)?,
            bn: init.bn("att.bn", c)?,
            to_classes: init.conv("att.classes", c, classes, 1, 1)?,
            bn_classes: init.bn("att.bn_classes", classes)?,
            aux: init.conv("att.aux", classes, classes, 1, 1)?,
            to_map: init.conv("att.map", classes, 1, 1, 1)?,
            bn_map: init.bn("att.bn_map", 1)?,
        })
    }

    /// Returns `(attention (N,1,H,W) in (0,1), aux logits (N,K))`.
    fn forward(&self, f: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let h = self.bn.forward(&self.conv.forward(f)?, train)?.relu()?;
        let k = self.bn_classes.forward(&self.to_classes.forward(&h)?, train)?.relu()?;
        let aux = self.aux.forward(&k)?.mean(D::Minus1)?.mean(D::Minus1)?;
        let a = self.bn_map.forward(&self.to_map.forward(&k)?, train)?;
        Ok((sigmoid(&a)?, aux))
    }
}

fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// AT-style attention: channel mean of squared activations, `(N,H,W)`.
pub fn channel_energy(features: &Tensor) -> Result<Tensor> {
    Ok(features.sqr()?.mean(1)?)
}

/// Multiplies features `(N,C,H,W)` by a single-channel map `(N,1,H,W)`.
pub fn apply_attention(features: &Tensor, attention: &Tensor) -> Result<Tensor> {
    Ok(features.broadcast_mul(attention)?)
}

pub struct ForwardOutput {
    pub logits: Tensor,
    /// `(N,H,W)`, nonnegative.
    pub attention: Tensor,
    pub aux_logits: Option<Tensor>,
}

pub struct Backbone {
    spec: ModelSpec,
    store: Store,
    stem: Conv,
    stem_bn: BatchNorm,
    stages: Vec<ResBlock>,
    branch: Option<AttentionBranch>,
    head: Linear,
}

impl Backbone {
    /// Builds a network whose initial weights depend only on `spec` and `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let (cin, h, w) = spec.input;
        if spec.num_classes < 2 || cin == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("invalid model spec {spec:?}")));
        }
        let mut store = Store::default();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
        };
        let widths = spec.backbone.widths;
        let strides = spec.backbone.strides;
        if widths.contains(&0) || strides.contains(&0) {
            return Err(Error::Config("backbone widths and strides must be positive".into()));
        }
        let stem = init.conv("stem.conv", cin, widths[0], 3, 1)?;
        let stem_bn = init.bn("stem.bn", widths[0])?;
        let mut stages = Vec::with_capacity(4);
        let mut c = widths[0];
        for i in 0..4 {
            stages.push(ResBlock::new(&mut init, &format!("stage{}", i + 1), c, widths[i], strides[i])?);
            c = widths[i];
        }
        let branch = match spec.arch {
            Arch::AbnSmallResnet => Some(AttentionBranch::new(&mut init, widths[2], spec.num_classes)?),
            Arch::AtSmallResnet => None,
        };
        let head = init.linear("fc", widths[3], spec.num_classes)?;
        let me = Self {
            spec,
            store,
            stem,
            stem_bn,
            stages,
            branch,
            head,
        };
        let (ah, aw) = me.spec.attention_hw();
        ktg_core::losses::check_crop_sizes(&me.spec.crop_sizes(), ah, aw)?;
        Ok(me)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<ForwardOutput> {
        let dims = x.dims();
        let (c, h, w) = self.spec.input;
        if dims.len() != 4 || dims[1..] != [c, h, w] {
            return Err(Error::Core(ktg_core::Error::Contract(format!(
                "expected input (N,{c},{h},{w}), got {dims:?}"
            ))));
        }
        let mut f = self.stem_bn.forward(&self.stem.forward(x)?, train)?.relu()?;
        for block in &self.stages[..3] {
            f = block.forward(&f, train)?;
        }
        let (f, attention, aux_logits) = match &self.branch {
            Some(branch) => {
                let (a, aux) = branch.forward(&f, train)?;
                let f = apply_attention(&f, &a)?;
                let f = self.stages[3].forward(&f, train)?;
                (f, a.squeeze(1)?, Some(aux))
            }
            None => {
                let f = self.stages[3].forward(&f, train)?;
                let a = channel_energy(&f)?;
                (f, a, None)
            }
        };
        let pooled = f.mean(D::Minus1)?.mean(D::Minus1)?;
        Ok(ForwardOutput {
            logits: self.head.forward(&pooled)?,
            attention,
            aux_logits,
        })
    }

    /// Trainable parameters in a fixed (name) order.
    pub fn params(&self) -> Vec<&Var> {
        self.store.params.values().collect()
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.store.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_count(&self) -> usize {
        self.store.params.values().map(|v| v.elem_count()).sum()
    }

    /// Flat copy of every parameter and buffer, for equality checks.
    pub fn state_vec(&self) -> Result<Vec<f32>> {
        let mut out = Vec::new();
        for v in self.store.params.values().chain(self.store.buffers.values()) {
            out.extend(v.as_tensor().flatten_all()?.to_vec1::<f32>()?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .store
            .params
            .iter()
            .chain(self.store.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(spec: ModelSpec, path: &Path) -> Result<Self> {
        let model = Self::new(spec, 0)?;
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        for (name, var) in model.store.params.iter().chain(model.store.buffers.iter()) {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("{}: missing tensor {name}", path.display())))?;
            var.set(&t.to_dtype(DType::F32)?)?;
        }
        Ok(model)
    }
}
