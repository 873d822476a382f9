//! Two-block BatchNorm CNN with a hand-written reverse pass:
//! conv3x3(3->8) -> BN -> ReLU -> conv3x3/2(8->16) -> BN -> ReLU -> GAP -> linear(16->2).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::params::{GradSet, LayerKind, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::seed::{self, Stream};

pub const IN_CHANNELS: usize = CHANNELS;
pub const HIDDEN1: usize = 8;
pub const HIDDEN2: usize = 16;
pub const CLASSES: usize = 2;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

// Fixed parameter order.
pub const CONV1: usize = 0;
pub const BN1_SCALE: usize = 1;
pub const BN1_SHIFT: usize = 2;
pub const CONV2: usize = 3;
pub const BN2_SCALE: usize = 4;
pub const BN2_SHIFT: usize = 5;
pub const FC_WEIGHT: usize = 6;
pub const FC_BIAS: usize = 7;

/// Which statistics BatchNorm normalizes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Batch statistics, and the running averages are updated.
    Train,
    /// Running (EMA) statistics.
    EvalEma,
    /// Batch statistics, running averages left alone.
    EvalBatch,
}

impl BnMode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, Self::EvalEma)
    }
}

/// Running mean and (biased) variance of one BN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnLayerStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub layers: Vec<BnLayerStats>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    pub fn fresh() -> Self {
        let layer = |c: usize| BnLayerStats {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        };
        Self {
            layers: vec![layer(HIDDEN1), layer(HIDDEN2)],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }
}

/// NHWC input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Self> {
        let mut data = Vec::new();
        let mut dims = None;
        let mut n = 0;
        for img in images {
            let d = (img.height(), img.width());
            if *dims.get_or_insert(d) != d {
                return Err(Error::Dimension("batch images differ in size".into()));
            }
            data.extend_from_slice(img.pixels());
            n += 1;
        }
        let (h, w) = dims.ok_or_else(|| Error::Empty("batch has no images".into()))?;
        Ok(Self { n, h, w, data })
    }
}

/// Per-sample class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub rows: Vec<[f64; CLASSES]>,
}

impl Logits {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn softmax(&self) -> Vec<[f64; CLASSES]> {
        self.rows.iter().map(|r| softmax2(*r)).collect()
    }

    /// `p(y = 1 | x)` per sample.
    pub fn fake_probs(&self) -> Vec<f64> {
        self.rows.iter().map(|r| softmax2(*r)[1]).collect()
    }
}

pub fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// Activations retained by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct Cache {
    mode: BnMode,
    n: usize,
    h: usize,
    w: usize,
    input: Vec<f64>,
    bn1: BnCache,
    act1: Vec<f64>,
    bn2: BnCache,
    act2: Vec<f64>,
    pooled: Vec<f64>,
}

impl Cache {
    pub fn batch_size(&self) -> usize {
        self.n
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    /// Batch mean/variance seen by BN layer `layer` (0 or 1).
    pub fn batch_stats(&self, layer: usize) -> (&[f64], &[f64]) {
        let c = [&self.bn1, &self.bn2][layer];
        (&c.batch_mean, &c.batch_var)
    }

    /// Normalized pre-affine activations of BN layer `layer`.
    pub fn normalized(&self, layer: usize) -> &[f64] {
        &[&self.bn1, &self.bn2][layer].xhat
    }
}

/// Parameters plus BN running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: ParamSet,
    pub bn: BnState,
}

impl Model {
    /// He fan-in initialization from `seed`; BN scale 1, shift 0.
    pub fn init(seed: u64) -> Self {
        let mut rng = seed::rng(seed, Stream::Init, 0);
        let mut he = |name: &str, kind, shape: &[usize], fan_in: usize| {
            let mut t = Tensor::zeros(name, kind, shape);
            let std = (2.0 / fan_in as f64).sqrt();
            for v in &mut t.data {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
            t
        };
        let conv1 = he("conv1.weight", LayerKind::ConvKernel, &[3, 3, IN_CHANNELS, HIDDEN1], 9 * IN_CHANNELS);
        let conv2 = he("conv2.weight", LayerKind::ConvKernel, &[3, 3, HIDDEN1, HIDDEN2], 9 * HIDDEN1);
        let fc = he("fc.weight", LayerKind::LinearWeight, &[CLASSES, HIDDEN2], HIDDEN2);
        let ones = |name: &str, c| {
            let mut t = Tensor::zeros(name, LayerKind::BnScale, &[c]);
            t.data.fill(1.0);
            t
        };
        let params = ParamSet::new(vec![
            conv1,
            ones("bn1.weight", HIDDEN1),
            Tensor::zeros("bn1.bias", LayerKind::BnShift, &[HIDDEN1]),
            conv2,
            ones("bn2.weight", HIDDEN2),
            Tensor::zeros("bn2.bias", LayerKind::BnShift, &[HIDDEN2]),
            fc,
            Tensor::zeros("fc.bias", LayerKind::LinearBias, &[CLASSES]),
        ])
        .expect("fixed architecture");
        Self {
            params,
            bn: BnState::fresh(),
        }
    }

    pub fn forward(&mut self, batch: &Batch, mode: BnMode) -> Result<(Logits, Cache)> {
        forward(&self.params, &mut self.bn, batch, mode)
    }
}

fn check_architecture(params: &ParamSet) -> Result<()> {
    let expect: [(usize, &[usize]); 8] = [
        (CONV1, &[3, 3, IN_CHANNELS, HIDDEN1]),
        (BN1_SCALE, &[HIDDEN1]),
        (BN1_SHIFT, &[HIDDEN1]),
        (CONV2, &[3, 3, HIDDEN1, HIDDEN2]),
        (BN2_SCALE, &[HIDDEN2]),
        (BN2_SHIFT, &[HIDDEN2]),
        (FC_WEIGHT, &[CLASSES, HIDDEN2]),
        (FC_BIAS, &[CLASSES]),
    ];
    if params.len() != expect.len() {
        return Err(Error::Dimension("parameter set does not match the architecture".into()));
    }
    for (i, shape) in expect {
        if params.get(i).shape != shape {
            return Err(Error::Dimension(format!(
                "parameter `{}` has shape {:?}, expected {:?}",
                params.get(i).name,
                params.get(i).shape,
                shape
            )));
        }
    }
    Ok(())
}

/// 3x3 convolution, zero padding 1. Weights are `[ky][kx][cin][cout]`.
fn conv3x3(
    input: &[f64],
    (n, h, w, cin): (usize, usize, usize, usize),
    weight: &[f64],
    cout: usize,
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let mut out = vec![0.0; n * ho * wo * cout];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = &mut out[((b * ho + oy) * wo + ox) * cout..][..cout];
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let px = &input[((b * h + iy as usize) * w + ix as usize) * cin..][..cin];
                        let wbase = (ky * 3 + kx) * cin * cout;
                        for (ci, &a) in px.iter().enumerate() {
                            let wr = &weight[wbase + ci * cout..][..cout];
                            for (acc, &wv) in o.iter_mut().zip(wr) {
                                *acc += a * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, ho, wo)
}

/// Reverse of [`conv3x3`]: accumulates the kernel gradient and returns the
/// input gradient when `want_input` is set.
fn conv3x3_backward(
    input: &[f64],
    (n, h, w, cin): (usize, usize, usize, usize),
    weight: &[f64],
    cout: usize,
    stride: usize,
    grad_out: &[f64],
    grad_w: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let mut grad_in = if want_input { vec![0.0; input.len()] } else { Vec::new() };
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = &grad_out[((b * ho + oy) * wo + ox) * cout..][..cout];
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let pbase = ((b * h + iy as usize) * w + ix as usize) * cin;
                        let wbase = (ky * 3 + kx) * cin * cout;
                        for ci in 0..cin {
                            let a = input[pbase + ci];
                            let gw = &mut grad_w[wbase + ci * cout..][..cout];
                            for (acc, &gv) in gw.iter_mut().zip(g) {
                                *acc += a * gv;
                            }
                            if want_input {
                                let wr = &weight[wbase + ci * cout..][..cout];
                                grad_in[pbase + ci] +=
                                    wr.iter().zip(g).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                }
            }
        }
    }
    want_input.then_some(grad_in)
}

/// Normalizes `[rows, c]` activations and applies the affine transform.
fn batch_norm(
    x: &[f64],
    c: usize,
    scale: &[f64],
    shift: &[f64],
    stats: &mut BnLayerStats,
    mode: BnMode,
    momentum: f64,
    eps: f64,
) -> (Vec<f64>, BnCache) {
    let rows = x.len() / c;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for r in x.chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    for r in x.chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= rows as f64);

    let (use_mean, use_var) = if mode.uses_batch_stats() {
        (mean.clone(), var.clone())
    } else {
        (stats.mean.clone(), stats.var.clone())
    };
    let inv_std: Vec<f64> = use_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for ((xr, hr), yr) in x.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(y.chunks_exact_mut(c)) {
        for k in 0..c {
            hr[k] = (xr[k] - use_mean[k]) * inv_std[k];
            yr[k] = scale[k] * hr[k] + shift[k];
        }
    }
    if mode == BnMode::Train {
        for k in 0..c {
            stats.mean[k] = (1.0 - momentum) * stats.mean[k] + momentum * mean[k];
            stats.var[k] = (1.0 - momentum) * stats.var[k] + momentum * var[k];
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    )
}

fn batch_norm_backward(
    grad_y: &[f64],
    c: usize,
    scale: &[f64],
    cache: &BnCache,
    batch_stats: bool,
    grad_scale: &mut [f64],
    grad_shift: &mut [f64],
) -> Vec<f64> {
    let rows = (grad_y.len() / c) as f64;
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for (gr, hr) in grad_y.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
        for k in 0..c {
            grad_shift[k] += gr[k];
            grad_scale[k] += gr[k] * hr[k];
            sum_g[k] += gr[k] * scale[k];
            sum_gx[k] += gr[k] * scale[k] * hr[k];
        }
    }
    let mut grad_x = vec![0.0; grad_y.len()];
    for ((gx, gr), hr) in grad_x
        .chunks_exact_mut(c)
        .zip(grad_y.chunks_exact(c))
        .zip(cache.xhat.chunks_exact(c))
    {
        for k in 0..c {
            let gh = gr[k] * scale[k];
            gx[k] = if batch_stats {
                cache.inv_std[k] / rows * (rows * gh - sum_g[k] - hr[k] * sum_gx[k])
            } else {
                gh * cache.inv_std[k]
            };
        }
    }
    grad_x
}

/// Runs the network. In [`BnMode::Train`] the running statistics in `bn` are
/// updated; the other modes leave `bn` untouched.
pub fn forward(
    params: &ParamSet,
    bn: &mut BnState,
    batch: &Batch,
    mode: BnMode,
) -> Result<(Logits, Cache)> {
    check_architecture(params)?;
    if batch.n == 0 {
        return Err(Error::Empty("batch has no images".into()));
    }
    if mode.uses_batch_stats() && batch.n < 2 {
        return Err(Error::BatchTooSmall(batch.n));
    }
    if batch.data.len() != batch.n * batch.h * batch.w * IN_CHANNELS {
        return Err(Error::Dimension("batch data length does not match its shape".into()));
    }
    let (momentum, eps) = (bn.momentum, bn.eps);
    let p = |i: usize| params.get(i).data.as_slice();

    let (z1, h1, w1) = conv3x3(&batch.data, (batch.n, batch.h, batch.w, IN_CHANNELS), p(CONV1), HIDDEN1, 1);
    let (y1, bn1) = batch_norm(&z1, HIDDEN1, p(BN1_SCALE), p(BN1_SHIFT), &mut bn.layers[0], mode, momentum, eps);
    let act1: Vec<f64> = y1.into_iter().map(|v| v.max(0.0)).collect();

    let (z2, h2, w2) = conv3x3(&act1, (batch.n, h1, w1, HIDDEN1), p(CONV2), HIDDEN2, 2);
    let (y2, bn2) = batch_norm(&z2, HIDDEN2, p(BN2_SCALE), p(BN2_SHIFT), &mut bn.layers[1], mode, momentum, eps);
    let act2: Vec<f64> = y2.into_iter().map(|v| v.max(0.0)).collect();

    let spatial = h2 * w2;
    let mut pooled = vec![0.0; batch.n * HIDDEN2];
    for (b, pr) in pooled.chunks_exact_mut(HIDDEN2).enumerate() {
        for px in act2[b * spatial * HIDDEN2..][..spatial * HIDDEN2].chunks_exact(HIDDEN2) {
            for (acc, &v) in pr.iter_mut().zip(px) {
                *acc += v;
            }
        }
        pr.iter_mut().for_each(|v| *v /= spatial as f64);
    }

    let fw = p(FC_WEIGHT);
    let fb = p(FC_BIAS);
    let rows = pooled
        .chunks_exact(HIDDEN2)
        .map(|f| {
            let mut z = [0.0; CLASSES];
            for (k, zk) in z.iter_mut().enumerate() {
                *zk = fb[k] + fw[k * HIDDEN2..][..HIDDEN2].iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
            }
            z
        })
        .collect();

    Ok((
        Logits { rows },
        Cache {
            mode,
            n: batch.n,
            h: batch.h,
            w: batch.w,
            input: batch.data.clone(),
            bn1,
            act1,
            bn2,
            act2,
            pooled,
        },
    ))
}

/// Exact reverse-mode gradient of `sum_i <grad_logits[i], logits[i]>` with
/// respect to every parameter. BN backs through the batch statistics whenever
/// the forward pass used them.
pub fn backward(params: &ParamSet, cache: &Cache, grad_logits: &[[f64; CLASSES]]) -> Result<GradSet> {
    check_architecture(params)?;
    if grad_logits.len() != cache.n {
        return Err(Error::Dimension(format!(
            "{} logit gradients for a cached batch of {}",
            grad_logits.len(),
            cache.n
        )));
    }
    let mut grads = GradSet::zeros_like(params);
    let p = |i: usize| params.get(i).data.as_slice();
    let n = cache.n;
    let (h1, w1) = (cache.h, cache.w);
    let (h2, w2) = ((h1 - 1) / 2 + 1, (w1 - 1) / 2 + 1);
    let spatial = h2 * w2;

    let fw = p(FC_WEIGHT);
    let mut grad_pooled = vec![0.0; n * HIDDEN2];
    {
        let mut gw = vec![0.0; CLASSES * HIDDEN2];
        let mut gb = vec![0.0; CLASSES];
        for (b, g) in grad_logits.iter().enumerate() {
            let f = &cache.pooled[b * HIDDEN2..][..HIDDEN2];
            for k in 0..CLASSES {
                gb[k] += g[k];
                for j in 0..HIDDEN2 {
                    gw[k * HIDDEN2 + j] += g[k] * f[j];
                    grad_pooled[b * HIDDEN2 + j] += g[k] * fw[k * HIDDEN2 + j];
                }
            }
        }
        grads.get_mut(FC_WEIGHT).data = gw;
        grads.get_mut(FC_BIAS).data = gb;
    }

    // Pool and ReLU.
    let mut grad_y2 = vec![0.0; cache.act2.len()];
    for b in 0..n {
        let gp = &grad_pooled[b * HIDDEN2..][..HIDDEN2];
        let base = b * spatial * HIDDEN2;
        for (gy, a) in grad_y2[base..base + spatial * HIDDEN2]
            .chunks_exact_mut(HIDDEN2)
            .zip(cache.act2[base..base + spatial * HIDDEN2].chunks_exact(HIDDEN2))
        {
            for k in 0..HIDDEN2 {
                gy[k] = if a[k] > 0.0 { gp[k] / spatial as f64 } else { 0.0 };
            }
        }
    }

    let batch_stats = cache.mode.uses_batch_stats();
    let mut gs2 = vec![0.0; HIDDEN2];
    let mut gb2 = vec![0.0; HIDDEN2];
    let grad_z2 = batch_norm_backward(&grad_y2, HIDDEN2, p(BN2_SCALE), &cache.bn2, batch_stats, &mut gs2, &mut gb2);
    grads.get_mut(BN2_SCALE).data = gs2;
    grads.get_mut(BN2_SHIFT).data = gb2;

    let mut gw2 = vec![0.0; p(CONV2).len()];
    let grad_act1 = conv3x3_backward(
        &cache.act1,
        (n, h1, w1, HIDDEN1),
        p(CONV2),
        HIDDEN2,
        2,
        &grad_z2,
        &mut gw2,
        true,
    )
    .expect("input gradient requested");
    grads.get_mut(CONV2).data = gw2;

    let grad_y1: Vec<f64> = grad_act1
        .iter()
        .zip(&cache.act1)
        .map(|(&g, &a)| if a > 0.0 { g } else { 0.0 })
        .collect();
    let mut gs1 = vec![0.0; HIDDEN1];
    let mut gb1 = vec![0.0; HIDDEN1];
    let grad_z1 = batch_norm_backward(&grad_y1, HIDDEN1, p(BN1_SCALE), &cache.bn1, batch_stats, &mut gs1, &mut gb1);
    grads.get_mut(BN1_SCALE).data = gs1;
    grads.get_mut(BN1_SHIFT).data = gb1;

    let mut gw1 = vec![0.0; p(CONV1).len()];
    conv3x3_backward(
        &cache.input,
        (n, cache.h, cache.w, IN_CHANNELS),
        p(CONV1),
        HIDDEN1,
        1,
        &grad_z1,
        &mut gw1,
        false,
    );
    grads.get_mut(CONV1).data = gw1;
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_fake_sized, gen_real_sized, DistributionId};

    fn small_batch(n: usize, size: usize) -> Batch {
        let imgs: Vec<Image> = (0..n)
            .map(|i| {
                if i % 2 == 0 {
                    gen_real_sized(i as u64, DistributionId::Source, size)
                } else {
                    gen_fake_sized(i as u64, DistributionId::Source, size)
                }
            })
            .collect();
        Batch::from_images(&imgs).unwrap()
    }

    /// Fixed pseudo-random upstream weights so the scalar loss exercises
    /// every logit.
    fn probe_loss(logits: &Logits) -> f64 {
        logits
            .rows
            .iter()
            .enumerate()
            .map(|(i, z)| {
                let p = softmax2(*z);
                let w = 0.3 + 0.1 * i as f64;
                -(w * p[1].ln() + (1.0 - w) * p[0].ln()) + 0.05 * z[0] * z[1]
            })
            .sum()
    }

    fn probe_grad(logits: &Logits) -> Vec<[f64; 2]> {
        logits
            .rows
            .iter()
            .enumerate()
            .map(|(i, z)| {
                let p = softmax2(*z);
                let w = 0.3 + 0.1 * i as f64;
                // d/dz of -(w ln p1 + (1-w) ln p0) is p - (1-w, w).
                [p[0] - (1.0 - w) + 0.05 * z[1], p[1] - w + 0.05 * z[0]]
            })
            .collect()
    }

    #[test]
    fn identical_inputs_identical_logits() {
        let img = gen_fake_sized(3, DistributionId::Source, 8);
        let batch = Batch::from_images([&img, &img, &gen_real_sized(1, DistributionId::Source, 8)]).unwrap();
        let mut model = Model::init(1);
        for mode in [BnMode::EvalBatch, BnMode::EvalEma] {
            let (l, _) = model.forward(&batch, mode).unwrap();
            assert_eq!(l.rows[0], l.rows[1]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut model = Model::init(2);
        let (l, _) = model.forward(&small_batch(6, 8), BnMode::EvalBatch).unwrap();
        for p in l.softmax() {
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        }
        assert!((softmax2([800.0, -800.0])[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_and_ema_modes_agree_when_stats_match() {
        let batch = small_batch(4, 8);
        let mut model = Model::init(3);
        let (lb, cache) = model.forward(&batch, BnMode::EvalBatch).unwrap();
        for layer in 0..2 {
            let (m, v) = cache.batch_stats(layer);
            model.bn.layers[layer].mean = m.to_vec();
            model.bn.layers[layer].var = v.to_vec();
        }
        let (le, _) = model.forward(&batch, BnMode::EvalEma).unwrap();
        for (a, b) in lb.rows.iter().zip(&le.rows) {
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn single_sample_needs_running_stats() {
        let mut model = Model::init(4);
        let batch = small_batch(1, 8);
        assert!(matches!(model.forward(&batch, BnMode::EvalBatch), Err(Error::BatchTooSmall(1))));
        assert!(matches!(model.forward(&batch, BnMode::Train), Err(Error::BatchTooSmall(1))));
        assert!(model.forward(&batch, BnMode::EvalEma).is_ok());
    }

    #[test]
    fn normalized_activations_are_standardized() {
        let mut model = Model::init(5);
        let (_, cache) = model.forward(&small_batch(6, 8), BnMode::Train).unwrap();
        for (layer, c) in [(0, HIDDEN1), (1, HIDDEN2)] {
            let xhat = cache.normalized(layer);
            let batch_var = cache.batch_stats(layer).1.to_vec();
            let rows = (xhat.len() / c) as f64;
            for k in 0..c {
                let mean: f64 = xhat.iter().skip(k).step_by(c).sum::<f64>() / rows;
                let var: f64 = xhat.iter().skip(k).step_by(c).map(|v| (v - mean).powi(2)).sum::<f64>() / rows;
                assert!(mean.abs() < 1e-6);
                // eps in the denominator shrinks the variance slightly.
                let expect = batch_var[k] / (batch_var[k] + BN_EPS);
                assert!((var - expect).abs() < 1e-10, "layer {layer} channel {k}: {var}");
            }
        }
    }

    #[test]
    fn ema_converges_geometrically() {
        let mut model = Model::init(6);
        let batch = small_batch(4, 8);
        let (_, cache) = model.forward(&batch, BnMode::EvalBatch).unwrap();
        let target = cache.batch_stats(0).0[0];
        let mut gap = (model.bn.layers[0].mean[0] - target).abs();
        for _ in 0..5 {
            model.forward(&batch, BnMode::Train).unwrap();
            let next = (model.bn.layers[0].mean[0] - target).abs();
            assert!((next - (1.0 - BN_MOMENTUM) * gap).abs() < 1e-12);
            gap = next;
        }
    }

    #[test]
    fn eval_modes_leave_running_stats() {
        let mut model = Model::init(7);
        let before = model.bn.clone();
        model.forward(&small_batch(4, 8), BnMode::EvalBatch).unwrap();
        model.forward(&small_batch(4, 8), BnMode::EvalEma).unwrap();
        assert_eq!(model.bn, before);
    }

    #[test]
    fn zero_upstream_gradient() {
        let mut model = Model::init(8);
        let (l, cache) = model.forward(&small_batch(4, 8), BnMode::EvalBatch).unwrap();
        let g = backward(&model.params, &cache, &vec![[0.0; 2]; l.len()]).unwrap();
        assert!(g.iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn gradient_is_homogeneous() {
        let mut model = Model::init(9);
        let (l, cache) = model.forward(&small_batch(4, 8), BnMode::EvalBatch).unwrap();
        let up = probe_grad(&l);
        let doubled: Vec<[f64; 2]> = up.iter().map(|g| [2.0 * g[0], 2.0 * g[1]]).collect();
        let g1 = backward(&model.params, &cache, &up).unwrap();
        let g2 = backward(&model.params, &cache, &doubled).unwrap();
        for (a, b) in g1.iter().zip(g2.iter()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((2.0 * x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mismatched_upstream_rejected() {
        let mut model = Model::init(10);
        let (_, cache) = model.forward(&small_batch(4, 8), BnMode::EvalBatch).unwrap();
        assert!(backward(&model.params, &cache, &[[0.0; 2]; 3]).is_err());
    }

    fn check_finite_differences(mode: BnMode) {
        let batch = small_batch(4, 8);
        let mut model = Model::init(11);
        // Move BN affine parameters off their defaults so every path is generic.
        for idx in [BN1_SCALE, BN1_SHIFT, BN2_SCALE, BN2_SHIFT] {
            for (i, v) in model.params.get_mut(idx).data.iter_mut().enumerate() {
                *v += 0.1 * ((i as f64) * 0.7).sin();
            }
        }
        if mode == BnMode::EvalEma {
            model.forward(&batch, BnMode::Train).unwrap();
        }
        let (l, cache) = model.forward(&batch, mode).unwrap();
        let grads = backward(&model.params, &cache, &probe_grad(&l)).unwrap();

        // Small enough that no ReLU input crosses zero under the perturbation.
        let h = 1e-5;
        for idx in 0..model.params.len() {
            for j in 0..model.params.get(idx).len() {
                let eval = |delta: f64| {
                    let mut p = model.params.clone();
                    p.get_mut(idx).data[j] += delta;
                    let mut bn = model.bn.clone();
                    probe_loss(&forward(&p, &mut bn, &batch, mode).unwrap().0)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let analytic = grads.get(idx).data[j];
                let err = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    err < 1e-4,
                    "{mode:?} {}[{j}]: analytic {analytic} numeric {numeric}",
                    model.params.get(idx).name
                );
            }
        }
    }

    #[test]
    fn finite_differences_batch_stats() {
        check_finite_differences(BnMode::EvalBatch);
    }

    #[test]
    fn finite_differences_running_stats() {
        check_finite_differences(BnMode::EvalEma);
    }
}
